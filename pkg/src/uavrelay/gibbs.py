"""Gibbs-sampling search over a cubic grid of UAV positions.

Each UAV occupies one grid cell. A sub-iteration resamples one UAV's cell
from a small candidate set (the current cell, its face neighbours and a few
random cells) with probability proportional to exp(mu * eta), where eta is
the optimal max-min rate of the resource allocation at that placement.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .channel import Placement
from .scenario import AlgoConfig, Scenario
from . import sca

log = logging.getLogger(__name__)

_FACES = np.array([[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]])


@dataclass(frozen=True)
class Grid:
    """Regular grid of cubic cells covering the region and altitude range.

    Cells have edge ``cell``; the cell block is centred in each axis extent, so
    all centroids lie inside the region. Flat index = (ix * ny + iy) * nz + iz.
    """

    origin: tuple[float, float, float]  # centroid of cell (0, 0, 0)
    cell: float
    shape: tuple[int, int, int]
    lower: tuple[float, float, float]
    upper: tuple[float, float, float]

    @classmethod
    def from_scenario(cls, scenario: Scenario, cell: float) -> "Grid":
        x0, x1, y0, y1 = scenario.region
        lo = (x0, y0, scenario.h_min)
        hi = (x1, y1, scenario.h_max)
        shape, origin = [], []
        for a, b in zip(lo, hi):
            n = max(1, int(math.floor((b - a) / cell + 1e-9)))
            shape.append(n)
            origin.append(a + 0.5 * ((b - a) - n * cell) + 0.5 * cell)
        return cls(tuple(origin), float(cell), tuple(shape), lo, hi)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def ravel(self, ijk) -> np.ndarray:
        ijk = np.asarray(ijk)
        return np.ravel_multi_index(tuple(ijk.T), self.shape)

    def unravel(self, flat) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(flat), self.shape), axis=-1)

    def centroid(self, flat) -> np.ndarray:
        return np.asarray(self.origin) + self.cell * self.unravel(flat)

    def placement(self, cells) -> Placement:
        xyz = self.centroid(np.asarray(cells, dtype=int)).reshape(-1, 3)
        return Placement.from_xyz(xyz)

    def neighbors(self, flat: int) -> list[int]:
        """Face-adjacent cells, clipped at the grid boundary."""
        ijk = self.unravel(flat) + _FACES
        ok = np.all((ijk >= 0) & (ijk < np.asarray(self.shape)), axis=1)
        return sorted(int(c) for c in self.ravel(ijk[ok]))

    def snap(self, xyz) -> int:
        """Nearest centroid; per-axis rounding with ties to the lower index."""
        xyz = np.asarray(xyz, dtype=float)
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        if np.any(xyz < lo - 1e-9) or np.any(xyz > hi + 1e-9):
            log.warning("position %s outside the grid region; clamped", xyz)
        u = (xyz - np.asarray(self.origin)) / self.cell
        ijk = np.ceil(u - 0.5).astype(int)  # exact halves go down
        ijk = np.clip(ijk, 0, np.asarray(self.shape) - 1)
        return int(self.ravel(ijk[None])[0])


@dataclass
class GsState:
    cells: tuple[int, ...]
    eta: float | None = None
    t: int = 0
    i: int = 0


def snap_to_grid(grid: Grid, placement: Placement) -> GsState:
    """Map each UAV to its nearest cell centroid."""
    return GsState(tuple(grid.snap(p) for p in placement.xyz))


class EtaEvaluator:
    """Memoized slave-problem value eta(W) on grid states.

    When all UAV budgets are equal the value is label-symmetric, so the cache
    key (and the evaluated placement) is the sorted cell tuple.
    """

    def __init__(self, scenario: Scenario, config: AlgoConfig, grid: Grid):
        self.scenario = scenario
        self.config = config
        self.grid = grid
        self.cache: dict[tuple[int, ...], float] = {}
        self.symmetric = bool(np.all(scenario.uav_power == scenario.uav_power[0]))
        self.solves = 0
        self.hits = 0

    def key(self, cells) -> tuple[int, ...]:
        cells = tuple(int(c) for c in cells)
        return tuple(sorted(cells)) if self.symmetric else cells

    def solve(self, cells):
        """(allocation, eta) at the state's centroids; no caching."""
        placement = self.grid.placement(self.key(cells) if self.symmetric else cells)
        return sca.solve_resource_allocation(self.scenario, placement, config=self.config)

    def __call__(self, cells) -> float:
        key = self.key(cells)
        if key in self.cache:
            self.hits += 1
            return self.cache[key]
        self.solves += 1
        if len(set(key)) < len(key):
            eta = 0.0  # co-located UAVs: the relay link between them is undefined
        else:
            try:
                _, eta = self.solve(key)
            except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
                log.warning("slave problem failed at %s: %s", key, exc)
                eta = 0.0
        self.cache[key] = float(eta)
        return float(eta)


@dataclass
class CandidateSet:
    uav: int
    near: list[int]  # current cell and its free face neighbours
    rand: list[int]  # random free cells outside ``near``
    etas: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def cells(self) -> list[int]:
        """Canonical order: ascending cell index."""
        return sorted(self.near + self.rand)


def candidate_set(grid: Grid, state: GsState, uav: int, L: int, rng: np.random.Generator) -> CandidateSet:
    """Neighbour set A (current cell + free face neighbours) and L random cells B.

    Cells held by other UAVs are never candidates. B is drawn uniformly
    without replacement from the remaining free cells.
    """
    others = {c for j, c in enumerate(state.cells) if j != uav}
    cur = state.cells[uav]
    near = sorted({cur} | {c for c in grid.neighbors(cur) if c not in others})
    excluded = set(near) | others
    free = grid.size - len(excluded)
    want = min(L, free)
    rand: list[int] = []
    if want > 0:
        if free <= 4 * want + 64:
            pool = np.setdiff1d(np.arange(grid.size), np.fromiter(excluded, dtype=int))
            rand = sorted(int(c) for c in rng.choice(pool, size=want, replace=False))
        else:
            picked: set[int] = set()
            while len(picked) < want:
                c = int(rng.integers(grid.size))
                if c not in excluded:
                    picked.add(c)
            rand = sorted(picked)
    return CandidateSet(uav, near, rand)


def transition_probs(etas, mu: float) -> np.ndarray:
    """Softmax of mu * eta with the maximum subtracted."""
    e = np.asarray(etas, dtype=float)
    if e.size == 0:
        raise ValueError("empty candidate set")
    w = np.exp(mu * (e - np.max(e)))
    return w / w.sum()


def transition_sample(etas, mu: float, rng: np.random.Generator) -> int:
    """Index of the chosen candidate; consumes exactly one uniform draw."""
    prob = transition_probs(etas, mu)
    u = rng.random()
    return int(min(np.searchsorted(np.cumsum(prob), u, side="right"), len(prob) - 1))


@dataclass
class GsOutcome:
    improved: bool
    state: GsState  # improving state, or best visited state when exhausted
    eta: float
    visited: list[tuple[tuple[int, ...], float]]


def gs_phase(grid: Grid, evaluator: EtaEvaluator, start: GsState, eta_target: float,
             config: AlgoConfig, rng: np.random.Generator,
             on_visit: Callable[[int, int, tuple, float], None] | None = None) -> GsOutcome:
    """Refined Gibbs sampling until a visited state beats ``eta_target``.

    Runs up to ``config.max_gs_iters`` iterations of M sub-iterations each.
    Returns ``improved`` at the first visited state with eta > eta_target,
    otherwise ``exhausted`` with the best visited state (the start included).
    """
    state = GsState(tuple(start.cells), evaluator(start.cells))
    best = GsState(state.cells, state.eta)
    visited: list[tuple[tuple[int, ...], float]] = []
    M = len(state.cells)
    for t in range(1, config.max_gs_iters + 1):
        for i in range(M):
            cand = candidate_set(grid, state, i, config.L, rng)
            cells = cand.cells
            states = [state.cells[:i] + (c,) + state.cells[i + 1:] for c in cells]
            etas = np.array([evaluator(s) for s in states])
            j = transition_sample(etas, config.mu, rng)
            state = GsState(states[j], float(etas[j]), t, i)
            visited.append((state.cells, state.eta))
            if on_visit is not None:
                on_visit(t, i, state.cells, state.eta)
            if state.eta > best.eta:
                best = GsState(state.cells, state.eta, t, i)
            if state.eta > eta_target:
                return GsOutcome(True, state, state.eta, visited)
    return GsOutcome(False, best, float(best.eta), visited)


def full_gibbs_step(grid: Grid, evaluator: EtaEvaluator, state: GsState, uav: int, mu: float,
                    rng: np.random.Generator, max_cells: int = 4096) -> GsState:
    """Exact Gibbs update: resample one UAV over every free cell of the grid."""
    if grid.size > max_cells:
        raise ValueError(f"grid has {grid.size} cells, above the enumeration cap {max_cells}")
    others = {c for j, c in enumerate(state.cells) if j != uav}
    cells = [c for c in range(grid.size) if c not in others]
    states = [state.cells[:uav] + (c,) + state.cells[uav + 1:] for c in cells]
    etas = np.array([evaluator(s) for s in states])
    j = transition_sample(etas, mu, rng)
    return GsState(states[j], float(etas[j]), state.t, uav)


def stationary_distribution(grid: Grid, evaluator: EtaEvaluator, M: int, mu: float,
                            max_states: int = 4096) -> tuple[list[tuple[int, ...]], np.ndarray]:
    """Enumerated pi(W) proportional to exp(mu * eta(W)) over collision-free states."""
    if grid.size ** M > max_states:
        raise ValueError("state space too large to enumerate")
    states = [s for s in itertools.product(range(grid.size), repeat=M) if len(set(s)) == M]
    etas = np.array([evaluator(s) for s in states])
    return states, transition_probs(etas, mu)
