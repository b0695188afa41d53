"""IGS-BCD orchestration, benchmark schemes, the independent checker and output files."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gibbs, initialize, sca
from .channel import Allocation, Placement, link_rates
from .scenario import AlgoConfig, Scenario

log = logging.getLogger(__name__)

ALGOS = ("igs-bcd", "bcd-only", "gs-only", "random-select")
TRACE_HEADER = ("iter", "phase", "substep", "eta", "eta_best", "wall_ms")


@dataclass
class TraceRow:
    iter: int
    phase: str  # "init", "bcd", "gs" or "random"
    substep: str
    eta: float
    eta_best: float
    wall_ms: float


@dataclass
class CheckReport:
    eta: float
    violations: list[str] = field(default_factory=list)
    residuals: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations


@dataclass
class RunResult:
    placement: Placement
    alloc: Allocation
    eta: float
    trace: list[TraceRow]
    algo: str
    seed: int
    digest: str
    wall_s: float = 0.0
    check: CheckReport | None = None
    extra: dict = field(default_factory=dict)


class _Recorder:
    """Builds trace rows with a running best and wall-clock offsets."""

    def __init__(self):
        self.rows: list[TraceRow] = []
        self.best = -math.inf
        self.t0 = time.perf_counter()

    def __call__(self, it: int, phase: str, substep: str, eta: float) -> None:
        self.best = max(self.best, eta)
        ms = 1e3 * (time.perf_counter() - self.t0)
        self.rows.append(TraceRow(it, phase, substep, float(eta), float(self.best), ms))

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.t0


# ---------------------------------------------------------------------------
# independent checker


def check_solution(scenario: Scenario, placement: Placement, alloc: Allocation, eta: float,
                   tol: float = 1e-8, flow_tol: float = 1e-5, eta_rtol: float = 1e-6) -> CheckReport:
    """Verify every constraint of the joint problem from channel-model rates only."""
    rates = link_rates(scenario, placement, alloc)
    eta_true = rates.eta()
    rep = CheckReport(eta_true)
    v = rep.violations
    arrays = (alloc.a_s, alloc.a_d, alloc.a_r, alloc.p_s, alloc.p_d, alloc.p_r)
    if any(np.any(x < 0) or not np.all(np.isfinite(x)) for x in arrays):
        v.append("negative or non-finite allocation entry")
    bw = alloc.total_bandwidth()
    rep.residuals["bandwidth"] = bw - 1.0
    if bw > 1.0 + tol:
        v.append(f"bandwidth fractions sum to {bw:.12g} > 1")
    ps = alloc.source_power_used() - scenario.source_power
    pu = alloc.uav_power_used() - scenario.uav_power
    rep.residuals["source_power"] = float(np.max(ps / scenario.source_power))
    rep.residuals["uav_power"] = float(np.max(pu / scenario.uav_power))
    if np.any(ps > tol * scenario.source_power):
        v.append("source power budget exceeded")
    if np.any(pu > tol * scenario.uav_power):
        v.append("UAV power budget exceeded")
    z = placement.z
    if np.any(z < scenario.h_min - 1e-9) or np.any(z > scenario.h_max + 1e-9):
        v.append("altitude outside the allowed range")
    x0, x1, y0, y1 = scenario.region
    q = placement.q
    if np.any(q[:, 0] < x0 - 1e-9) or np.any(q[:, 0] > x1 + 1e-9) or \
            np.any(q[:, 1] < y0 - 1e-9) or np.any(q[:, 1] > y1 + 1e-9):
        v.append("UAV outside the deployment region")
    res = rates.flow_residual()
    rep.residuals["flow"] = float(np.max(np.abs(res))) if res.size else 0.0
    if rep.residuals["flow"] > flow_tol * max(eta_true, 1e-12):
        v.append(f"flow conservation residual {rep.residuals['flow']:.3g}")
    rep.residuals["eta"] = abs(eta - eta_true)
    if abs(eta - eta_true) > eta_rtol * max(abs(eta_true), 1e-12):
        v.append(f"reported eta {eta:.12g} differs from recomputed {eta_true:.12g}")
    return rep


# ---------------------------------------------------------------------------
# algorithms


def _initial_placement(scenario: Scenario, config: AlgoConfig, init: str) -> Placement:
    if init == "vuc":
        return initialize.vuc_init(scenario, config)
    return initialize.benchmark_inits(scenario, config, init)


def _equal_state(scenario: Scenario, placement: Placement) -> sca.BcdState:
    alloc = sca.equal_split(scenario)
    return sca.BcdState(placement, alloc, sca.evaluate_state(scenario, placement, alloc))


def _bcd(scenario, config, state, rec: _Recorder, it: int) -> sca.BcdState:
    def on_step(step: sca.BcdStep):
        rec(it, "bcd", f"{step.iteration}.{step.substep}", step.eta)

    out, _ = sca.bcd_phase(scenario, state, config, on_step=on_step)
    return out


def run_igs_bcd(scenario: Scenario, config: AlgoConfig, init: str = "vuc") -> RunResult:
    """Alternate BCD and GS phases until a GS phase finds nothing better.

    Each GS phase starts from the BCD result snapped to the grid and stops at
    the first visited state that beats the BCD rate; BCD then restarts from
    that state with an equal-split allocation. The returned state is the last
    BCD result.
    """
    rec = _Recorder()
    grid = gibbs.Grid.from_scenario(scenario, config.grid_cell_m)
    evaluator = gibbs.EtaEvaluator(scenario, config, grid)
    rng = np.random.default_rng(config.seed)
    state = _equal_state(scenario, _initial_placement(scenario, config, init))
    rec(0, "init", init, state.eta)
    best = state
    gs_phases = 0
    for it in range(1, config.max_outer_iters + 1):
        state = _bcd(scenario, config, state, rec, it)
        if state.eta >= best.eta:
            best = state
        if it == config.max_outer_iters:
            break
        start = gibbs.snap_to_grid(grid, state.placement)
        outcome = gibbs.gs_phase(grid, evaluator, start, best.eta, config, rng,
                                 on_visit=lambda t, i, cells, eta: rec(it, "gs", f"{t}.{i}", eta))
        gs_phases += 1
        if not outcome.improved:
            break
        state = _equal_state(scenario, grid.placement(outcome.state.cells))
    result = RunResult(best.placement, best.alloc, best.eta, rec.rows, "igs-bcd", config.seed,
                       scenario.digest(), rec.elapsed)
    result.extra.update(init=init, gs_phases=gs_phases, slave_solves=evaluator.solves,
                        cache_hits=evaluator.hits)
    result.check = check_solution(scenario, result.placement, result.alloc, result.eta)
    return result


def run_benchmark(scenario: Scenario, config: AlgoConfig, algo: str, init: str = "vuc",
                  n_random: int | None = None) -> RunResult:
    """Benchmark schemes: ``bcd-only``, ``gs-only`` or ``random-select``."""
    if algo == "igs-bcd":
        return run_igs_bcd(scenario, config, init)
    rec = _Recorder()
    grid = gibbs.Grid.from_scenario(scenario, config.grid_cell_m)
    evaluator = gibbs.EtaEvaluator(scenario, config, grid)
    rng = np.random.default_rng(config.seed)
    extra: dict = {}
    if algo == "bcd-only":
        state = _equal_state(scenario, _initial_placement(scenario, config, init))
        rec(0, "init", init, state.eta)
        state = _bcd(scenario, config, state, rec, 1)
        placement, alloc, eta = state.placement, state.alloc, state.eta
    elif algo == "gs-only":
        start = gibbs.snap_to_grid(grid, _initial_placement(scenario, config, init))
        best_cells, best_eta = start.cells, evaluator(start.cells)
        rec(0, "init", init, best_eta)
        for it in range(1, config.max_outer_iters + 1):
            outcome = gibbs.gs_phase(grid, evaluator, gibbs.GsState(best_cells), best_eta, config, rng,
                                     on_visit=lambda t, i, cells, eta: rec(it, "gs", f"{t}.{i}", eta))
            if outcome.eta > best_eta:
                best_cells, best_eta = outcome.state.cells, outcome.eta
            if not outcome.improved:
                break
        placement, alloc, eta = _grid_solution(evaluator, grid, best_cells)
    elif algo == "random-select":
        n = config.random_select_n if n_random is None else n_random
        best_cells, best_eta = None, -math.inf
        for j in range(n):
            cells = tuple(int(c) for c in rng.choice(grid.size, size=scenario.M, replace=False))
            eta = evaluator(cells)
            rec(1, "random", str(j), eta)
            if eta > best_eta:
                best_cells, best_eta = cells, eta
        placement, alloc, eta = _grid_solution(evaluator, grid, best_cells)
        extra["samples"] = n
    else:
        raise ValueError(f"unknown algorithm {algo!r}")
    result = RunResult(placement, alloc, eta, rec.rows, algo, config.seed, scenario.digest(), rec.elapsed)
    extra.update(init=init, slave_solves=evaluator.solves, cache_hits=evaluator.hits)
    result.extra.update(extra)
    result.check = check_solution(scenario, placement, alloc, eta)
    return result


def _grid_solution(evaluator: gibbs.EtaEvaluator, grid: gibbs.Grid, cells):
    key = evaluator.key(cells)
    placement = grid.placement(key)
    alloc, eta = evaluator.solve(key)
    return placement, alloc, eta


def run(scenario: Scenario, config: AlgoConfig, algo: str = "igs-bcd", init: str = "vuc") -> RunResult:
    return run_igs_bcd(scenario, config, init) if algo == "igs-bcd" else run_benchmark(scenario, config, algo, init)


# ---------------------------------------------------------------------------
# outputs


def sig12(x):
    """Round floats (recursively) to 12 significant digits for serialization."""
    if isinstance(x, dict):
        return {k: sig12(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [sig12(v) for v in x]
    if isinstance(x, np.ndarray):
        return sig12(x.tolist())
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return float(f"{x:.12g}") if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def result_document(scenario: Scenario, result: RunResult) -> dict:
    rates = link_rates(scenario, result.placement, result.alloc)
    doc = {
        "algo": result.algo,
        "seed": result.seed,
        "scenario_digest": result.digest,
        "eta": result.eta,
        "placement": {"q": result.placement.q, "z": result.placement.z},
        "allocation": result.alloc.to_dict(),
        "rates": {"src": rates.src, "dst": rates.dst, "relay": rates.relay},
        "flow_residual": rates.flow_residual(),
        "check": {"ok": result.check.ok if result.check else None,
                  "violations": result.check.violations if result.check else [],
                  "residuals": result.check.residuals if result.check else {}},
        "extra": result.extra,
    }
    return sig12(doc)


def emit_outputs(scenario: Scenario, result: RunResult, out_dir, wall_clock: bool = False) -> tuple[Path, Path]:
    """Write result.json and trace.csv.

    The wall_ms column is left empty unless ``wall_clock`` is set, so that
    repeated runs with one seed produce byte-identical traces.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        res_path = out / "result.json"
        doc = result_document(scenario, result)
        if wall_clock:
            doc["wall_s"] = sig12(result.wall_s)
        res_path.write_text(json.dumps(doc, indent=2) + "\n")
        trace_path = out / "trace.csv"
        with trace_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_HEADER)
            for r in result.trace:
                w.writerow([r.iter, r.phase, r.substep, f"{r.eta:.12g}", f"{r.eta_best:.12g}",
                            f"{r.wall_ms:.12g}" if wall_clock else ""])
    except OSError as exc:
        raise OSError(f"cannot write outputs to {out}: {exc}") from exc
    return res_path, trace_path


def load_placement(doc: dict) -> tuple[Placement, Allocation | None]:
    """Placement (and allocation, if present) from a result.json-style document."""
    if "placement" in doc:
        pl = doc["placement"]
        alloc = Allocation.from_dict(doc["allocation"]) if "allocation" in doc else None
    else:
        pl, alloc = doc, None
    if "xyz" in pl:
        return Placement.from_xyz(np.asarray(pl["xyz"], dtype=float)), alloc
    return Placement(np.asarray(pl["q"], dtype=float).reshape(-1, 2), np.asarray(pl["z"], dtype=float)), alloc


def read_trace(path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# sweeps


def sweep(scenario: Scenario, config: AlgoConfig, vary: str, values, seeds: int, algo: str = "igs-bcd"):
    """Mean final eta over random pair drops for each value of K or M.

    Pairs are redrawn uniformly in the scenario's region for every seed; all
    radio constants and budgets come from ``scenario``.
    """
    if vary not in ("K", "M"):
        raise ValueError("vary must be K or M")
    rows = []
    for value in values:
        etas = []
        for s in range(seeds):
            K = int(value) if vary == "K" else scenario.K
            M = int(value) if vary == "M" else scenario.M
            sc = random_pairs(scenario, K, M, seed=s)
            res = run(sc, _with_seed(config, s), algo)
            etas.append(res.eta)
        rows.append({"vary": vary, "value": int(value), "seeds": seeds, "mean_eta": float(np.mean(etas)),
                     "min_eta": float(np.min(etas)), "max_eta": float(np.max(etas))})
    return rows


def _with_seed(config: AlgoConfig, seed: int) -> AlgoConfig:
    return dataclasses.replace(config, seed=seed)


def random_pairs(scenario: Scenario, K: int, M: int, seed: int) -> Scenario:
    """Copy of ``scenario`` with K pairs dropped uniformly in its region and M UAVs."""
    x0, x1, y0, y1 = scenario.region
    rng = np.random.default_rng(seed)
    # same draw order as scenario.random_scenario, so square regions at the origin agree
    pts = rng.uniform(0.0, 1.0, size=(2 * K, 2)) * [x1 - x0, y1 - y0] + [x0, y0]
    src_dbm = scenario.source_power_dbm[0]
    uav_w = scenario.uav_power_w[0]
    sc = scenario.with_(src=tuple(map(tuple, pts[:K])), dst=tuple(map(tuple, pts[K:])), num_uavs=M,
                        source_power_dbm=(src_dbm,) * K, uav_power_w=(uav_w,) * M)
    sc.validate()
    return sc
