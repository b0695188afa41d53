"""Initial UAV placements: virtual-UAV clustering and two benchmark schemes."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from .channel import Placement, ground_gain, persp_rate
from .gibbs import Grid
from .scenario import AlgoConfig, Scenario

log = logging.getLogger(__name__)


@dataclass
class VirtualUav:
    xy: np.ndarray
    altitude: float
    rate: float
    s: float  # position on the segment, 0 at the source and 1 at the destination


def _segment_rates(scenario: Scenario, k: int, s: float, h0: float):
    """(source->UAV, UAV->destination) rates with the per-pair equal split."""
    K = scenario.K
    u_s, u_d = scenario.src_xy[k], scenario.dst_xy[k]
    xy = u_s + s * (u_d - u_s)
    a = 1.0 / (2 * K)
    p_uav = float(np.sum(scenario.uav_power)) / K
    ch, g0 = scenario.channel, scenario.gamma0
    r_s = persp_rate(a, scenario.source_power[k], ground_gain(h0, np.sum((xy - u_s) ** 2), ch, g0))
    r_d = persp_rate(a, p_uav, ground_gain(h0, np.sum((xy - u_d) ** 2), ch, g0))
    return float(r_s), float(r_d)


def virtual_uav_position(scenario: Scenario, k: int, h0: float) -> VirtualUav:
    """Point on the k-th source-destination segment where both hop rates are equal.

    The source-side rate falls and the destination-side rate grows along the
    segment, so the balance point is a bracketed root of their difference.
    """
    u_s, u_d = scenario.src_xy[k], scenario.dst_xy[k]

    def diff(s):
        r_s, r_d = _segment_rates(scenario, k, s, h0)
        return r_d - r_s

    d0, d1 = diff(0.0), diff(1.0)
    if d0 == 0.0 or np.allclose(u_s, u_d):
        s = 0.0
    elif d0 > 0 or d1 < 0:
        ends = [min(_segment_rates(scenario, k, e, h0)) for e in (0.0, 1.0)]
        s = 0.0 if ends[0] >= ends[1] else 1.0
        log.warning("pair %d: hop rates never balance on the segment; using endpoint s=%g", k, s)
    else:
        s = brentq(diff, 0.0, 1.0, xtol=1e-15, rtol=1e-15, maxiter=500)
    r_s, _ = _segment_rates(scenario, k, s, h0)
    return VirtualUav(u_s + s * (u_d - u_s), h0, r_s, s)


def kmeans(points, M: int, seed: int, jitter: float = 5.0) -> np.ndarray:
    """M centroids of the points (k-means++, 20 restarts), sorted lexicographically.

    With fewer points than clusters, points are duplicated with a shift of
    ``jitter`` metres before clustering.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < M:
        log.warning("only %d points for %d clusters; padding with shifted copies", len(pts), M)
        rng = np.random.default_rng(seed)
        extra = []
        while len(pts) + len(extra) < M:
            base = pts[len(extra) % len(pts)]
            ang = rng.uniform(0, 2 * np.pi)
            extra.append(base + jitter * np.array([np.cos(ang), np.sin(ang)]))
        pts = np.vstack([pts, extra])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        km = KMeans(n_clusters=M, init="k-means++", n_init=20, random_state=seed).fit(pts)
    c = km.cluster_centers_
    return c[np.lexsort((c[:, 1], c[:, 0]))]


def _separate(xy: np.ndarray, step: float, region) -> np.ndarray:
    """Shift coincident centroids apart by ``step`` so that UAV links are defined."""
    x0, x1, y0, y1 = region
    xy = xy.copy()
    for i in range(1, len(xy)):
        tries = 0
        while np.any(np.all(np.isclose(xy[:i], xy[i]), axis=1)) and tries < 100:
            tries += 1
            xy[i] = xy[i] + step * np.array([1.0, 0.0] if tries % 2 else [0.0, 1.0])
            if xy[i, 0] > x1:
                xy[i, 0] -= 2 * tries * step
            if xy[i, 1] > y1:
                xy[i, 1] -= 2 * tries * step
            xy[i] = np.clip(xy[i], [x0, y0], [x1, y1])
    return xy


def _to_placement(scenario: Scenario, xy, h0: float, step: float) -> Placement:
    x0, x1, y0, y1 = scenario.region
    xy = np.clip(np.asarray(xy, dtype=float), [x0, y0], [x1, y1])
    xy = _separate(xy, step, scenario.region)
    return Placement(xy, np.full(len(xy), float(h0)))


def vuc_init(scenario: Scenario, config: AlgoConfig) -> Placement:
    """Rate-balanced virtual UAV per pair, then K-means down to M UAVs at altitude H0."""
    h0 = config.init_altitude_m
    pts = np.array([virtual_uav_position(scenario, k, h0).xy for k in range(scenario.K)])
    return _to_placement(scenario, kmeans(pts, scenario.M, config.seed, config.grid_cell_m), h0,
                         config.grid_cell_m)


def benchmark_inits(scenario: Scenario, config: AlgoConfig, mode: str, seed: int | None = None) -> Placement:
    """``random``: distinct uniformly drawn grid cells; ``gnc``: K-means of all ground nodes."""
    seed = config.seed if seed is None else seed
    if mode == "random":
        grid = Grid.from_scenario(scenario, config.grid_cell_m)
        rng = np.random.default_rng(seed)
        cells = rng.choice(grid.size, size=scenario.M, replace=False)
        return grid.placement(np.sort(cells))
    if mode in ("gnc", "ground-node-clustering"):
        nodes = np.vstack([scenario.src_xy, scenario.dst_xy])
        return _to_placement(scenario, kmeans(nodes, scenario.M, seed, config.grid_cell_m),
                             config.init_altitude_m, config.grid_cell_m)
    raise ValueError(f"unknown initialization mode {mode!r}")
