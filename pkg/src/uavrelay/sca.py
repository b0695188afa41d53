"""Successive convex approximation for the three BCD blocks.

Resource block: bandwidth/power allocation at a fixed placement. Placement
blocks: horizontal positions at fixed altitudes and altitudes at fixed
horizontal positions, both at a fixed allocation.

The placement blocks schedule a rate on every active link and require it to be
no larger than a tangent lower bound of that link's rate. Flow conservation is
then imposed on the scheduled rates only, so every convexified program is a
conservative restriction of the true one and its optimum is achievable.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import cvx
from .channel import Allocation, LinkGains, Placement, link_gains, link_rates, persp_rate
from .scenario import AlgoConfig, Scenario

log = logging.getLogger(__name__)

LN2 = math.log(2.0)
DELTA = cvx.DELTA
ZERO_TOL = 1e-6  # bandwidth below this is reported as an unused link

SRC, DST, RELAY = 0, 1, 2


# ---------------------------------------------------------------------------
# link bookkeeping


class LinkIndex:
    """Flat enumeration of all links: K*M source links, M*K destination links,
    then M*(M-1)*K relay links, each with its stream and end points."""

    def __init__(self, K: int, M: int):
        self.K, self.M = K, M
        kind, k_, tx, rx = [], [], [], []
        for k in range(K):
            for m in range(M):
                kind.append(SRC), k_.append(k), tx.append(-1), rx.append(m)
        for m in range(M):
            for k in range(K):
                kind.append(DST), k_.append(k), tx.append(m), rx.append(-1)
        for m in range(M):
            for n in range(M):
                if m == n:
                    continue
                for k in range(K):
                    kind.append(RELAY), k_.append(k), tx.append(m), rx.append(n)
        self.kind = np.array(kind)
        self.k = np.array(k_)
        self.tx = np.array(tx)
        self.rx = np.array(rx)
        self.L = len(self.kind)
        self.src = np.flatnonzero(self.kind == SRC)
        self.dst = np.flatnonzero(self.kind == DST)
        self.relay = np.flatnonzero(self.kind == RELAY)
        # node id of the flow row a link leaves from / enters, as m*K + k (-1 for ground)
        self.out_node = np.where(self.tx >= 0, self.tx * K + self.k, -1)
        self.in_node = np.where(self.rx >= 0, self.rx * K + self.k, -1)

    def pack(self, alloc: Allocation) -> tuple[np.ndarray, np.ndarray]:
        a = np.concatenate([alloc.a_s.ravel(), alloc.a_d.ravel(), self._relay_flat(alloc.a_r)])
        p = np.concatenate([alloc.p_s.ravel(), alloc.p_d.ravel(), self._relay_flat(alloc.p_r)])
        return a, p

    def unpack(self, a, p) -> Allocation:
        K, M = self.K, self.M
        out = Allocation.zeros(K, M)
        out.a_s[:] = a[self.src].reshape(K, M)
        out.p_s[:] = p[self.src].reshape(K, M)
        out.a_d[:] = a[self.dst].reshape(M, K)
        out.p_d[:] = p[self.dst].reshape(M, K)
        r = self.relay
        out.a_r[self.tx[r], self.rx[r], self.k[r]] = a[r]
        out.p_r[self.tx[r], self.rx[r], self.k[r]] = p[r]
        return out

    def _relay_flat(self, arr):
        r = self.relay
        return arr[self.tx[r], self.rx[r], self.k[r]]

    def gains(self, g: LinkGains) -> np.ndarray:
        r = self.relay
        return np.concatenate([g.src.ravel(), g.dst.ravel(), g.relay[self.tx[r], self.rx[r]]])

    def power_owner(self) -> np.ndarray:
        """Power-budget row per link: sources 0..K-1, UAVs K..K+M-1."""
        return np.where(self.kind == SRC, self.k, self.K + self.tx)

    def budgets(self, scenario: Scenario) -> np.ndarray:
        return np.concatenate([scenario.source_power, scenario.uav_power])

    def flows(self, rates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(inflow, outflow) per node m*K + k."""
        n = self.M * self.K
        has_in = self.in_node >= 0
        has_out = self.out_node >= 0
        inflow = np.bincount(self.in_node[has_in], rates[has_in], minlength=n)
        outflow = np.bincount(self.out_node[has_out], rates[has_out], minlength=n)
        return inflow, outflow

    def eta(self, rates: np.ndarray) -> float:
        return float(np.bincount(self.k[self.dst], rates[self.dst], minlength=self.K).min())


# ---------------------------------------------------------------------------
# affine bounds


@dataclass
class AffineBound:
    """Family of first-order expansions ``base + coef @ (x - point)``."""

    base: np.ndarray  # (N,)
    coef: np.ndarray  # (N, d)
    point: np.ndarray  # (N, d)
    sense: str  # "upper" or "lower"

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(self.point.shape[:1] + (-1,))
        return self.base + np.sum(self.coef * (x - self.point), axis=1)


def perspective_grad(a, p, gain):
    """Gradient of a*log2(1 + gain*p/a) in (a, p); zero where the link is unused."""
    a, p, gain = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, p, gain)))
    ga = np.zeros(a.shape)
    gp = np.zeros(a.shape)
    live = a > 0
    s = gain[live] * p[live] / a[live]
    ga[live] = (np.log1p(s) - s / (1.0 + s)) / LN2
    gp[live] = gain[live] / ((1.0 + s) * LN2)
    return ga, gp


def build_upper_bounds(scenario: Scenario, placement: Placement, expansion: Allocation) -> dict:
    """Tangent planes of the destination and relay rates in (a, p).

    The rates are concave, so the planes are global upper bounds. Expansion
    points below the positivity floor are raised to it first.
    """
    g = link_gains(scenario, placement)
    out = {}
    a_d = np.maximum(expansion.a_d, DELTA).ravel()
    p_d = np.maximum(expansion.p_d, DELTA).ravel()
    if np.any(expansion.a_d < DELTA) or np.any(expansion.p_d < DELTA):
        log.debug("upper bounds expanded at floored destination allocation")
    ga, gp = perspective_grad(a_d, p_d, g.dst.ravel())
    out["dst"] = AffineBound(persp_rate(a_d, p_d, g.dst.ravel()), np.column_stack([ga, gp]),
                             np.column_stack([a_d, p_d]), "upper")
    M, K = scenario.M, scenario.K
    mm, nn, kk = np.nonzero(~np.eye(M, dtype=bool)[:, :, None] & np.ones((1, 1, K), dtype=bool))
    a_r = np.maximum(expansion.a_r[mm, nn, kk], DELTA)
    p_r = np.maximum(expansion.p_r[mm, nn, kk], DELTA)
    gr = g.relay[mm, nn]
    ga, gp = perspective_grad(a_r, p_r, gr)
    out["relay"] = AffineBound(persp_rate(a_r, p_r, gr), np.column_stack([ga, gp]),
                               np.column_stack([a_r, p_r]), "upper")
    out["relay_index"] = (mm, nn, kk)
    return out


# rate of a ground link as a function of (X = squared 3D distance, Y = 1 + exp(-(B1 + B2 v)))


def ground_rate_xy(a, p, X, Y, scenario: Scenario):
    ch = scenario.channel
    f = ch.C1 + ch.C2 / Y
    return persp_rate(a, p, scenario.gamma0 * f / np.asarray(X, dtype=float) ** (ch.alpha / 2.0))


def ground_rate_grad_xy(a, p, X, Y, scenario: Scenario):
    """(dR/dX, dR/dY) of ``ground_rate_xy``; zero for unused links."""
    ch = scenario.channel
    a, p, X, Y = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, p, X, Y)))
    dX = np.zeros(a.shape)
    dY = np.zeros(a.shape)
    live = (a > 0) & (p > 0)
    S = scenario.gamma0 * p[live] / a[live]
    Xl, Yl = X[live], Y[live]
    xa = Xl ** (-ch.alpha / 2.0)
    G = S * (ch.C1 + ch.C2 / Yl) * xa
    pre = a[live] / (LN2 * (1.0 + G))
    dX[live] = pre * (-ch.alpha / 2.0) * G / Xl
    dY[live] = pre * S * xa * (-ch.C2 / Yl ** 2)
    return dX, dY


def relay_rate_l(a, p, ell, gamma0):
    return persp_rate(a, p, gamma0 / np.asarray(ell, dtype=float))


def relay_rate_grad_l(a, p, ell, gamma0):
    a, p, ell = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, p, ell)))
    out = np.zeros(a.shape)
    live = (a > 0) & (p > 0)
    S = gamma0 * p[live] / a[live]
    el = ell[live]
    out[live] = a[live] / (LN2 * (1.0 + S / el)) * (-S / el ** 2)
    return out


def angle_aux(z, v, split=1.0):
    """(z + c)^2 / (4 c v), the concave-side term of the angle constraint."""
    return (np.asarray(z) + split) ** 2 / (4.0 * split * np.asarray(v))


def _logistic_tail(v, scenario: Scenario):
    ch = scenario.channel
    return np.exp(-(ch.B1 + ch.B2 * np.asarray(v, dtype=float)))


def _geometry(scenario: Scenario, placement: Placement):
    q, z = placement.q, placement.z
    off_s = np.sum((q[None, :, :] - scenario.src_xy[:, None, :]) ** 2, axis=-1)  # (K, M)
    off_d = np.sum((q[:, None, :] - scenario.dst_xy[None, :, :]) ** 2, axis=-1)  # (M, K)
    X_s = z[None, :] ** 2 + off_s
    X_d = z[:, None] ** 2 + off_d
    v_s = z[None, :] / np.sqrt(X_s)
    v_d = z[:, None] / np.sqrt(X_d)
    return off_s, off_d, X_s, X_d, v_s, v_d


def _relay_pairs(M: int, K: int):
    mask = ~np.eye(M, dtype=bool)[:, :, None] & np.ones((1, 1, K), dtype=bool)
    return np.nonzero(mask)


def build_lower_bounds(scenario: Scenario, placement: Placement, alloc: Allocation,
                       block: str, v_hat: tuple | None = None, split=1.0) -> dict:
    """Tangent lower bounds for a placement block ("horizontal" or "vertical").

    Families and their linearized variables:
      dst_rate   (X, Y) with X = z^2 + |q - u|^2, Y = 1 + exp(-(B1 + B2 v))
      src_rate   (E, |q - u|^2) horizontally, (E, z^2) vertically; E = exp(-(B1 + B2 v))
      relay_rate |q_m - q_n|^2 horizontally, (z_m - z_n)^2 vertically
      relay_dist q_m - q_n horizontally, z_m - z_n vertically
      src_angle, dst_angle  v horizontally, (z, v) vertically, of (z + c)^2 / (4 c v)
    ``v_hat`` overrides the angle expansion points (defaults to the true angles);
    ``split`` is the constant c of the angle identity (scalar or per UAV).
    """
    if block not in ("horizontal", "vertical"):
        raise ValueError(f"unknown block {block!r}")
    K, M = scenario.K, scenario.M
    q, z = placement.q, placement.z
    if np.any(z <= 0):
        raise ValueError("domain violation: non-positive altitude")
    off_s, off_d, X_s, X_d, v_s, v_d = _geometry(scenario, placement)
    if v_hat is not None:
        v_s, v_d = (np.asarray(v, dtype=float) for v in v_hat)
    if np.any(v_s <= 0) or np.any(v_d <= 0):
        raise ValueError("domain violation: non-positive angle indicator")
    split = np.broadcast_to(np.asarray(split, dtype=float), (M,))
    out = {}

    # destination rate in (X, Y)
    Y_d = 1.0 + _logistic_tail(v_d, scenario)
    dX, dY = ground_rate_grad_xy(alloc.a_d, alloc.p_d, X_d, Y_d, scenario)
    out["dst_rate"] = AffineBound(ground_rate_xy(alloc.a_d, alloc.p_d, X_d, Y_d, scenario).ravel(),
                                  np.column_stack([dX.ravel(), dY.ravel()]),
                                  np.column_stack([X_d.ravel(), Y_d.ravel()]), "lower")

    # source rate in (E, offset^2) or (E, z^2); both enter X additively
    E_s = _logistic_tail(v_s, scenario)
    dX, dY = ground_rate_grad_xy(alloc.a_s, alloc.p_s, X_s, 1.0 + E_s, scenario)
    second = off_s if block == "horizontal" else np.broadcast_to(z[None, :] ** 2, off_s.shape)
    out["src_rate"] = AffineBound(ground_rate_xy(alloc.a_s, alloc.p_s, X_s, 1.0 + E_s, scenario).ravel(),
                                  np.column_stack([dY.ravel(), dX.ravel()]),
                                  np.column_stack([E_s.ravel(), second.ravel()]), "lower")

    mm, nn, kk = _relay_pairs(M, K)
    dq2 = np.sum((q[mm] - q[nn]) ** 2, axis=1)
    dz = z[mm] - z[nn]
    ell = dq2 + dz ** 2
    a_r, p_r = alloc.a_r[mm, nn, kk], alloc.p_r[mm, nn, kk]
    d_ell = relay_rate_grad_l(a_r, p_r, ell, scenario.gamma0)
    lin = dq2 if block == "horizontal" else dz ** 2
    out["relay_rate"] = AffineBound(relay_rate_l(a_r, p_r, ell, scenario.gamma0), d_ell[:, None],
                                    lin[:, None], "lower")
    if block == "horizontal":
        dqv = q[mm] - q[nn]
        out["relay_dist"] = AffineBound(ell, 2.0 * dqv, dqv, "lower")
    else:
        out["relay_dist"] = AffineBound(ell, 2.0 * dz[:, None], dz[:, None], "lower")
    out["relay_index"] = (mm, nn, kk)

    for name, v, zz, c in (("src_angle", v_s, z[None, :] + 0 * v_s, split[None, :] + 0 * v_s),
                           ("dst_angle", v_d, z[:, None] + 0 * v_d, split[:, None] + 0 * v_d)):
        v, zz, c = v.ravel(), zz.ravel(), c.ravel()
        base = angle_aux(zz, v, c)
        dv = -(zz + c) ** 2 / (4.0 * c * v ** 2)
        if block == "horizontal":
            out[name] = AffineBound(base, dv[:, None], v[:, None], "lower")
        else:
            dzc = (zz + c) / (2.0 * c * v)
            out[name] = AffineBound(base, np.column_stack([dzc, dv]), np.column_stack([zz, v]), "lower")
    return out


def build_lower_bounds_horizontal(scenario, placement, alloc, v_hat=None, split=1.0) -> dict:
    return build_lower_bounds(scenario, placement, alloc, "horizontal", v_hat, split)


def build_lower_bounds_vertical(scenario, placement, alloc, v_hat=None, split=1.0) -> dict:
    return build_lower_bounds(scenario, placement, alloc, "vertical", v_hat, split)


# ---------------------------------------------------------------------------
# feasible starts and flow balancing


def equal_split(scenario: Scenario) -> Allocation:
    """Uniform bandwidth over every link, each node's power spread over its links."""
    K, M = scenario.K, scenario.M
    idx = LinkIndex(K, M)
    n_links = idx.L
    owner = idx.power_owner()
    counts = np.bincount(owner, minlength=K + M)
    budgets = idx.budgets(scenario)
    a = np.full(n_links, 1.0 / n_links)
    p = budgets[owner] / counts[owner]
    return idx.unpack(a, p)


def balance_flows(idx: LinkIndex, a, p, gains, max_iter: int = 10_000, rtol: float = 1e-13):
    """Scale link allocations down until inflow equals outflow at every relay node.

    Deficits (outflow > inflow) shrink the node's outgoing links; surpluses
    shrink its source link first and then its incoming relay links. Rates are
    homogeneous in (a, p), so scaling both by lambda scales the rate by lambda.
    """
    a = np.array(a, dtype=float)
    p = np.array(p, dtype=float)
    n = idx.M * idx.K
    has_in = idx.in_node >= 0
    has_out = idx.out_node >= 0
    src_of = np.full(n, -1)
    src_of[idx.in_node[idx.src]] = idx.src
    for _ in range(max_iter):
        r = persp_rate(a, p, gains)
        inflow, outflow = idx.flows(r)
        scale = max(1e-300, float(np.max(np.maximum(inflow, outflow), initial=0.0)))
        tol = rtol * scale
        deficit = outflow - inflow > tol
        if np.any(deficit):
            fac = np.ones(n)
            fac[deficit] = inflow[deficit] / outflow[deficit]
            lam = np.ones(idx.L)
            lam[has_out] = fac[idx.out_node[has_out]]
            a *= lam
            p *= lam
            continue
        surplus = inflow - outflow
        hot = surplus > tol
        if not np.any(hot):
            break
        lam = np.ones(idx.L)
        s_rate = r[src_of]
        cut_src = np.minimum(s_rate, np.maximum(surplus, 0.0))
        nodes = np.flatnonzero(hot)
        src_links = src_of[nodes]
        with np.errstate(invalid="ignore", divide="ignore"):
            lam[src_links] = np.where(s_rate[nodes] > 0, 1.0 - cut_src[nodes] / s_rate[nodes], 1.0)
        rest = np.where(hot, surplus - cut_src, 0.0)
        relay_in = np.bincount(idx.in_node[idx.relay], r[idx.relay], minlength=n)
        rl = idx.relay
        node = idx.in_node[rl]
        with np.errstate(invalid="ignore", divide="ignore"):
            frac = np.where(relay_in[node] > 0, rest[node] / relay_in[node], 0.0)
        lam[rl] = np.where(hot[node], np.clip(1.0 - frac, 0.0, 1.0), 1.0)
        a *= lam
        p *= lam
    else:
        log.warning("flow balancing did not converge")
    a[a < 0] = 0.0
    p[p < 0] = 0.0
    return a, p


def finalize_allocation(idx: LinkIndex, a, p, gains):
    """Zero unused links, restore exact flow conservation and report eta.

    Zeroing links with bandwidth below ZERO_TOL is kept only if it does not
    lower eta beyond round-off.
    """
    usable = np.isfinite(gains)
    a = np.where(usable, a, 0.0)
    p = np.where(usable, p, 0.0)
    g = np.where(usable, gains, 0.0)
    a1, p1 = balance_flows(idx, a, p, g)
    eta1 = idx.eta(persp_rate(a1, p1, g))
    small = a < ZERO_TOL
    if np.any(small & (a > 0)):
        a0 = np.where(small, 0.0, a)
        p0 = np.where(small, 0.0, p)
        a0, p0 = balance_flows(idx, a0, p0, g)
        eta0 = idx.eta(persp_rate(a0, p0, g))
        if eta0 >= eta1 - 1e-9 * max(1.0, eta1):
            return a0, p0, eta0
    return a1, p1, eta1


# ---------------------------------------------------------------------------
# resource allocation


@dataclass
class SolveStats:
    solves: int = 0
    newton_steps: int = 0
    sca_iters: int = 0
    failures: int = 0

    def add(self, sol: cvx.Solution) -> None:
        self.solves += 1
        self.newton_steps += sol.newton_steps
        if sol.status == "infeasible":
            self.failures += 1


STATS = SolveStats()


def _resource_rows(prog, idx: LinkIndex, K: int, M: int):
    eta_rows = prog.new_rows(K)
    flow_rows = prog.new_rows(M * K)
    bw_row = prog.new_rows(1, 1.0)
    return eta_rows, flow_rows, bw_row


def _eta_upper(idx: LinkIndex, gains, budgets, owner) -> float:
    cap = persp_rate(np.ones(idx.L), budgets[owner], np.where(np.isfinite(gains), gains, 0.0))
    return float(np.bincount(idx.k[idx.dst], cap[idx.dst], minlength=idx.K).min()) + 1.0


def _sca_program(idx: LinkIndex, gains, budgets, a_hat, p_hat, live):
    """Tangent-plane convexification: outgoing rates replaced by their upper bounds."""
    K, M, L = idx.K, idx.M, idx.L
    owner = idx.power_owner()
    n = 2 * L + 1
    lb = np.concatenate([np.full(L, DELTA), np.full(L, DELTA), [0.0]])
    ub = np.concatenate([np.ones(L), budgets[owner], [_eta_upper(idx, gains, budgets, owner)]])
    # unusable links are pinned to the floor
    ub[:L][~live] = 2 * DELTA
    ub[L:2 * L][~live] = 2 * DELTA
    prog = cvx.ConvexProgram(n, lb, ub)
    ia, ip, ie = np.arange(L), L + np.arange(L), 2 * L
    eta_rows, flow_rows, bw_row = _resource_rows(prog, idx, K, M)
    g = np.where(live, gains, 0.0)

    prog.add_linear(eta_rows, ie, 1.0)
    d = idx.dst
    prog.add_atom(cvx.NegPerspectiveLog(np.column_stack([ia[d], ip[d]]), g[d]), eta_rows[idx.k[d]])

    ga, gp = perspective_grad(a_hat, p_hat, g)
    out = np.flatnonzero(idx.out_node >= 0)
    rows_out = flow_rows[idx.out_node[out]]
    prog.add_linear(rows_out, ia[out], ga[out])
    prog.add_linear(rows_out, ip[out], gp[out])
    inn = np.flatnonzero(idx.in_node >= 0)
    prog.add_atom(cvx.NegPerspectiveLog(np.column_stack([ia[inn], ip[inn]]), g[inn]),
                  flow_rows[idx.in_node[inn]])

    prog.add_linear(np.full(L, bw_row[0]), ia, 1.0)
    pw_rows = prog.new_rows(K + M, budgets)
    prog.add_linear(pw_rows[owner], ip, 1.0)
    prog.maximize([ie])
    return prog


def _exact_program(idx: LinkIndex, gains, budgets, live):
    """Scheduled-rate form: variables (a, f) per link with power a*(2^(f/a)-1)/g."""
    K, M, L = idx.K, idx.M, idx.L
    owner = idx.power_owner()
    g = np.where(live, gains, 1.0)
    cap = persp_rate(np.ones(L), budgets[owner], g)
    n = 2 * L + 1
    lb = np.concatenate([np.full(L, DELTA), np.zeros(L), [0.0]])
    ub = np.concatenate([np.ones(L), np.where(live, 1.01 * cap + 1e-6, 2 * DELTA),
                         [_eta_upper(idx, gains, budgets, owner)]])
    ub[:L][~live] = 2 * DELTA
    prog = cvx.ConvexProgram(n, lb, ub)
    ia, i_f, ie = np.arange(L), L + np.arange(L), 2 * L
    eta_rows, flow_rows, bw_row = _resource_rows(prog, idx, K, M)
    prog.add_linear(eta_rows, ie, 1.0)
    prog.add_linear(eta_rows[idx.k[idx.dst]], i_f[idx.dst], -1.0)
    out = np.flatnonzero(idx.out_node >= 0)
    prog.add_linear(flow_rows[idx.out_node[out]], i_f[out], 1.0)
    inn = np.flatnonzero(idx.in_node >= 0)
    prog.add_linear(flow_rows[idx.in_node[inn]], i_f[inn], -1.0)
    prog.add_linear(np.full(L, bw_row[0]), ia, 1.0)
    pw_rows = prog.new_rows(K + M, budgets)
    prog.add_atom(cvx.PerspectiveExp2(np.column_stack([ia, i_f])), pw_rows[owner], 1.0 / g)
    prog.maximize([ie])
    return prog, g


def _exact_start(idx: LinkIndex, gains, budgets, live):
    """Strictly feasible point of the scheduled-rate program."""
    owner = idx.power_owner()
    counts = np.bincount(owner, minlength=idx.K + idx.M)
    a = np.full(idx.L, 0.999 / idx.L)
    p = 0.999 * budgets[owner] / counts[owner]
    r = persp_rate(a, p, np.where(live, gains, 0.0))
    c = 0.45 * float(np.min(r[live]))
    f = np.where(idx.kind == SRC, 2.0 * c, c)
    f = np.where(live, f, DELTA)
    # sources carry 2c, everything else c: every node has inflow > outflow
    eta = 0.5 * c
    return np.concatenate([a, f, [eta]])


def solve_resource_allocation(scenario: Scenario, placement: Placement, start: Allocation | None = None,
                              config: AlgoConfig | None = None, method: str | None = None,
                              gains: LinkGains | None = None) -> tuple[Allocation, float]:
    """Bandwidth/power allocation at a fixed placement.

    ``method="sca"`` iterates tangent upper bounds of the outgoing rates from
    ``start`` (equal split by default) until the relative change of eta drops
    below ``config.eps``. ``method="exact"`` solves the equivalent convex
    scheduled-rate program once. The returned allocation conserves flow exactly
    and never has a smaller eta than ``start``.
    """
    config = config or AlgoConfig()
    method = method or config.resource_method
    K, M = scenario.K, scenario.M
    idx = LinkIndex(K, M)
    lg = gains if gains is not None else link_gains(scenario, placement)
    g = idx.gains(lg)
    live = np.isfinite(g) & (g > 0)
    g_eval = np.where(live, g, 0.0)
    budgets = idx.budgets(scenario)
    start = start if start is not None else equal_split(scenario)
    a0, p0 = idx.pack(start)
    a0, p0, eta0 = finalize_allocation(idx, a0, p0, np.where(live, g, np.inf))

    if method == "exact":
        prog, gg = _exact_program(idx, g, budgets, live)
        sol = cvx.solve(prog, _exact_start(idx, g, budgets, live))
        STATS.add(sol)
        if sol.status == "infeasible":
            log.warning("resource program infeasible; keeping start allocation")
            return idx.unpack(a0, p0), eta0
        L = idx.L
        a, f = sol.x[:L], sol.x[L:2 * L]
        with np.errstate(over="ignore"):
            p = a * np.expm1(LN2 * f / a) / gg
        # round-off in the power rows is removed by a uniform rescale
        owner = idx.power_owner()
        used = np.bincount(owner, p, minlength=K + M)
        over = np.maximum(used / budgets, 1.0)
        p = p / over[owner]
        a = a / max(1.0, a.sum())
    elif method == "sca":
        a_hat, p_hat = np.maximum(a0, DELTA), np.maximum(p0, DELTA)
        x = np.concatenate([a_hat, p_hat, [0.5 * eta0]])
        eta_prev = eta0
        a, p = a0, p0
        for it in range(config.max_sca_iters):
            prog = _sca_program(idx, g_eval, budgets, a_hat, p_hat, live)
            sol = cvx.solve(prog, x)
            STATS.add(sol)
            STATS.sca_iters += 1
            if sol.status == "infeasible":
                log.warning("resource SCA step infeasible at iteration %d", it)
                break
            L = idx.L
            x = sol.x
            a_hat, p_hat = x[:L], x[L:2 * L]
            a, p = a_hat.copy(), p_hat.copy()
            eta_it = idx.eta(persp_rate(a, p, g_eval))
            if abs(eta_it - eta_prev) <= config.eps * max(eta_it, 1e-12):
                break
            eta_prev = eta_it
    else:
        raise ValueError(f"unknown resource method {method!r}")

    a, p, eta = finalize_allocation(idx, a, p, np.where(live, g, np.inf))
    if eta < eta0:
        return idx.unpack(a0, p0), eta0
    return idx.unpack(a, p), eta


# ---------------------------------------------------------------------------
# placement blocks


def _ground_links(idx: LinkIndex):
    """(link ids, uav, ground xy row, is_src) for every ground link in flat order."""
    ids = np.concatenate([idx.src, idx.dst])
    uav = np.where(idx.kind[ids] == SRC, idx.rx[ids], idx.tx[ids])
    return ids, uav, idx.k[ids], idx.kind[ids] == SRC


def _placement_program(scenario: Scenario, placement: Placement, idx: LinkIndex, a, p, block: str,
                       schedule=None):
    """Convex restriction of the placement block around ``placement``.

    Every active link gets a scheduled rate f bounded by the tangent lower
    bound of its true rate; angle indicators of active ground links are extra
    variables tied to the geometry by the split angle identity with c = z_hat.
    Returns the program, a layout dict and the incumbent point (feasible, not
    necessarily strict). ``schedule`` caps the incumbent's link rates; it
    defaults to the true rates, which suits a flow-balanced allocation.
    """
    K, M = scenario.K, scenario.M
    active = (a > 0) & (p > 0)
    z_hat = placement.z
    split = z_hat.copy()
    alloc = idx.unpack(a, p)
    bounds = build_lower_bounds(scenario, placement, alloc, block, split=split)
    off_s, off_d, X_s, X_d, v_s, v_d = _geometry(scenario, placement)

    gids, guav, gnode, gsrc = _ground_links(idx)
    gmask = active[gids]
    gids, guav, gnode, gsrc = gids[gmask], guav[gmask], gnode[gmask], gsrc[gmask]
    ground_xy = np.where(gsrc[:, None], scenario.src_xy[gnode], scenario.dst_xy[gnode])
    flinks = np.flatnonzero(active)
    n_place = 2 * M if block == "horizontal" else M
    n_v, n_f = len(gids), len(flinks)
    iv = n_place + np.arange(n_v)
    i_f = np.full(idx.L, -1)
    i_f[flinks] = n_place + n_v + np.arange(n_f)
    ie = n_place + n_v + n_f
    n = ie + 1

    lb = np.concatenate([np.zeros(n_place), np.full(n_v, DELTA), np.zeros(n_f), [0.0]])
    ub = np.concatenate([np.zeros(n_place), np.ones(n_v), np.full(n_f, np.inf), [np.inf]])
    x0, x1, y0, y1 = scenario.region
    if block == "horizontal":
        lb[:2 * M] = np.tile([x0, y0], M)
        ub[:2 * M] = np.tile([x1, y1], M)
    else:
        lb[:M], ub[:M] = scenario.h_min, scenario.h_max
    prog = cvx.ConvexProgram(n, lb, ub)
    ch = scenario.channel

    def place_vars(m):
        return np.column_stack([2 * m, 2 * m + 1]) if block == "horizontal" else np.asarray(m)[:, None]

    # per-link tangent values at the expansion point, flat link order
    base = np.zeros(idx.L)
    d_pos = np.zeros(idx.L)  # |dR/d(position term)|
    d_e = np.zeros(idx.L)  # |dR/dE|, ground links only
    pos_hat = np.zeros(idx.L)
    e_hat = np.zeros(idx.L)
    b = bounds["src_rate"]
    base[idx.src], d_e[idx.src], d_pos[idx.src] = b.base, -b.coef[:, 0], -b.coef[:, 1]
    e_hat[idx.src], pos_hat[idx.src] = b.point[:, 0], b.point[:, 1]
    b = bounds["dst_rate"]
    base[idx.dst], d_pos[idx.dst], d_e[idx.dst] = b.base, -b.coef[:, 0], -b.coef[:, 1]
    e_hat[idx.dst] = b.point[:, 1] - 1.0
    pos_hat[idx.dst] = (off_d if block == "horizontal" else np.broadcast_to(z_hat[:, None] ** 2, off_d.shape)).ravel()
    b = bounds["relay_rate"]
    base[idx.relay], d_pos[idx.relay], pos_hat[idx.relay] = b.base, -b.coef[:, 0], b.point[:, 0]

    # rate rows: f + |dpos| * pos(x) + |dE| * E(v) <= base + |dpos| * pos_hat + |dE| * E_hat
    rate_rows = np.full(idx.L, -1)
    rate_rows[flinks] = prog.new_rows(n_f, (base + d_pos * pos_hat + d_e * e_hat)[flinks])
    prog.add_linear(rate_rows[flinks], i_f[flinks], 1.0)
    grow = rate_rows[gids]
    if block == "horizontal":
        prog.add_atom(cvx.SquaredNorm(place_vars(guav), np.eye(2), -ground_xy), grow, d_pos[gids])
    else:
        prog.add_atom(cvx.SquaredNorm(place_vars(guav), np.ones((1, 1)), np.zeros((len(gids), 1))),
                      grow, d_pos[gids])
    prog.add_atom(cvx.ExpAffine(iv, -ch.B2, -ch.B1), grow, d_e[gids])
    rl = flinks[idx.kind[flinks] == RELAY]
    if len(rl):
        m_, n_ = idx.tx[rl], idx.rx[rl]
        if block == "horizontal":
            var = np.column_stack([place_vars(m_), place_vars(n_)])
            W = np.hstack([np.eye(2), -np.eye(2)])
        else:
            var = np.column_stack([m_, n_])
            W = np.array([[1.0, -1.0]])
        prog.add_atom(cvx.SquaredNorm(var, W, np.zeros((len(rl), W.shape[0]))), rate_rows[rl], d_pos[rl])

    # angle rows: d(x) + (z - c)^2 / (4 c v) <= tangent of (z + c)^2 / (4 c v)
    fam_s, fam_d = bounds["src_angle"], bounds["dst_angle"]
    ang_base = np.concatenate([fam_s.base, fam_d.base])
    ang_coef = np.concatenate([fam_s.coef, fam_d.coef])
    ang_pt = np.concatenate([fam_s.point, fam_d.point])
    # families are ordered like idx.src then idx.dst, i.e. like _ground_links before masking
    sel = np.flatnonzero(gmask)
    ang_base, ang_coef, ang_pt = ang_base[sel], ang_coef[sel], ang_pt[sel]
    rhs = ang_base - np.sum(ang_coef * ang_pt, axis=1)
    ang_rows = prog.new_rows(n_v, rhs)
    if block == "horizontal":
        prog.add_atom(cvx.NormSqrt(place_vars(guav), np.eye(2), -ground_xy, z_hat[guav] ** 2), ang_rows)
        prog.add_linear(ang_rows, iv, -ang_coef[:, 0])
    else:
        off = np.sum((placement.q[guav] - ground_xy) ** 2, axis=1)
        prog.add_atom(cvx.NormSqrt(place_vars(guav), np.ones((1, 1)), np.zeros((len(gids), 1)), off), ang_rows)
        c = split[guav]
        prog.add_atom(cvx.QuadOverLin(np.column_stack([guav, iv]), (0.5 / np.sqrt(c))[:, None], -np.sqrt(c) / 2.0),
                      ang_rows)
        prog.add_linear(ang_rows, guav, -ang_coef[:, 0])
        prog.add_linear(ang_rows, iv, -ang_coef[:, 1])

    # flow conservation on scheduled rates and the max-min objective
    out = flinks[idx.out_node[flinks] >= 0]
    inn = flinks[idx.in_node[flinks] >= 0]
    nodes = np.union1d(idx.out_node[out], idx.in_node[inn])
    node_row = np.full(M * idx.K, -1)
    node_row[nodes] = prog.new_rows(len(nodes))
    prog.add_linear(node_row[idx.out_node[out]], i_f[out], 1.0)
    prog.add_linear(node_row[idx.in_node[inn]], i_f[inn], -1.0)
    eta_rows = prog.new_rows(idx.K)
    prog.add_linear(eta_rows, ie, 1.0)
    dl = flinks[idx.kind[flinks] == DST]
    prog.add_linear(eta_rows[idx.k[dl]], i_f[dl], -1.0)
    prog.maximize([ie])

    v_true = np.concatenate([v_s.ravel(), v_d.ravel()])[sel]
    rates = persp_rate(a, p, idx.gains(link_gains(scenario, placement)))
    if schedule is not None:
        rates = np.minimum(rates, schedule)
    pos0 = placement.q.ravel() if block == "horizontal" else placement.z.copy()
    x_inc = np.concatenate([pos0, v_true, rates[flinks], [idx.eta(rates)]])
    layout = dict(flinks=flinks, i_f=i_f, ie=ie, n_place=n_place)
    return prog, layout, x_inc


def _strict_start(x_inc, layout, prog):
    """Pull the incumbent slightly inside: shrink rates and eta, lower angles."""
    x = x_inc.copy()
    npl, ie = layout["n_place"], layout["ie"]
    nf = len(layout["flinks"])
    nv = ie - npl - nf
    x[npl:npl + nv] *= 1.0 - 1e-6
    x[npl + nv:ie] *= 0.999
    x[ie] *= 0.99
    return cvx._box_margin(prog.lb, prog.ub, x)


def _placement_from_x(placement: Placement, x, block: str) -> Placement:
    M = placement.M
    if block == "horizontal":
        return Placement(x[:2 * M].reshape(M, 2).copy(), placement.z.copy())
    return Placement(placement.q.copy(), x[:M].copy())


def trim_to_schedule(idx: LinkIndex, a, p, gains, schedule):
    """Scale each link down so that it carries exactly ``schedule`` (where below capacity)."""
    r = persp_rate(a, p, gains)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(r > 0, np.clip(schedule / r, 0.0, 1.0), 0.0)
    return a * lam, p * lam


def solve_placement_block(scenario: Scenario, placement: Placement, alloc: Allocation, block: str,
                          config: AlgoConfig | None = None) -> tuple[Placement, Allocation, float]:
    """SCA over one placement block at a fixed allocation.

    Each iteration re-expands all bounds at the current point (angles at their
    true values). The allocation is only trimmed at the end, to the scheduled
    rates of the last iterate, so the returned state conserves flow. Returns the
    incoming state unchanged when no improvement is found.
    """
    config = config or AlgoConfig()
    idx = LinkIndex(scenario.K, scenario.M)
    a, p = idx.pack(alloc)
    g0 = idx.gains(link_gains(scenario, placement))
    eta0 = idx.eta(persp_rate(a, p, np.where(np.isfinite(g0), g0, 0.0)))
    if eta0 <= 0:
        return placement.copy(), alloc.copy(), eta0
    best = (placement.copy(), None, eta0)
    cur = placement.copy()
    eta_prev = eta0
    sched = None
    for it in range(config.max_sca_iters):
        try:
            prog, layout, x_inc = _placement_program(scenario, cur, idx, a, p, block, sched)
        except ValueError as exc:
            log.warning("%s block: %s", block, exc)
            break
        sol = cvx.solve(prog, _strict_start(x_inc, layout, prog))
        STATS.add(sol)
        STATS.sca_iters += 1
        if sol.status == "infeasible":
            log.warning("%s placement step infeasible at iteration %d", block, it)
            break
        nxt = _placement_from_x(cur, sol.x, block)
        g = idx.gains(link_gains(scenario, nxt))
        if not np.all(np.isfinite(g[(a > 0) & (p > 0)])):
            break
        sched = np.zeros(idx.L)
        sched[layout["flinks"]] = np.maximum(sol.x[layout["i_f"][layout["flinks"]]], 0.0)
        a1, p1 = trim_to_schedule(idx, a, p, g, sched)
        a1, p1 = balance_flows(idx, a1, p1, g)
        eta1 = idx.eta(persp_rate(a1, p1, g))
        if eta1 > best[2]:
            best = (nxt, idx.unpack(a1, p1), eta1)
        cur = nxt
        if abs(eta1 - eta_prev) <= config.eps * max(eta1, 1e-12):
            break
        eta_prev = eta1
    if best[1] is None:
        return placement.copy(), alloc.copy(), eta0
    return best


def solve_horizontal(scenario, placement, alloc, config=None):
    return solve_placement_block(scenario, placement, alloc, "horizontal", config)


def solve_vertical(scenario, placement, alloc, config=None):
    return solve_placement_block(scenario, placement, alloc, "vertical", config)


# ---------------------------------------------------------------------------
# BCD phase


@dataclass
class BcdState:
    placement: Placement
    alloc: Allocation
    eta: float
    iterations: int = 0


@dataclass
class BcdStep:
    iteration: int
    substep: str  # "resource", "horizontal" or "vertical"
    eta: float


def evaluate_state(scenario: Scenario, placement: Placement, alloc: Allocation) -> float:
    """eta of an allocation at a placement, from the channel model alone."""
    return link_rates(scenario, placement, alloc).eta()


def bcd_phase(scenario: Scenario, start: BcdState, config: AlgoConfig | None = None,
              on_step=None) -> tuple[BcdState, list[BcdStep]]:
    """Alternate resource, horizontal and vertical blocks until eta settles.

    Stops when one full round changes eta by at most ``config.eps`` relative,
    or after ``config.max_bcd_iters`` rounds. Every block returns a state at
    least as good as its input, so the recorded eta sequence never decreases.
    ``on_step`` is called with each recorded ``BcdStep``.
    """
    config = config or AlgoConfig()
    state = BcdState(start.placement.copy(), start.alloc.copy(), float(start.eta), 0)
    trace: list[BcdStep] = []

    def record(it, name, eta):
        step = BcdStep(it, name, eta)
        trace.append(step)
        if on_step is not None:
            on_step(step)

    for it in range(1, config.max_bcd_iters + 1):
        eta_round = state.eta
        alloc, eta = solve_resource_allocation(scenario, state.placement, state.alloc, config)
        if eta >= state.eta:
            state.alloc, state.eta = alloc, eta
        record(it, "resource", state.eta)
        for block in ("horizontal", "vertical"):
            pl, alloc, eta = solve_placement_block(scenario, state.placement, state.alloc, block, config)
            if eta >= state.eta:
                state.placement, state.alloc, state.eta = pl, alloc, eta
            record(it, block, state.eta)
        state.iterations = it
        if state.eta - eta_round <= config.eps * max(state.eta, 1e-12):
            break
    return state, trace
