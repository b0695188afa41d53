"""Physical layer: geometry, Rician outage model, logistic surrogate and link rates.

All rates are normalized by the system bandwidth (bps/Hz). A link with zero
bandwidth or zero power carries rate 0 (the limit of a*log2(1 + c/a) as a->0).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scenario import ChannelParams, Scenario

LN2 = math.log(2.0)


# ---------------------------------------------------------------------------
# state containers


@dataclass
class Placement:
    """Horizontal positions ``q`` (M x 2, meters) and altitudes ``z`` (M,)."""

    q: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        self.q = np.array(self.q, dtype=float).reshape(-1, 2)
        self.z = np.array(self.z, dtype=float).reshape(-1)
        if len(self.q) != len(self.z):
            raise ValueError("q and z must describe the same number of UAVs")

    @property
    def M(self) -> int:
        return len(self.z)

    @property
    def xyz(self) -> np.ndarray:
        return np.column_stack([self.q, self.z])

    @classmethod
    def from_xyz(cls, xyz) -> "Placement":
        xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
        return cls(xyz[:, :2], xyz[:, 2])

    def copy(self) -> "Placement":
        return Placement(self.q.copy(), self.z.copy())


@dataclass
class Allocation:
    """Bandwidth fractions and powers for every link class.

    ``a_s[k, m]``/``p_s[k, m]``: source k -> UAV m; ``a_d[m, k]``/``p_d[m, k]``:
    UAV m -> destination k; ``a_r[m, n, k]``/``p_r[m, n, k]``: UAV m -> UAV n for
    stream k (diagonal m == n unused, kept at zero).
    """

    a_s: np.ndarray
    a_d: np.ndarray
    a_r: np.ndarray
    p_s: np.ndarray
    p_d: np.ndarray
    p_r: np.ndarray

    FIELDS = ("a_s", "a_d", "a_r", "p_s", "p_d", "p_r")

    def __post_init__(self):
        for name in self.FIELDS:
            setattr(self, name, np.array(getattr(self, name), dtype=float))

    @property
    def K(self) -> int:
        return self.a_s.shape[0]

    @property
    def M(self) -> int:
        return self.a_s.shape[1]

    @classmethod
    def zeros(cls, K: int, M: int) -> "Allocation":
        return cls(np.zeros((K, M)), np.zeros((M, K)), np.zeros((M, M, K)),
                   np.zeros((K, M)), np.zeros((M, K)), np.zeros((M, M, K)))

    def copy(self) -> "Allocation":
        return Allocation(*(getattr(self, f).copy() for f in self.FIELDS))

    def total_bandwidth(self) -> float:
        return float(self.a_s.sum() + self.a_d.sum() + self.a_r.sum())

    def source_power_used(self) -> np.ndarray:
        return self.p_s.sum(axis=1)

    def uav_power_used(self) -> np.ndarray:
        return self.p_d.sum(axis=1) + self.p_r.sum(axis=(1, 2))

    def to_dict(self) -> dict:
        return {f: getattr(self, f).tolist() for f in self.FIELDS}

    @classmethod
    def from_dict(cls, doc: dict) -> "Allocation":
        return cls(*(np.array(doc[f], dtype=float) for f in cls.FIELDS))


@dataclass
class LinkRates:
    src: np.ndarray  # (K, M)
    dst: np.ndarray  # (M, K)
    relay: np.ndarray  # (M, M, K)

    def eta(self) -> float:
        """Max-min end-to-end rate: min over pairs of the total delivered rate."""
        return float(self.dst.sum(axis=0).min())

    def flow_residual(self) -> np.ndarray:
        """Inflow minus outflow per (UAV m, stream k)."""
        inflow = self.src.T + self.relay.sum(axis=0)
        outflow = self.dst + self.relay.sum(axis=1)
        return inflow - outflow


@dataclass
class LinkGains:
    """Effective SNR gains so that rate = a*log2(1 + gain*p/a)."""

    src: np.ndarray  # (K, M)
    dst: np.ndarray  # (M, K)
    relay: np.ndarray  # (M, M), inf on the diagonal
    v_src: np.ndarray = field(default=None)  # angle indicators (K, M)
    v_dst: np.ndarray = field(default=None)  # (M, K)


# ---------------------------------------------------------------------------
# geometry and fading


def angle_indicator(z, horizontal_offset):
    """sin of the elevation angle, z / sqrt(z^2 + |offset|^2)."""
    z = np.asarray(z, dtype=float)
    off = np.asarray(horizontal_offset, dtype=float)
    if off.ndim and off.shape[-1] == 2:
        off2 = np.sum(off * off, axis=-1)
    else:
        off2 = off * off
    d = np.sqrt(z * z + off2)
    if np.any(d <= 0):
        raise ValueError("zero link distance")
    out = z / d
    return float(out) if np.ndim(out) == 0 else out


def rician_factor(theta, A1: float = 5.0, A2: float = 2.0):
    """Elevation-dependent Rician K-factor A1*exp(A2*theta)."""
    out = A1 * np.exp(A2 * np.asarray(theta, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def marcum_q1(a: float, b: float) -> float:
    """First-order Marcum Q function Q1(a, b).

    Evaluated as a Poisson mixture: Q1(a, b) = sum_j Pois(j; a^2/2) * P(Pois(b^2/2) <= j),
    truncated where the neglected Poisson mass is below 1e-16.
    """
    a, b = float(a), float(b)
    if a < 0 or b < 0 or not (math.isfinite(a) and math.isfinite(b)):
        raise ValueError("marcum_q1 needs finite non-negative arguments")
    if b == 0.0:
        return 1.0
    lam, x = 0.5 * a * a, 0.5 * b * b
    q_lower, f_upper = _marcum_sums(lam, x)
    # pick whichever tail is small to keep absolute error at rounding level
    return q_lower if q_lower < 0.5 else 1.0 - f_upper


def _poisson_window(mean: float, width: float = 14.0) -> tuple[int, int]:
    spread = width * math.sqrt(mean) + 40.0
    return max(0, int(mean - spread)), int(mean + spread) + 1


def _poisson_pmf(mean: float, ks: np.ndarray) -> np.ndarray:
    if mean == 0.0:
        return (ks == 0).astype(float)
    from math import lgamma
    lg = np.array([lgamma(k + 1.0) for k in ks])
    return np.exp(-mean + ks * math.log(mean) - lg)


def _marcum_sums(lam: float, x: float) -> tuple[float, float]:
    j_lo, j_hi = _poisson_window(lam)
    i_lo, i_hi = _poisson_window(x)
    top = max(j_hi, i_hi)
    js = np.arange(j_lo, j_hi + 1)
    w = _poisson_pmf(lam, js)
    ks = np.arange(i_lo, top + 1)
    pk = _poisson_pmf(x, ks)
    cdf_full = np.cumsum(pk)  # P(Pois(x) <= k) for k in ks (mass below i_lo negligible)
    sf_full = np.cumsum(pk[::-1])[::-1] - pk  # P(Pois(x) > k)
    pos = js - i_lo
    cdf = np.where(pos < 0, 0.0, cdf_full[np.clip(pos, 0, len(ks) - 1)])
    sf = np.where(pos < 0, 1.0, sf_full[np.clip(pos, 0, len(ks) - 1)])
    return float(np.dot(w, cdf)), float(np.dot(w, sf))


def outage_cdf(u: float, kappa: float) -> float:
    """CDF of |g|^2 for unit-mean Rician fading with factor kappa."""
    if u <= 0:
        return 0.0
    a = math.sqrt(2.0 * kappa)
    b = math.sqrt(2.0 * (kappa + 1.0) * u)
    lam, x = 0.5 * a * a, 0.5 * b * b
    q_lower, f_upper = _marcum_sums(lam, x)
    return f_upper if f_upper < 0.5 else 1.0 - q_lower


def phi_exact(kappa: float, eps0: float, tol: float = 1e-12) -> float:
    """Solve outage_cdf(phi, kappa) = eps0 by bracketing bisection."""
    if not 0.0 < eps0 < 1.0:
        raise ValueError("eps0 must lie in (0, 1)")
    lo, hi = 0.0, 1.0
    while outage_cdf(hi, kappa) < eps0:
        lo, hi = hi, 2.0 * hi
        if hi > 1e6:
            raise RuntimeError(f"could not bracket the outage quantile for kappa={kappa}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if outage_cdf(mid, kappa) < eps0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * hi:
            break
    return 0.5 * (lo + hi)


def phi_logistic(v, params: ChannelParams):
    """Logistic surrogate C1 + C2 / (1 + exp(-(B1 + B2 v))) of the outage quantile."""
    v = np.asarray(v, dtype=float)
    out = params.C1 + params.C2 / (1.0 + np.exp(-(params.B1 + params.B2 * v)))
    return float(out) if out.ndim == 0 else out


def simulate_outage(rate: float, kappa: float, gain: float, a: float, p: float,
                    samples: int, rng: np.random.Generator) -> float:
    """Empirical P(a*log2(1 + gain*p*|g|^2/a) < rate) under Rician fading.

    ``gain`` is the mean SNR gain beta/(N0 B Gamma) of the link.
    """
    if samples < 1:
        raise ValueError("samples must be positive")
    los = math.sqrt(kappa / (kappa + 1.0))
    scat = math.sqrt(1.0 / (kappa + 1.0))
    g_tilde = (rng.standard_normal(samples) + 1j * rng.standard_normal(samples)) / math.sqrt(2.0)
    g = los + scat * g_tilde
    cap = persp_rate(a, p * np.abs(g) ** 2, gain)
    return float(np.mean(cap < rate))


# ---------------------------------------------------------------------------
# rates


def persp_rate(a, p, gain):
    """a * log2(1 + gain * p / a), elementwise, 0 where a == 0 or p == 0."""
    a = np.asarray(a, dtype=float)
    p = np.asarray(p, dtype=float)
    gain = np.asarray(gain, dtype=float)
    a_b, p_b, g_b = np.broadcast_arrays(a, p, gain)
    out = np.zeros(a_b.shape)
    live = (a_b > 0) & (p_b > 0)
    if np.any(live):
        out[live] = a_b[live] * np.log1p(g_b[live] * p_b[live] / a_b[live]) / LN2
    return float(out) if out.ndim == 0 else out


def ground_gain(z, offset2, params: ChannelParams, gamma0: float):
    """gamma0 * f(v) / d^alpha for a UAV at altitude z and squared horizontal offset."""
    d2 = np.asarray(z, dtype=float) ** 2 + np.asarray(offset2, dtype=float)
    v = np.asarray(z, dtype=float) / np.sqrt(d2)
    return gamma0 * phi_logistic(v, params) / d2 ** (params.alpha / 2.0)


def rate_ground_uav(a: float, p: float, z: float, horizontal_offset, params: ChannelParams,
                    gamma0: float) -> float:
    """Outage-aware ground<->UAV rate with the logistic quantile surrogate."""
    off = np.asarray(horizontal_offset, dtype=float)
    off2 = float(off @ off) if off.ndim else float(off) ** 2
    if z * z + off2 <= 0:
        raise ValueError("zero link distance")
    return persp_rate(a, p, ground_gain(z, off2, params, gamma0))


def rate_uav_uav(a: float, p: float, q_m, z_m: float, q_n, z_n: float, gamma0: float) -> float:
    """LoS UAV->UAV rate with free-space (exponent 2) path loss."""
    dq = np.asarray(q_m, dtype=float) - np.asarray(q_n, dtype=float)
    d2 = float(dq @ dq + (z_m - z_n) ** 2)
    if d2 <= 0:
        raise ValueError("coincident UAV positions")
    return persp_rate(a, p, gamma0 / d2)


def link_gains(scenario: Scenario, placement: Placement) -> LinkGains:
    """Gains of every link for a placement (vectorized over all links)."""
    q, z = placement.q, placement.z
    params, g0 = scenario.channel, scenario.gamma0
    off_s = np.sum((q[None, :, :] - scenario.src_xy[:, None, :]) ** 2, axis=-1)  # (K, M)
    off_d = np.sum((q[:, None, :] - scenario.dst_xy[None, :, :]) ** 2, axis=-1)  # (M, K)
    zs = np.broadcast_to(z[None, :], off_s.shape)
    zd = np.broadcast_to(z[:, None], off_d.shape)
    d2r = np.sum((q[:, None, :] - q[None, :, :]) ** 2, axis=-1) + (z[:, None] - z[None, :]) ** 2
    with np.errstate(divide="ignore"):
        relay = g0 / d2r
    return LinkGains(
        src=ground_gain(zs, off_s, params, g0),
        dst=ground_gain(zd, off_d, params, g0),
        relay=relay,
        v_src=zs / np.sqrt(zs ** 2 + off_s),
        v_dst=zd / np.sqrt(zd ** 2 + off_d),
    )


def link_rates(scenario: Scenario, placement: Placement, alloc: Allocation,
               gains: LinkGains | None = None) -> LinkRates:
    g = gains if gains is not None else link_gains(scenario, placement)
    M = placement.M
    relay_gain = np.broadcast_to(g.relay[:, :, None], alloc.a_r.shape).copy()
    off = ~np.eye(M, dtype=bool)
    relay = np.zeros(alloc.a_r.shape)
    if M > 1:
        if np.any(~np.isfinite(relay_gain[off])) and np.any(alloc.a_r[off] > 0):
            raise ValueError("coincident UAV positions carry relay traffic")
        relay[off] = persp_rate(alloc.a_r[off], alloc.p_r[off], np.where(np.isfinite(relay_gain[off]),
                                                                         relay_gain[off], 0.0))
    return LinkRates(
        src=persp_rate(alloc.a_s, alloc.p_s, g.src),
        dst=persp_rate(alloc.a_d, alloc.p_d, g.dst),
        relay=relay,
    )


def max_min_rate(scenario: Scenario, placement: Placement, alloc: Allocation) -> float:
    return link_rates(scenario, placement, alloc).eta()
