"""Tangent-bound families: tangency, sampled domination and coefficient checks.

Each bounded function is re-implemented here from the rate formula, with every
quantity that is not linearized held at the expansion point.
"""
import numpy as np
import pytest

from uavrelay import sca
from uavrelay.channel import Allocation, Placement, link_gains, persp_rate
from uavrelay.scenario import random_scenario

N_SAMPLES = 1000


def rate(a, p, snr_per_power):
    a, p = np.asarray(a, float), np.asarray(p, float)
    return a * np.log2(1.0 + snr_per_power * p / a)


def expansion(seed):
    sc = random_scenario(4, 3, seed=seed)
    rng = np.random.default_rng(seed)
    K, M = sc.K, sc.M
    pl = Placement(rng.uniform(20, 280, (M, 2)), rng.uniform(35, 145, M))
    al = Allocation(rng.uniform(1e-3, 0.05, (K, M)), rng.uniform(1e-3, 0.05, (M, K)),
                    rng.uniform(1e-3, 0.05, (M, M, K)), rng.uniform(1e-4, 0.03, (K, M)),
                    rng.uniform(1e-3, 0.6, (M, K)), rng.uniform(1e-3, 0.6, (M, M, K)))
    for m in range(M):
        al.a_r[m, m] = al.p_r[m, m] = 0.0
    return sc, pl, al, rng


def check_family(bound, true_fn, sampler, rng, name):
    """Tangency, domination over N_SAMPLES draws and gradient vs central differences."""
    pt = bound.point
    base_true = true_fn(pt)
    scale = np.maximum(1.0, np.abs(base_true))
    assert np.all(np.abs(bound(pt) - base_true) <= 1e-10 * scale), f"{name}: not tangent"

    worst = np.inf
    for _ in range(N_SAMPLES):
        x = sampler(rng)
        gap = bound(x) - true_fn(x)
        gap = gap if bound.sense == "upper" else -gap
        worst = min(worst, float(np.min(gap)))
    assert worst >= -1e-9, f"{name}: domination slack {worst:.3e}"

    d = pt.shape[1]
    for j in range(d):
        h = 1e-6 * np.maximum(1.0, np.abs(pt[:, j]))
        e = np.zeros_like(pt)
        e[:, j] = h
        fd = (true_fn(pt + e) - true_fn(pt - e)) / (2 * h)
        coef = bound.coef[:, j]
        err = np.abs(coef - fd)
        ok = err <= 1e-5 * np.maximum(np.abs(fd), 1e-12) + 1e-13
        assert np.all(ok), f"{name}[{j}]: max rel err {np.max(err / np.maximum(np.abs(fd), 1e-300)):.2e}"
    return worst


# ---------------------------------------------------------------------------
# upper bounds in (a, p)


@pytest.mark.parametrize("seed", range(3))
def test_upper_bounds(seed):
    sc, pl, al, rng = expansion(seed)
    ub = sca.build_upper_bounds(sc, pl, al)
    g = link_gains(sc, pl)
    mm, nn, _ = ub["relay_index"]
    P = float(sc.uav_power.max())
    for name, gain in (("dst", g.dst.ravel()), ("relay", g.relay[mm, nn])):
        bound = ub[name]
        assert bound.sense == "upper"
        true_fn = lambda x, gain=gain: rate(x[:, 0], x[:, 1], gain)
        sampler = lambda r, n=len(gain): np.column_stack([r.uniform(1e-6, 1.0, n), r.uniform(1e-6, P, n)])
        check_family(bound, true_fn, sampler, rng, name)


def test_upper_bound_floors_zero_expansion(small_scenario):
    sc = small_scenario
    pl = Placement([[50, 50], [150, 150]], [60, 80])
    ub = sca.build_upper_bounds(sc, pl, Allocation.zeros(sc.K, sc.M))
    assert np.all(ub["dst"].point >= sca.DELTA)
    assert np.all(np.isfinite(ub["dst"].coef))


# ---------------------------------------------------------------------------
# lower bounds for the placement blocks


def lower_families(sc, pl, al, block, split):
    """Independent bounded functions and samplers, keyed like build_lower_bounds."""
    ch, g0 = sc.channel, sc.gamma0
    q, z = pl.q, pl.z
    K, M = sc.K, sc.M
    off_s = np.sum((q[None] - sc.src_xy[:, None]) ** 2, axis=-1)
    off_d = np.sum((q[:, None] - sc.dst_xy[None]) ** 2, axis=-1)
    Emin, Emax = np.exp(-(ch.B1 + ch.B2)), np.exp(-ch.B1)
    Xmax = 2 * 300.0 ** 2 + sc.h_max ** 2

    def ground(a, p, X, Y):
        return rate(a, p, g0 * (ch.C1 + ch.C2 / Y) / X ** (ch.alpha / 2))

    fams = {}
    a_d, p_d = al.a_d.ravel(), al.p_d.ravel()
    fams["dst_rate"] = (lambda x: ground(a_d, p_d, x[:, 0], x[:, 1]),
                        lambda r: np.column_stack([r.uniform(sc.h_min ** 2, Xmax, M * K),
                                                   1 + r.uniform(Emin, Emax, M * K)]))
    a_s, p_s = al.a_s.ravel(), al.p_s.ravel()
    fixed = (z[None] ** 2 + 0 * off_s).ravel() if block == "horizontal" else off_s.ravel()
    s_lo, s_hi = (0.0, 2 * 300.0 ** 2) if block == "horizontal" else (sc.h_min ** 2, sc.h_max ** 2)
    fams["src_rate"] = (lambda x: ground(a_s, p_s, fixed + x[:, 1], 1 + x[:, 0]),
                        lambda r: np.column_stack([r.uniform(Emin, Emax, K * M), r.uniform(s_lo, s_hi, K * M)]))
    mm, nn, kk = np.nonzero(~np.eye(M, dtype=bool)[:, :, None] & np.ones((1, 1, K), dtype=bool))
    dq2 = np.sum((q[mm] - q[nn]) ** 2, axis=1)
    dz2 = (z[mm] - z[nn]) ** 2
    other = dz2 if block == "horizontal" else dq2
    a_r, p_r = al.a_r[mm, nn, kk], al.p_r[mm, nn, kk]
    n_r = len(mm)
    fams["relay_rate"] = (lambda x: rate(a_r, p_r, g0 / (other + x[:, 0])),
                          lambda r: r.uniform(1e-2, 1e5, (n_r, 1)))
    if block == "horizontal":
        fams["relay_dist"] = (lambda x: other + np.sum(x * x, axis=1), lambda r: r.uniform(-300, 300, (n_r, 2)))
    else:
        fams["relay_dist"] = (lambda x: other + x[:, 0] ** 2, lambda r: r.uniform(-120, 120, (n_r, 1)))
    c = np.broadcast_to(np.asarray(split, float), (M,))
    for name, zz, cc, n in (("src_angle", np.tile(z, K), np.tile(c, K), K * M),
                            ("dst_angle", np.repeat(z, K), np.repeat(c, K), M * K)):
        if block == "horizontal":
            fams[name] = (lambda x, zz=zz, cc=cc: (zz + cc) ** 2 / (4 * cc * x[:, 0]),
                          lambda r, n=n: r.uniform(1e-3, 1.0, (n, 1)))
        else:
            fams[name] = (lambda x, cc=cc: (x[:, 0] + cc) ** 2 / (4 * cc * x[:, 1]),
                          lambda r, n=n: np.column_stack([r.uniform(sc.h_min, sc.h_max, n),
                                                          r.uniform(1e-3, 1.0, n)]))
    return fams


@pytest.mark.parametrize("block", ["horizontal", "vertical"])
@pytest.mark.parametrize("split_kind", ["unit", "altitude"])
@pytest.mark.parametrize("seed", range(2))
def test_lower_bound_families(block, split_kind, seed):
    sc, pl, al, rng = expansion(seed)
    split = 1.0 if split_kind == "unit" else pl.z.copy()
    lbs = sca.build_lower_bounds(sc, pl, al, block, split=split)
    fams = lower_families(sc, pl, al, block, split)
    assert set(fams) == {"dst_rate", "src_rate", "relay_rate", "relay_dist", "src_angle", "dst_angle"}
    for name, (true_fn, sampler) in fams.items():
        assert lbs[name].sense == "lower"
        check_family(lbs[name], true_fn, sampler, rng, f"{block}/{name}")


def test_angle_expansion_override():
    sc, pl, al, rng = expansion(0)
    v_s = np.full((sc.K, sc.M), 0.4)
    v_d = np.full((sc.M, sc.K), 0.6)
    lbs = sca.build_lower_bounds_vertical(sc, pl, al, v_hat=(v_s, v_d))
    np.testing.assert_array_equal(lbs["src_angle"].point[:, 1], 0.4)
    np.testing.assert_array_equal(lbs["dst_angle"].point[:, 1], 0.6)


def test_lower_bounds_reject_bad_domain():
    sc, pl, al, _ = expansion(1)
    with pytest.raises(ValueError, match="domain"):
        sca.build_lower_bounds(sc, Placement(pl.q, -pl.z), al, "horizontal")
    with pytest.raises(ValueError):
        sca.build_lower_bounds(sc, pl, al, "diagonal")


def test_xy_gradient_matches_channel_rate():
    sc, pl, al, _ = expansion(2)
    g = link_gains(sc, pl)
    off = np.sum((pl.q[:, None] - sc.dst_xy[None]) ** 2, axis=-1)
    X = pl.z[:, None] ** 2 + off
    v = pl.z[:, None] / np.sqrt(X)
    Y = 1 + np.exp(-(sc.channel.B1 + sc.channel.B2 * v))
    np.testing.assert_allclose(sca.ground_rate_xy(al.a_d, al.p_d, X, Y, sc), persp_rate(al.a_d, al.p_d, g.dst),
                               rtol=1e-13)


# ---------------------------------------------------------------------------
# joint concavity of the perspective rate


def test_perspective_concavity_random_combinations(rng):
    gamma = 3.7
    g = lambda x, y: persp_rate(x, y, gamma)
    worst = np.inf
    for _ in range(1000):
        x1, y1, x2, y2 = rng.uniform(1e-6, 1.0, 4)
        lam = rng.uniform()
        slack = g(lam * x1 + (1 - lam) * x2, lam * y1 + (1 - lam) * y2) - (lam * g(x1, y1) + (1 - lam) * g(x2, y2))
        worst = min(worst, slack)
    assert worst >= -1e-10
