"""Driver: algorithms, checker, output files and sweeps on small instances."""
import dataclasses
import json

import numpy as np
import pytest

from uavrelay import driver, gibbs, sca
from uavrelay.channel import Allocation, Placement
from uavrelay.scenario import AlgoConfig, random_scenario

from conftest import FAST


@pytest.fixture(scope="module")
def scen():
    return random_scenario(3, 2, seed=7, side=200.0)


@pytest.fixture(scope="module")
def igs(scen):
    return driver.run(scen, FAST, "igs-bcd")


@pytest.fixture(scope="module")
def bcd_only(scen):
    return driver.run(scen, FAST, "bcd-only")


class TestAlgorithms:
    def test_igs_result_passes_checker(self, igs):
        assert igs.check.ok, igs.check.violations
        assert igs.algo == "igs-bcd" and igs.extra["init"] == "vuc"

    def test_trace_running_best(self, igs):
        rows = igs.trace
        assert (rows[0].iter, rows[0].phase) == (0, "init")
        best = -np.inf
        for r in rows:
            best = max(best, r.eta)
            assert r.eta_best == best
        assert igs.eta == pytest.approx(max(r.eta for r in rows if r.phase in ("init", "bcd")), rel=1e-12)

    def test_igs_not_below_bcd_only(self, igs, bcd_only):
        assert igs.eta >= bcd_only.eta - 1e-7

    def test_no_gs_iterations_equals_bcd_only(self, scen, bcd_only):
        res = driver.run(scen, dataclasses.replace(FAST, max_gs_iters=0), "igs-bcd")
        assert res.eta == bcd_only.eta
        np.testing.assert_array_equal(res.placement.xyz, bcd_only.placement.xyz)

    def test_random_select_nested_draws(self, scen):
        one = driver.run_benchmark(scen, FAST, "random-select", n_random=1)
        five = driver.run_benchmark(scen, FAST, "random-select", n_random=5)
        assert five.eta >= one.eta
        assert [r.eta for r in one.trace] == [r.eta for r in five.trace][:1]
        assert one.check.ok and five.extra["samples"] == 5

    def test_random_select_matches_first_draw(self, scen):
        res = driver.run_benchmark(scen, FAST, "random-select", n_random=1)
        grid = gibbs.Grid.from_scenario(scen, FAST.grid_cell_m)
        cells = np.random.default_rng(FAST.seed).choice(grid.size, size=scen.M, replace=False)
        ev = gibbs.EtaEvaluator(scen, FAST, grid)
        assert res.eta == pytest.approx(ev(tuple(cells)), rel=1e-12)

    def test_gs_only_improves_on_snapped_start(self, scen):
        cfg = dataclasses.replace(FAST, max_outer_iters=2)
        res = driver.run(scen, cfg, "gs-only")
        assert res.check.ok
        assert res.eta >= res.trace[0].eta

    def test_seeded_runs_repeat(self, scen, igs):
        again = driver.run(scen, FAST, "igs-bcd")
        assert [dataclasses.astuple(r)[:5] for r in again.trace] == [dataclasses.astuple(r)[:5] for r in igs.trace]

    def test_unknown_algo(self, scen):
        with pytest.raises(ValueError, match="unknown algorithm"):
            driver.run(scen, FAST, "annealing")


class TestChecker:
    @pytest.fixture
    def state(self, scen):
        pl = Placement([[60, 60], [140, 140]], [60, 90])
        al, eta = sca.solve_resource_allocation(scen, pl)
        return scen, pl, al, eta

    def test_clean_state(self, state):
        assert driver.check_solution(*state).ok

    @pytest.mark.parametrize("breaker,msg", [
        (lambda pl, al: (pl, dataclasses.replace(al, a_s=al.a_s + 0.5)), "bandwidth"),
        (lambda pl, al: (pl, dataclasses.replace(al, p_d=al.p_d * 3 + 1)), "UAV power"),
        (lambda pl, al: (pl, dataclasses.replace(al, p_s=al.p_s * 3 + 1)), "source power"),
        (lambda pl, al: (Placement(pl.q, pl.z + 500), al), "altitude"),
        (lambda pl, al: (Placement(pl.q - 500, pl.z), al), "region"),
        (lambda pl, al: (pl, dataclasses.replace(al, a_d=al.a_d * 0.5, p_d=al.p_d * 0.5)), "flow"),
        (lambda pl, al: (pl, dataclasses.replace(al, a_s=-al.a_s)), "negative"),
    ])
    def test_violations_detected(self, state, breaker, msg):
        sc, pl, al, eta = state
        pl2, al2 = breaker(pl, al)
        rep = driver.check_solution(sc, pl2, al2, driver.check_solution(sc, pl2, al2, eta).eta)
        assert any(msg in v for v in rep.violations), rep.violations

    def test_misreported_eta(self, state):
        sc, pl, al, eta = state
        rep = driver.check_solution(sc, pl, al, eta * 1.01)
        assert any("reported eta" in v for v in rep.violations)


class TestOutputs:
    def test_round_trip(self, scen, igs, tmp_path):
        res_path, trace_path = driver.emit_outputs(scen, igs, tmp_path)
        doc = json.loads(res_path.read_text())
        assert doc["eta"] == pytest.approx(igs.eta, rel=1e-11)
        assert doc["scenario_digest"] == scen.digest() and doc["check"]["ok"]
        pl, al = driver.load_placement(doc)
        np.testing.assert_allclose(pl.xyz, igs.placement.xyz, rtol=1e-11)
        np.testing.assert_allclose(al.a_d, igs.alloc.a_d, rtol=1e-11, atol=1e-300)
        rows = driver.read_trace(trace_path)
        assert tuple(rows[0]) == driver.TRACE_HEADER
        assert len(rows) == len(igs.trace)
        for r, t in zip(rows, igs.trace):
            assert (int(r["iter"]), r["phase"], r["substep"]) == (t.iter, t.phase, t.substep)
            assert float(r["eta"]) == pytest.approx(t.eta, rel=1e-11)
            assert r["wall_ms"] == ""

    def test_wall_clock_column(self, scen, igs, tmp_path):
        res_path, trace_path = driver.emit_outputs(scen, igs, tmp_path, wall_clock=True)
        rows = driver.read_trace(trace_path)
        assert all(float(r["wall_ms"]) >= 0 for r in rows)
        assert "wall_s" in json.loads(res_path.read_text())

    def test_traces_byte_identical(self, scen, igs, tmp_path):
        again = driver.run(scen, FAST, "igs-bcd")
        _, a = driver.emit_outputs(scen, igs, tmp_path / "a")
        _, b = driver.emit_outputs(scen, again, tmp_path / "b")
        assert a.read_bytes() == b.read_bytes()

    def test_unwritable_directory(self, scen, igs, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="cannot write outputs"):
            driver.emit_outputs(scen, igs, blocker / "sub")

    def test_placement_documents(self):
        pl, al = driver.load_placement({"xyz": [[1, 2, 50], [3, 4, 60]]})
        np.testing.assert_array_equal(pl.z, [50, 60]) and al is None
        pl, _ = driver.load_placement({"q": [[1, 2]], "z": [40]})
        np.testing.assert_array_equal(pl.q, [[1, 2]])

    def test_sig12(self):
        out = driver.sig12({"a": np.array([1 / 3, np.inf]), "b": (np.int64(3), 2.0)})
        assert out == {"a": [0.333333333333, None], "b": [3, 2.0]}


class TestSweep:
    def test_random_pairs_match_random_scenario(self):
        base = random_scenario(4, 2, seed=0)
        for seed in range(3):
            assert driver.random_pairs(base, 6, 3, seed) == random_scenario(6, 3, seed=seed)

    def test_sweep_rows(self, scen):
        cfg = dataclasses.replace(FAST, max_outer_iters=1, max_bcd_iters=1)
        rows = driver.sweep(scen, cfg, "M", [1, 2], seeds=2, algo="bcd-only")
        assert [r["value"] for r in rows] == [1, 2]
        for r in rows:
            assert r["seeds"] == 2 and r["min_eta"] <= r["mean_eta"] <= r["max_eta"]

    def test_sweep_rejects_other_axes(self, scen):
        with pytest.raises(ValueError):
            driver.sweep(scen, FAST, "L", [1], 1)
