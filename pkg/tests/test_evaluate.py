import copy
import math

import numpy as np
import pytest

from hevlab.cycle_io import DriveCycle
from hevlab.evaluate import (EvaluationError, RunReport, band_mass, compare, convergence_episode,
                             equivalent_fuel, load_report, mpg, read_reward_csv, read_trace_csv,
                             report_from_trace, save_report, soc_equivalence_slope,
                             write_comparison_csv, write_efficiency_map_csv,
                             write_operating_points_csv, write_reward_csv, write_trace_csv)
from hevlab.ems_mdp import EmsEnv, simulate
from hevlab.powertrain import default_engine_map


class FlatMap:
    """Stand-in map with a fixed mean efficiency."""
    mean_ool_efficiency = 0.3
    lhv = 42.5e3


def test_equivalent_fuel_examples(params):
    m = FlatMap()
    assert equivalent_fuel(100.0, 0.7, 0.7, params, m) == 100.0
    assert equivalent_fuel(100.0, 0.6, 0.7, params, m) < 100.0
    debit = equivalent_fuel(0.0, 0.7, 0.6, params, m)
    assert debit == pytest.approx(0.1 * 29160 * 200 / (0.3 * 42.5e6) * 1000, rel=1e-12)
    assert debit == pytest.approx(45.74, abs=0.01)


def test_equivalent_fuel_affine_slope(params):
    emap = default_engine_map()
    slope = soc_equivalence_slope(params, emap)
    vals = [equivalent_fuel(50.0, 0.7, 0.7 + d, params, emap) for d in (-0.05, 0.0, 0.08)]
    assert vals[0] - vals[1] == pytest.approx(0.05 * slope, rel=1e-12)
    assert vals[1] - vals[2] == pytest.approx(0.08 * slope, rel=1e-12)
    assert slope == pytest.approx(params.Q_c * params.V_oc / (emap.mean_ool_efficiency * emap.lhv))


def test_mpg_examples():
    assert mpg(2841.3, 1609.34) == pytest.approx(1.0, rel=2e-4)
    cyc = DriveCycle("c", 1.0, [10.0] * 101)
    assert mpg(200.0, cyc) == pytest.approx(mpg(100.0, cyc) / 2)
    for x in (10.0, 55.0, 300.0):
        assert mpg(x, cyc) * x == pytest.approx(mpg(1.0, cyc))
    assert math.isinf(mpg(0.0, cyc))
    with pytest.raises(EvaluationError):
        mpg(10.0, DriveCycle("still", 1.0, [0.0, 0.0]))
    with pytest.raises(EvaluationError):
        mpg(-1.0, cyc)


def test_convergence_episode_examples():
    assert convergence_episode(np.full(100, -3.0)) == 0
    ep = convergence_episode(np.arange(1000.0))
    assert abs(ep - 950) <= 20
    with pytest.raises(EvaluationError):
        convergence_episode(np.zeros(19))


def test_convergence_faster_curve_wins():
    e = np.arange(1000.0)
    fast = -100 * np.exp(-e / 30)
    slow = -100 * np.exp(-e / 200)
    assert convergence_episode(fast) < convergence_episode(slow)


def test_band_mass():
    emap = default_engine_map()
    lo, hi = emap.efficiency_band()
    assert band_mass([0.0, 0.0], emap) == 0.0
    assert band_mass([0.0, (lo + hi) / 2, 1000.0], emap) == 0.5


def make_report(strategy, cost, cycle="c", seed=0):
    return RunReport(strategy, cycle, cost, 0.7, 0.7, cost, 40.0, cost, seed=seed)


def test_compare_examples(tmp_path):
    reps = [make_report("dql", 130.0), make_report("dp", 100.0), make_report("ddpg", 120.0),
            make_report("ddpg_guarded", 104.0)]
    before = copy.deepcopy(reps)
    cmp = compare(reps)
    assert [r["strategy"] for r in cmp.rows] == ["dp", "ddpg_guarded", "ddpg", "dql"]
    assert cmp.ordering_ok
    assert cmp.rows[1]["gap_vs_dp"] == pytest.approx(0.04)
    assert reps == before
    write_comparison_csv(cmp, tmp_path / "cmp.csv")
    assert len((tmp_path / "cmp.csv").read_text().splitlines()) == 1 + 4 + 3


def test_compare_flags_violations_and_duplicates():
    cmp = compare([make_report("dp", 100.0), make_report("ddpg_guarded", 90.0)])
    assert cmp.flags == {"dp<=ddpg_guarded": False}
    same = make_report("ddpg_guarded", 104.0)
    cmp = compare([same, copy.deepcopy(same)])
    assert len(cmp.rows) == 2 and cmp.ordering_ok
    pair = compare([make_report("dp", 100.0), make_report("dp", 100.0)])
    assert all(r["gap_vs_dp"] == 0.0 for r in pair.rows)


def test_compare_validation():
    with pytest.raises(EvaluationError):
        compare([make_report("dp", 1.0)])
    with pytest.raises(EvaluationError):
        compare([make_report("dp", 1.0, "a"), make_report("dql", 2.0, "b")])


def test_report_round_trip_and_files(ctx, tmp_path):
    cyc = DriveCycle("c", 1.0, np.linspace(0, 15, 60))
    env = EmsEnv(cyc, ctx)
    tr = simulate(env, lambda t, s: 15000.0, 0.7)
    rep = report_from_trace("ddpg", cyc, tr, ctx, history=np.linspace(-50, -10, 40),
                            training_cycle="other", seed=3)
    assert rep.cross_cycle
    assert rep.equivalent_fuel_g < rep.raw_fuel_g  # engine-heavy policy charges the battery
    save_report(rep, tmp_path / "r.json")
    assert load_report(tmp_path / "r.json") == rep
    write_trace_csv(tr, tmp_path / "t.csv")
    data = read_trace_csv(tmp_path / "t.csv")
    assert np.array_equal(data["pe_w"], tr.pe) and np.array_equal(data["soc"], tr.soc[:-1])

    class H:
        total_reward, total_fuel_g, final_soc = -1.5, 2.0, 0.7
    write_reward_csv([H(), H()], tmp_path / "r.csv")
    assert read_reward_csv(tmp_path / "r.csv").shape == (2, 4)
    write_operating_points_csv(tr, ctx.emap, tmp_path / "op.csv")
    write_efficiency_map_csv(ctx.emap, tmp_path / "eff.csv")
    assert (tmp_path / "op.csv").read_text().startswith("t,pe_w,speed_rpm")


def test_infinite_mpg_serializes(tmp_path):
    rep = RunReport("dp", "c", 0.0, 0.7, 0.7, 0.0, math.inf, 0.0)
    save_report(rep, tmp_path / "r.json")
    assert '"infinite"' in (tmp_path / "r.json").read_text()
    assert math.isinf(load_report(tmp_path / "r.json").mpg)
    with pytest.raises(EvaluationError):
        RunReport("dp", "c", math.nan, 0.7, 0.7, 0.0, 1.0, 0.0)
