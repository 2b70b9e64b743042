"""Acceptance gate: one test per criterion, each recording a pass/fail line.

The training criteria share one set of runs (5 seeds x 3 learners, 1000
episodes each, on a 300 s urban_like cycle) produced through the CLI, so
the same artifacts back the determinism check.  On one CPU core the whole
module takes roughly half an hour.  Set ``HEVLAB_ACCEPT_DIR`` to keep the
run directories and reuse complete ones across invocations.
"""
import hashlib
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from test_dp_solver import enumerate_optimum, tiny_cycle
from test_neural import numeric_grads, rel_err

from hevlab import harness
from hevlab.cycle_io import load_expert, synth_cycle
from hevlab.dp_solver import DpConfig, extract_trajectory, solve
from hevlab.drl import TrainConfig, train_ddpg
from hevlab.evaluate import aggregate, load_report
from hevlab.neural import ACTIVATIONS, Mlp, backward
from hevlab.powertrain import PowertrainParams, battery_current, power_demand, soc_step

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2, 3, 4)
LEARNERS = ("ddpg_guarded", "ddpg", "dql")
URBAN = "synth:urban_like:300:0"
HIGHWAY = "synth:highway_like:300:0"


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def out_root(tmp_path_factory):
    keep = os.environ.get("HEVLAB_ACCEPT_DIR")
    return os.path.abspath(keep) if keep else str(tmp_path_factory.mktemp("accept"))


def _cli(root, *args):
    rc = harness.main([args[0], "--out", root, *args[1:]])
    assert rc == 0, f"hevlab {' '.join(args)} exited {rc}"


def _have(root, name):
    return os.path.isfile(os.path.join(root, name, "report.json"))


@pytest.fixture(scope="module")
def urban_dp(out_root):
    if not _have(out_root, "dp_urban"):
        _cli(out_root, "dp", "--cycle", URBAN, "--run-name", "dp_urban")
    return os.path.join(out_root, "dp_urban")


@pytest.fixture(scope="module")
def runs(out_root, urban_dp):
    """run dir per (learner, seed), all trained on the urban cycle."""
    expert = os.path.join(urban_dp, "expert.csv")
    out = {}
    for learner in LEARNERS:
        for seed in SEEDS:
            name = f"{learner}_s{seed}"
            if not _have(out_root, name):
                extra = ["--expert", expert] if learner == "ddpg_guarded" else []
                _cli(out_root, "train", "--strategy", learner, "--cycle", URBAN,
                     "--seeds", str(seed), "--run-name", name, *extra)
            out[learner, seed] = os.path.join(out_root, name)
    return out


@pytest.fixture(scope="module")
def reports(runs):
    return {k: load_report(os.path.join(d, "report.json")) for k, d in runs.items()}


# -- criteria ---------------------------------------------------------------------

def test_criterion_01_dp_matches_enumeration(ctx):
    solve(tiny_cycle(99), DpConfig(soc_points=21, action_points=4, snap=True), ctx)  # compile
    worst = 0.0
    t0 = time.perf_counter()
    solved = []
    for seed in range(5):
        cyc = tiny_cycle(seed)
        solved.append((cyc, solve(cyc, DpConfig(soc_points=21, action_points=4, snap=True), ctx)))
    elapsed = time.perf_counter() - t0
    for cyc, grid in solved:
        oracle = enumerate_optimum(cyc, ctx, grid.soc_grid, grid.action_grid, 14)
        worst = max(worst, abs(grid.values[0, 14] - oracle) / oracle)
    record(1, worst <= 1e-9 and elapsed < 1.0,
           f"max relative error {worst:.2e} vs 1024-sequence enumeration, DP time {elapsed:.3f} s")


def test_criterion_02_charge_sustaining(ctx):
    solve(synth_cycle("pulse", 60), DpConfig(soc_points=21, action_points=8), ctx)  # compile
    cyc = synth_cycle("pulse", 600)
    t0 = time.perf_counter()
    grid = solve(cyc, DpConfig(), ctx)
    _, tr = extract_trajectory(grid, cyc, 0.7, ctx)
    elapsed = time.perf_counter() - t0
    drift = abs(tr.soc[-1] - 0.7)
    record(2, drift <= 0.05 and elapsed < 10.0,
           f"final SoC {tr.soc[-1]:.4f} (|drift| {drift:.4f}), solve + rollout {elapsed:.2f} s")


def test_criterion_03_imitation_limit(ctx, urban_dp):
    cyc = harness.build_cycle(URBAN, 1.0)
    expert = load_expert(os.path.join(urban_dp, "expert.csv"), cyc)
    dp_cost = load_report(os.path.join(urban_dp, "report.json")).total_cost
    cfg = TrainConfig(episodes=1, radius_start=0.0, radius_end=0.0, seed=0)
    res = train_ddpg(cyc, cfg.guard(expert), cfg, ctx)
    got = -res.history[0].total_reward
    rel = abs(got - dp_cost) / dp_cost
    record(3, rel <= 1e-6, f"first-episode cost {got:.9f} vs DP {dp_cost:.9f} (rel {rel:.1e})")


def test_criterion_04_optimality_gap(reports, urban_dp):
    dp_cost = load_report(os.path.join(urban_dp, "report.json")).total_cost
    costs = {s: reports["ddpg_guarded", s].total_cost for s in SEEDS}
    best = min(costs, key=costs.get)
    gap = costs[best] / dp_cost - 1.0
    slowest = max(reports["ddpg_guarded", s].wall_seconds for s in SEEDS)
    record(4, gap <= 0.05 and slowest < 1800,
           f"best seed {best}: guard-free cost {costs[best]:.3f} vs DP {dp_cost:.3f} "
           f"(gap {100 * gap:.2f}%), slowest seed {slowest:.0f} s")


def test_criterion_05_ordering(reports):
    agg = aggregate(reports.values(), "equivalent_fuel_g")
    g, d, q = (agg[k]["mean"] for k in LEARNERS)
    record(5, g < d < q,
           f"seed-mean equivalent fuel: guarded {g:.2f} g, ddpg {d:.2f} g, dql {q:.2f} g")


def test_criterion_06_convergence(reports):
    agg = aggregate(reports.values(), "episodes_to_95")
    g, d = agg["ddpg_guarded"]["mean"], agg["ddpg"]["mean"]
    record(6, g < d, f"seed-mean episodes to 95%: guarded {g:.1f}, ddpg {d:.1f}")


def test_criterion_07_gradients():
    rng = np.random.default_rng(7)
    worst = 0.0
    for k in range(20):
        sizes = [int(rng.integers(1, 6))] + [int(rng.integers(2, 8))
                                             for _ in range(int(rng.integers(1, 4)))]
        net = Mlp(sizes, ACTIVATIONS[k % 2], rng=rng)
        net.params[:] = rng.normal(0, 0.7, net.params.shape)
        x = rng.normal(size=(int(rng.integers(1, 5)), sizes[0]))
        up = rng.normal(size=(x.shape[0], sizes[-1]))
        g = backward(net, x, up)
        gp, gx = numeric_grads(net, x.copy(), up)
        worst = max(worst, rel_err(g.flat, gp), rel_err(g.dx, gx))
    record(7, worst < 1e-4, f"max relative error {worst:.2e} over 20 nets (params and inputs)")


def test_criterion_08_physics(reports, urban_dp):
    p = PowertrainParams()
    still = all(soc_step(s, 0.0, dt, p)[0] == s for s in np.linspace(0.3, 0.9, 25)
                for dt in (0.1, 1.0, 7.0))
    resid = 0.0
    for pb in np.linspace(-p.V_oc ** 2 / (4 * p.r_0) * 0.99, p.V_oc ** 2 / (4 * p.r_0) * 0.99, 401):
        i = battery_current(pb, p)
        resid = max(resid, abs((p.V_oc - i * p.r_0) * i - pb) / max(abs(pb), 1.0))
    zero = power_demand(0.0, 0.0, p) == 0.0
    # every acceptance run finished and wrote its report; none aborted
    clean = all(r.infeasible_steps >= 0 for r in reports.values()) and len(reports) == 15
    record(8, still and resid < 1e-6 and zero and clean,
           f"P_b=0 keeps SoC: {still}; battery residual {resid:.1e}; power_demand(0,0)=0: {zero}; "
           f"{len(reports)} training runs completed")


def test_criterion_09_adaptability(ctx, runs, reports, out_root):
    best = min(SEEDS, key=lambda s: reports["ddpg_guarded", s].total_cost)
    hw = harness.build_cycle(HIGHWAY, 1.0)
    if not _have(out_root, "dp_highway"):
        _cli(out_root, "dp", "--cycle", HIGHWAY, "--run-name", "dp_highway")
    dp_cost = load_report(os.path.join(out_root, "dp_highway", "report.json")).total_cost
    ev = {}
    for learner in ("ddpg_guarded", "dql"):
        name = f"eval_{learner}_s{best}"
        if not _have(out_root, name):
            _cli(out_root, "eval", "--checkpoint", runs[learner, best], "--cycle", HIGHWAY,
                 "--run-name", name)
        ev[learner] = load_report(os.path.join(out_root, name, "report.json"))
    g, q = ev["ddpg_guarded"], ev["dql"]
    ratio = g.total_cost / dp_cost
    ok = (g.cross_cycle and g.infeasible_steps == 0 and ratio <= 1.5 and g.band_mass > q.band_mass)
    record(9, ok, f"seed {best} on {hw.name}: {g.infeasible_steps} flagged steps, cost "
                  f"{g.total_cost:.2f} = {ratio:.3f} x DP {dp_cost:.2f}; band mass "
                  f"guarded {g.band_mass:.3f} vs dql {q.band_mass:.3f}")


def test_criterion_10_determinism(runs, urban_dp, tmp_path):
    root = str(tmp_path)
    checked = []
    _cli(root, "dp", "--config", os.path.join(urban_dp, "config.txt"), "--run-name", "dp")
    same = all(sha(tmp_path / "dp" / f) == sha(Path(urban_dp) / f)
               for f in ("value_grid.npz", "expert.csv", "trace.csv"))
    checked.append(("dp", same))
    for learner in LEARNERS:
        src = runs[learner, 0]
        _cli(root, "train", "--config", os.path.join(src, "config.txt"), "--run-name", learner)
        same = all(sha(tmp_path / learner / f) == sha(Path(src) / f)
                   for f in ("rewards.csv", "checkpoint.npz", "trace.csv"))
        checked.append((learner, same))
    record(10, all(ok for _, ok in checked),
           "hash match from config snapshot: " + ", ".join(f"{n}={ok}" for n, ok in checked))
