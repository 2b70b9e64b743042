"""Time the hot kernels with numba and with the pure-numpy fallback.

Each backend runs in a fresh interpreter because ``HEVLAB_NUMBA`` is read
at import time.  Compilation is excluded: every kernel is called once
before timing.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from hevlab import _accel, drl
from hevlab.cycle_io import synth_cycle
from hevlab.dp_solver import DpConfig, solve
from hevlab.ems_mdp import EmsContext
from hevlab.neural import Mlp

repeat = int(sys.argv[1])
out = {"numba": _accel.USE_NUMBA}


def best(fn):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


ctx = EmsContext.default()
cyc = synth_cycle("pulse", 600)
cfg = DpConfig()
out["dp_solve_600s"] = best(lambda: solve(cyc, cfg, ctx))

rng = np.random.default_rng(0)
actor = Mlp([3, 64, 64, 1], "relu_hidden_tanh_out", action_range=(0, 57000.0), rng=rng)
critic = Mlp([4, 64, 64, 1], rng=rng)
at, ct = actor.copy(), critic.copy()
B = 64
S, S2 = rng.uniform(-1, 1, (B, 3)), rng.uniform(-1, 1, (B, 3))
A, R = rng.uniform(-1, 1, B), rng.normal(size=B)
D, W = np.zeros(B), np.ones(B)
LO, HI = -np.ones(B), np.ones(B)
step = [0.0]


def ddpg_updates():
    for _ in range(200):
        step[0] += 1
        drl._ddpg_update(actor.params, at.params, actor._sizes_arr, actor.adam_m, actor.adam_v,
                         critic.params, ct.params, critic._sizes_arr, critic.adam_m,
                         critic.adam_v, step[0], S, A, R, S2, D, W, LO, HI, 1000.0,
                         0.95, 1e-3, 1e-3, 1e-3, 0.9, 0.999, 1e-8)


out["ddpg_update_us"] = best(ddpg_updates) / 200 * 1e6

q = Mlp([3, 64, 64, 20], rng=rng)
qt = q.copy()
Aidx = rng.integers(0, 20, B)
qstep = [0.0]


def dqn_updates():
    for _ in range(200):
        qstep[0] += 1
        drl._dqn_update(q.params, qt.params, q._sizes_arr, q.adam_m, q.adam_v, qstep[0],
                        S, Aidx, R, S2, D, W, 0.95, 1e-3, 1e-3, 0.9, 0.999, 1e-8)


out["dqn_update_us"] = best(dqn_updates) / 200 * 1e6
print(json.dumps(out))
"""


def run_backend(flag: str, repeat: int) -> dict:
    env = dict(os.environ, HEVLAB_NUMBA=flag)
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    fast = run_backend("1", args.repeat)
    slow = run_backend("0", args.repeat)
    rows = [("dp_solve_600s", "s"), ("ddpg_update_us", "us"), ("dqn_update_us", "us")]
    print(f"{'kernel':<18}{'numba':>12}{'numpy':>12}{'speedup':>10}")
    for key, unit in rows:
        print(f"{key:<18}{fast[key]:>10.4g}{unit:>2}{slow[key]:>10.4g}{unit:>2}"
              f"{slow[key] / fast[key]:>9.1f}x")
    if not fast["numba"]:
        print("note: numba is not importable; both columns used the numpy path")
    return 0


if __name__ == "__main__":
    sys.exit(main())
