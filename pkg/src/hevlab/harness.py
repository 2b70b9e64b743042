"""Command-line entry point: ``hevlab {dp,train,eval,compare,gen-cycle}``.

Every option is a flat config key.  Values resolve as built-in default,
then ``--config FILE`` (``key = value`` lines), then explicit flags.  Each
command writes the fully resolved config to ``config.txt`` in its run
directory before doing any work, so ``hevlab <cmd> --config run/config.txt``
repeats the run.  Run directories live under ``--out`` (default: the
``HEVLAB_OUT`` environment variable, else ``./runs``).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path


from .cycle_io import (CycleError, DriveCycle, load_cycle, load_expert, save_cycle, save_expert,
                       synth_cycle)
from .dp_solver import DpConfig, extract_trajectory, save_value_grid, save_value_grid_csv, solve
from .drl import TrainConfig, rollout_policy, train_ddpg, train_dql
from .ems_mdp import CostWeights, EmsContext
from .evaluate import (compare, load_report, read_reward_csv, read_trace_csv, report_from_trace,
                       save_report, with_traces, write_comparison_csv, write_efficiency_map_csv,
                       write_operating_points_csv, write_reward_csv, write_trace_csv)
from .neural import DivergenceError, load_checkpoint, save_checkpoint
from .powertrain import PowertrainParams, default_engine_map, load_engine_map, load_params

log = logging.getLogger("hevlab")

STRATEGIES = ("dql", "ddpg", "ddpg_guarded")
OUT_ENV = "HEVLAB_OUT"
EXIT_ERROR = 1
EXIT_DIVERGED = 3


class ConfigError(ValueError):
    pass


# -- configuration ------------------------------------------------------------------

def _none_or(cast):
    def parse(s):
        return None if str(s).strip().lower() in ("", "none") else cast(s)
    parse.__name__ = cast.__name__
    return parse


def _bool(s) -> bool:
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _seeds(s) -> tuple[int, ...]:
    if isinstance(s, (tuple, list)):
        return tuple(int(x) for x in s)
    return tuple(int(x) for x in str(s).replace(" ", "").split(",") if x)


def _paths(s) -> tuple[str, ...]:
    if isinstance(s, (tuple, list)):
        return tuple(str(x) for x in s)
    return tuple(x for x in str(s).split(",") if x)


_TC = TrainConfig()
_DC = DpConfig()
_CW = CostWeights()

# key -> (parser, default, help)
KEYS: dict[str, tuple] = {
    "cycle": (str, "synth:pulse:600:0",
              "drive cycle: CSV path (t,v) or synth:<kind>:<duration>:<seed>"),
    "dt": (float, 1.0, "sample time of the resampled cycle, s"),
    "soc0": (float, 0.7, "initial SoC"),
    "params": (_none_or(str), None, "powertrain parameter file (key = value); default built-in"),
    "map": (_none_or(str), None, "engine map CSV; default synthetic map"),
    "strategy": (str, "ddpg_guarded", f"learner for train: one of {', '.join(STRATEGIES)}"),
    "expert": (_none_or(str), None, "expert CSV (t,pe_kw) for ddpg_guarded, e.g. a dp run's expert.csv"),
    "seeds": (_seeds, (0,), "comma-separated training seeds"),
    "workers": (int, 1, "parallel training processes (one seed each)"),
    "checkpoint": (_none_or(str), None, "eval: checkpoint file or training run directory"),
    "runs": (_paths, (), "compare: comma-separated run directories"),
    "kind": (str, "urban_like", "gen-cycle: pulse, urban_like or highway_like"),
    "duration": (int, 600, "gen-cycle: length in s"),
    "seed": (int, 0, "gen-cycle: generator seed"),
    "output": (_none_or(str), None, "gen-cycle: output CSV path"),
    "dump_csv": (_bool, False, "dp: also write the value grid as CSV"),
    # cost
    "delta": (float, _CW.delta, "SoC deficit weight"),
    "soc_ref": (float, _CW.soc_ref, "reference SoC"),
    "reward_scale": (float, _CW.reward_scale, "reward = -reward_scale * cost"),
    "terminal_weight": (_none_or(float), None, "terminal SoC weight; none = delta * 20"),
    # dp
    "soc_points": (int, _DC.soc_points, "DP SoC grid size"),
    "action_points": (int, _DC.action_points, "DP engine-power grid size"),
}
for _f in dataclasses.fields(TrainConfig):
    if _f.name in ("seed", "soc0"):
        continue
    _default = getattr(_TC, _f.name)
    _cast = {int: int, float: float, str: str}.get(type(_default), _none_or(float))
    KEYS.setdefault(_f.name, (_cast, _default, f"training: {_f.name.replace('_', ' ')}"))

COMMAND_KEYS = {
    "dp": ("cycle", "dt", "soc0", "params", "map", "delta", "soc_ref", "reward_scale",
           "terminal_weight", "soc_points", "action_points", "dump_csv"),
    "train": None,  # everything except the per-command extras below
    "eval": ("cycle", "dt", "soc0", "params", "map", "delta", "soc_ref", "reward_scale",
             "terminal_weight", "checkpoint"),
    "compare": ("runs",),
    "gen-cycle": ("kind", "duration", "seed", "dt", "output"),
}
_NOT_TRAIN = {"checkpoint", "runs", "kind", "duration", "seed", "output", "dump_csv",
              "soc_points", "action_points"}


def keys_for(command: str) -> list[str]:
    ks = COMMAND_KEYS[command]
    if ks is None:
        return [k for k in KEYS if k not in _NOT_TRAIN]
    return list(ks)


def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {k!r}")
        out[k] = v
    return out


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def resolve(command: str, file_values: dict, cli_values: dict) -> dict:
    conf = {}
    for k in keys_for(command):
        cast, default, _ = KEYS[k]
        raw = cli_values.get(k, file_values.get(k))
        try:
            conf[k] = default if raw is None else cast(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {k}: {raw!r} ({exc})") from None
    # snapshots must replay from any working directory
    for k in ("cycle", "expert", "params", "map", "checkpoint"):
        v = conf.get(k)
        if isinstance(v, str) and not v.startswith("synth:") and Path(v).exists():
            conf[k] = str(Path(v).resolve())
    if "runs" in conf:
        conf["runs"] = tuple(str(Path(r).resolve()) if Path(r).exists() else r for r in conf["runs"])
    return conf


def write_snapshot(conf: dict, command: str, path: Path) -> None:
    lines = [f"# hevlab {command} configuration snapshot"]
    lines += [f"{k} = {_fmt(v)}" for k, v in conf.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- building blocks ----------------------------------------------------------------

def build_context(conf: dict) -> EmsContext:
    p = load_params(conf["params"]) if conf.get("params") else PowertrainParams()
    emap = (load_engine_map(conf["map"], p_max=p.P_e_max) if conf.get("map")
            else default_engine_map(p.P_e_max))
    w = CostWeights(conf["delta"], conf["soc_ref"], conf["reward_scale"], conf["terminal_weight"])
    return EmsContext(p, emap, w)


def build_cycle(spec: str, dt: float) -> DriveCycle:
    if spec.startswith("synth:"):
        parts = spec.split(":")
        if len(parts) != 4:
            raise ConfigError(f"synthetic cycle spec must be synth:<kind>:<duration>:<seed>, got {spec!r}")
        return synth_cycle(parts[1], int(parts[2]), int(parts[3]), dt)
    return load_cycle(spec, dt)


def train_config(conf: dict, seed: int) -> TrainConfig:
    kw = {f.name: conf[f.name] for f in dataclasses.fields(TrainConfig)
          if f.name in conf and f.name not in ("seed",)}
    return TrainConfig(seed=int(seed), **kw)


def out_root(args_out: str | None) -> Path:
    return Path(args_out or os.environ.get(OUT_ENV) or "runs")


def make_run_dir(root: Path, strategy: str, cycle: str, seed, run_name: str | None = None) -> Path:
    safe = cycle.replace("/", "_").replace("[", "_").replace("]", "_").replace(":", "_")
    base = run_name or f"{strategy}_{safe}_{seed}_{time.strftime('%Y%m%dT%H%M%S')}"
    path = root / base
    k = 1
    while path.exists():
        path = root / f"{base}.{k}"
        k += 1
    path.mkdir(parents=True)
    return path


def _file_logger(run: Path) -> logging.Handler:
    h = logging.FileHandler(run / "run.log", encoding="utf-8")
    h.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    h.setLevel(logging.INFO)
    if log.getEffectiveLevel() > logging.INFO:
        log.setLevel(logging.INFO)
    log.addHandler(h)
    return h


# -- commands ---------------------------------------------------------------------

def cmd_dp(conf: dict, root: Path, run_name: str | None = None) -> Path:
    cycle = build_cycle(conf["cycle"], conf["dt"])
    ctx = build_context(conf)
    run = make_run_dir(root, "dp", cycle.name, 0, run_name)
    write_snapshot(conf, "dp", run / "config.txt")
    handler = _file_logger(run)
    try:
        t0 = time.perf_counter()
        cfg = DpConfig(conf["soc_points"], conf["action_points"], conf["terminal_weight"])
        grid = solve(cycle, cfg, ctx)
        expert, trace = extract_trajectory(grid, cycle, conf["soc0"], ctx)
        seconds = time.perf_counter() - t0
        save_value_grid(grid, run / "value_grid.npz")
        if conf["dump_csv"]:
            save_value_grid_csv(grid, run / "value_grid.csv")
        save_expert(expert, run / "expert.csv")
        write_trace_csv(trace, run / "trace.csv")
        write_operating_points_csv(trace, ctx.emap, run / "operating_points.csv")
        rep = report_from_trace("dp", cycle, trace, ctx, seconds=seconds)
        save_report(with_traces(rep, ["trace.csv", "expert.csv"]), run / "report.json")
        log.info("dp %s: cost %.4f fuel %.2f g final soc %.4f in %.2f s", cycle.name,
                 trace.total_cost, trace.fuel_grams, trace.soc[-1], seconds)
    finally:
        log.removeHandler(handler)
        handler.close()
    return run


def _train_one(conf: dict, seed: int, root: str, run_name: str | None) -> tuple[str, bool]:
    """Train one seed into its own run directory; returns (run dir, diverged)."""
    cycle = build_cycle(conf["cycle"], conf["dt"])
    ctx = build_context(conf)
    strategy = conf["strategy"]
    run = make_run_dir(Path(root), strategy, cycle.name, seed, run_name)
    snap = dict(conf, seeds=(seed,), workers=1)
    write_snapshot(snap, "train", run / "config.txt")
    handler = _file_logger(run)
    cfg = train_config(conf, seed)
    try:
        guard = None
        if strategy == "ddpg_guarded":
            expert = load_expert(conf["expert"], cycle, ctx.params.P_e_max)
            guard = cfg.guard(expert)

        def progress(ep, h):
            if guard is not None:
                log.info("episode %d reward %.4f fuel %.3f soc %.4f radius %.1f guard exits %d",
                         ep, h.total_reward, h.total_fuel_g, h.final_soc, guard.radius, h.guard_exits)
            elif ep % 50 == 0 or ep == cfg.episodes - 1:
                log.info("episode %d reward %.4f fuel %.3f soc %.4f", ep, h.total_reward,
                         h.total_fuel_g, h.final_soc)

        try:
            if strategy == "dql":
                res = train_dql(cycle, None, cfg, ctx, progress)
            else:
                res = train_ddpg(cycle, guard, cfg, ctx, progress)
        except DivergenceError as exc:
            (run / "ABORTED").write_text(f"divergence: {exc}\n", encoding="utf-8")
            log.error("seed %d aborted: %s", seed, exc)
            return str(run), True
        write_reward_csv(res.history, run / "rewards.csv")
        save_checkpoint(run / "checkpoint.npz", **res.nets)
        write_trace_csv(res.trace, run / "trace.csv")
        write_operating_points_csv(res.trace, ctx.emap, run / "operating_points.csv")
        rep = report_from_trace(strategy, cycle, res.trace, ctx, history=res.rewards,
                                seconds=res.seconds, training_cycle=cycle.name, seed=seed)
        save_report(with_traces(rep, ["trace.csv", "rewards.csv"]), run / "report.json")
        log.info("%s seed %d: cost %.4f eq. fuel %.2f g in %.1f s", strategy, seed,
                 rep.total_cost, rep.equivalent_fuel_g, res.seconds)
    finally:
        log.removeHandler(handler)
        handler.close()
    return str(run), False


def cmd_train(conf: dict, root: Path, run_name: str | None = None) -> tuple[list[Path], bool]:
    if conf["strategy"] not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {STRATEGIES}, got {conf['strategy']!r}")
    if conf["strategy"] == "ddpg_guarded":
        if not conf.get("expert"):
            raise ConfigError("ddpg_guarded needs an expert file (set expert = <dp run>/expert.csv)")
        if not Path(conf["expert"]).is_file():
            raise FileNotFoundError(f"expert file not found: {conf['expert']}")
    seeds = conf["seeds"]
    if not seeds:
        raise ConfigError("seeds must list at least one seed")
    if run_name is not None and len(seeds) > 1:
        raise ConfigError("--run-name needs a single seed")
    if conf["workers"] > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=conf["workers"]) as ex:
            results = list(ex.map(_train_one, [conf] * len(seeds), seeds,
                                  [str(root)] * len(seeds), [run_name] * len(seeds)))
    else:
        results = [_train_one(conf, s, str(root), run_name) for s in seeds]
    return [Path(r) for r, _ in results], any(d for _, d in results)


def _checkpoint_paths(spec: str) -> tuple[Path, Path | None]:
    p = Path(spec)
    if p.is_dir():
        ck = p / "checkpoint.npz"
        snap = p / "config.txt"
    else:
        ck = p
        snap = p.parent / "config.txt"
    if not ck.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ck}")
    return ck, snap if snap.is_file() else None


def cmd_eval(conf: dict, root: Path, run_name: str | None = None) -> Path:
    if not conf.get("checkpoint"):
        raise ConfigError("eval needs checkpoint = <file or training run dir>")
    ck, snap = _checkpoint_paths(conf["checkpoint"])
    nets = load_checkpoint(ck)
    training_cycle, strategy, seed = None, "unknown", None
    if snap is not None:
        tconf = read_config_file(snap)
        tcyc = build_cycle(tconf.get("cycle", KEYS["cycle"][1]), float(tconf.get("dt", 1.0)))
        training_cycle = tcyc.name
        strategy = tconf.get("strategy", strategy)
        seed = _seeds(tconf.get("seeds", "0"))[0]
    if "actor" in nets:
        net = nets["actor"]
        if net.n_in != 3 or net.n_out != 1 or not net.tanh_out:
            raise ConfigError("checkpoint actor does not match the 3-input tanh actor layout")
    elif "q" in nets:
        net = nets["q"]
        if net.n_in != 3:
            raise ConfigError("checkpoint Q-network does not take the 3-dim state")
    else:
        raise ConfigError(f"checkpoint holds neither an actor nor a Q-network: {sorted(nets)}")
    cycle = build_cycle(conf["cycle"], conf["dt"])
    ctx = build_context(conf)
    run = make_run_dir(root, f"eval-{strategy}", cycle.name, seed if seed is not None else 0, run_name)
    write_snapshot(conf, "eval", run / "config.txt")
    t0 = time.perf_counter()
    trace = rollout_policy(net, cycle, conf["soc0"], ctx)
    rep = report_from_trace(strategy, cycle, trace, ctx, seconds=time.perf_counter() - t0,
                            training_cycle=training_cycle, seed=seed)
    write_trace_csv(trace, run / "trace.csv")
    write_operating_points_csv(trace, ctx.emap, run / "operating_points.csv")
    save_report(with_traces(rep, ["trace.csv"]), run / "report.json")
    if rep.cross_cycle:
        log.info("evaluated on %s, trained on %s (cycle != training_cycle)", cycle.name, training_cycle)
    log.info("eval %s on %s: cost %.4f eq. fuel %.2f g, %d flagged steps", strategy, cycle.name,
             rep.total_cost, rep.equivalent_fuel_g, rep.infeasible_steps)
    return run


def cmd_compare(conf: dict, root: Path, run_name: str | None = None) -> Path:
    runs = [Path(r) for r in conf["runs"]]
    if len(runs) < 2:
        raise ConfigError("compare needs at least two run directories")
    reports = []
    for r in runs:
        if not (r / "report.json").is_file():
            raise FileNotFoundError(f"no report.json in {r}")
        reports.append(load_report(r / "report.json"))
    cmp = compare(reports)
    out = make_run_dir(root, "compare", reports[0].cycle, len(runs), run_name)
    write_snapshot(conf, "compare", out / "config.txt")
    write_comparison_csv(cmp, out / "comparison.csv")
    cmp_eq = compare(reports, metric="equivalent_fuel_g")
    (out / "ordering.json").write_text(json.dumps(
        {"total_cost": cmp.flags, "equivalent_fuel_g": cmp_eq.flags}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    # plot data: SoC traces side by side, reward curves, operating points
    labels = [f"{rep.strategy}_{rep.seed if rep.seed is not None else 0}_{i}" for i, rep in enumerate(reports)]
    traces = [read_trace_csv(r / "trace.csv") if (r / "trace.csv").is_file() else None for r in runs]
    with open(out / "soc_traces.csv", "w", encoding="utf-8") as fh:
        have = [(lab, tr) for lab, tr in zip(labels, traces) if tr is not None]
        if have:
            fh.write("t," + ",".join(lab for lab, _ in have) + "\n")
            n = min(len(tr["t"]) for _, tr in have)
            for i in range(n):
                fh.write(repr(float(have[0][1]["t"][i])) + ","
                         + ",".join(repr(float(tr["soc"][i])) for _, tr in have) + "\n")
    curves = [(lab, read_reward_csv(r / "rewards.csv")) for lab, r in zip(labels, runs)
              if (r / "rewards.csv").is_file()]
    if curves:
        with open(out / "reward_curves.csv", "w", encoding="utf-8") as fh:
            fh.write("episode," + ",".join(lab for lab, _ in curves) + "\n")
            n = max(len(c) for _, c in curves)
            for i in range(n):
                vals = [repr(float(c[i, 1])) if i < len(c) else "" for _, c in curves]
                fh.write(f"{i}," + ",".join(vals) + "\n")
    for lab, r in zip(labels, runs):
        if (r / "operating_points.csv").is_file():
            (out / f"operating_points_{lab}.csv").write_bytes((r / "operating_points.csv").read_bytes())
    write_efficiency_map_csv(default_engine_map(), out / "efficiency_map.csv")
    for name, ok in cmp.flags.items():
        log.info("ordering %s: %s", name, "pass" if ok else "FAIL")
    return out


def cmd_gen_cycle(conf: dict) -> Path:
    cyc = synth_cycle(conf["kind"], conf["duration"], conf["seed"], conf["dt"])
    path = Path(conf["output"] or f"{cyc.name}.csv")
    save_cycle(cyc, path)
    return path


# -- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hevlab", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"dp": "solve DP, write value grid, expert and traces",
             "train": "train dql / ddpg / ddpg_guarded, one run directory per seed",
             "eval": "guard-free greedy rollout of a checkpoint on a cycle",
             "compare": "cross-strategy table, ordering flags and plot data",
             "gen-cycle": "write a synthetic drive cycle CSV"}
    for name, help_ in helps.items():
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="flat key = value config file (flags override it)")
        if name != "gen-cycle":
            sp.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
            sp.add_argument("--run-name", help="fixed run directory name instead of the timestamped one")
        for k in keys_for(name):
            _, default, help_k = KEYS[k]
            sp.add_argument("--" + k.replace("_", "-"), dest=k, default=None,
                            help=f"{help_k} (default: {_fmt(default)})")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cli = {k: v for k, v in vars(args).items() if k in KEYS and v is not None}
        conf = resolve(args.command, file_values, cli)
        if args.command == "gen-cycle":
            print(cmd_gen_cycle(conf))
            return 0
        root = out_root(args.out)
        if args.command == "dp":
            print(cmd_dp(conf, root, args.run_name))
        elif args.command == "train":
            runs, diverged = cmd_train(conf, root, args.run_name)
            for r in runs:
                print(r)
            if diverged:
                return EXIT_DIVERGED
        elif args.command == "eval":
            print(cmd_eval(conf, root, args.run_name))
        elif args.command == "compare":
            print(cmd_compare(conf, root, args.run_name))
    except (ConfigError, CycleError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"hevlab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
