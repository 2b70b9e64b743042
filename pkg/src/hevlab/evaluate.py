"""Cross-strategy evaluation: SoC-corrected fuel, fuel economy, convergence
speed, operating-point statistics and report files."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .cycle_io import DriveCycle
from .ems_mdp import EmsContext, Trace
from .powertrain import EngineMap, PowertrainParams, engine_op_point

FUEL_DENSITY = 0.7505        # kg/L
METERS_PER_MILE = 1609.344
LITERS_PER_GALLON = 3.785411784
STRATEGY_ORDER = ("dp", "ddpg_guarded", "ddpg", "dql")
TRACE_HEADER = ("t", "v", "pd_w", "pe_w", "pb_w", "soc", "fuel_gps")
REWARD_HEADER = ("episode", "total_reward", "total_fuel_g", "final_soc")


class EvaluationError(ValueError):
    pass


def equivalent_fuel(raw_fuel_g: float, soc0: float, socN: float, p: PowertrainParams,
                    emap: EngineMap, eta: float | None = None) -> float:
    """Raw fuel corrected for the net change in stored charge.

    The charge change ``(socN - soc0) * Q_c`` at ``V_oc`` is converted to
    fuel through the mean operating-line efficiency (or ``eta``) and the
    map's lower heating value: surplus charge is credited, deficit debited.
    """
    eta = emap.mean_ool_efficiency if eta is None else float(eta)
    if not eta > 0:
        raise EvaluationError("equivalence efficiency must be positive")
    energy = (socN - soc0) * p.Q_c * p.V_oc
    return float(raw_fuel_g - energy / (eta * emap.lhv))


def soc_equivalence_slope(p: PowertrainParams, emap: EngineMap, eta: float | None = None) -> float:
    """Grams of fuel per unit SoC."""
    eta = emap.mean_ool_efficiency if eta is None else float(eta)
    return p.Q_c * p.V_oc / (eta * emap.lhv)


def mpg(fuel_g: float, cycle: DriveCycle | float, density: float = FUEL_DENSITY) -> float:
    """Miles per US gallon.  Zero fuel returns ``math.inf`` (infinite economy)."""
    distance = cycle.distance if isinstance(cycle, DriveCycle) else float(cycle)
    if not distance > 0:
        raise EvaluationError("fuel economy needs a positive travelled distance")
    if fuel_g < 0:
        raise EvaluationError("fuel mass must be non-negative")
    if fuel_g == 0:
        return math.inf
    gallons = fuel_g / (density * 1000.0) / LITERS_PER_GALLON
    return distance / METERS_PER_MILE / gallons


def trailing_means(history, window: int = 20) -> np.ndarray:
    h = np.asarray(history, dtype=np.float64)
    if len(h) < window:
        raise EvaluationError(f"history of {len(h)} episodes is shorter than the window {window}")
    c = np.concatenate(([0.0], np.cumsum(h)))
    return (c[window:] - c[:-window]) / window


def convergence_episode(history, fraction: float = 0.95, window: int = 20) -> int:
    """First window start whose trailing mean reaches ``fraction`` of the way
    from the worst trailing mean to the final one."""
    m = trailing_means(history, window)
    worst, final = m.min(), m[-1]
    threshold = worst + fraction * (final - worst)
    # small slack so a flat history converges at its first window
    tol = 1e-12 * max(1.0, abs(threshold))
    return int(np.flatnonzero(m >= threshold - tol)[0])


def band_mass(pe, emap: EngineMap, rel: float = 0.95) -> float:
    """Share of engine-on samples whose power lies in the map's top-efficiency band."""
    pe = np.asarray(pe, dtype=np.float64)
    on = pe > 0
    if not on.any():
        return 0.0
    lo, hi = emap.efficiency_band(rel)
    return float(np.mean((pe[on] >= lo) & (pe[on] <= hi)))


@dataclass
class RunReport:
    strategy: str
    cycle: str
    raw_fuel_g: float
    soc0: float
    socN: float
    equivalent_fuel_g: float
    mpg: float
    total_cost: float
    episodes_to_95: int | None = None
    wall_seconds: float | None = None
    traces: list[str] = field(default_factory=list)
    training_cycle: str | None = None
    infeasible_steps: int = 0
    band_mass: float | None = None
    seed: int | None = None

    def __post_init__(self):
        for name in ("raw_fuel_g", "soc0", "socN", "equivalent_fuel_g", "total_cost"):
            if not math.isfinite(getattr(self, name)):
                raise EvaluationError(f"{name} must be finite")

    @property
    def cross_cycle(self) -> bool:
        return self.training_cycle is not None and self.training_cycle != self.cycle

    def to_json(self) -> dict:
        d = asdict(self)
        d["mpg"] = "infinite" if math.isinf(self.mpg) else self.mpg
        d["cross_cycle"] = self.cross_cycle
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunReport":
        d = dict(d)
        d.pop("cross_cycle", None)
        if d.get("mpg") == "infinite":
            d["mpg"] = math.inf
        return cls(**d)


def report_from_trace(strategy: str, cycle: DriveCycle, trace: Trace, ctx: EmsContext,
                      history=None, seconds: float | None = None,
                      training_cycle: str | None = None, seed: int | None = None) -> RunReport:
    raw = trace.fuel_grams
    soc0, socN = float(trace.soc[0]), float(trace.soc[-1])
    eq = equivalent_fuel(raw, soc0, socN, ctx.params, ctx.emap)
    conv = None
    if history is not None and len(history) >= 20:
        conv = convergence_episode(history)
    return RunReport(strategy, cycle.name, raw, soc0, socN, eq, mpg(max(eq, 0.0), cycle),
                     float(trace.total_cost), conv, seconds, [], training_cycle,
                     trace.infeasible_steps, band_mass(trace.pe, ctx.emap), seed)


def save_report(report: RunReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_report(path) -> RunReport:
    return RunReport.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# -- comparison -------------------------------------------------------------------

@dataclass
class Comparison:
    rows: list[dict]
    flags: dict[str, bool]
    metric: str

    @property
    def ordering_ok(self) -> bool:
        return all(self.flags.values())


def _rank(strategy: str) -> int:
    return STRATEGY_ORDER.index(strategy) if strategy in STRATEGY_ORDER else len(STRATEGY_ORDER)


def compare(reports, metric: str = "total_cost") -> Comparison:
    """Table keyed by strategy with gaps relative to DP and ordering flags.

    Flags check the expected ordering ``dp <= ddpg_guarded <= ddpg <= dql``
    on the mean of ``metric`` for every adjacent pair present; violations
    are reported, not raised.
    """
    reports = list(reports)
    if len(reports) < 2:
        raise EvaluationError("need at least two reports to compare")
    cycles = {r.cycle for r in reports}
    if len(cycles) != 1:
        raise EvaluationError(f"reports span different cycles: {sorted(cycles)}")
    means: dict[str, list[float]] = {}
    for r in reports:
        means.setdefault(r.strategy, []).append(float(getattr(r, metric)))
    mean = {k: float(np.mean(v)) for k, v in means.items()}
    base = mean.get("dp")
    rows = []
    for r in sorted(reports, key=lambda r: (_rank(r.strategy), r.strategy, r.seed or 0)):
        row = r.to_json()
        value = float(getattr(r, metric))
        row["gap_vs_dp"] = None if base is None else (value - base) / base
        rows.append(row)
    present = sorted(mean, key=_rank)
    present = [s for s in present if s in STRATEGY_ORDER]
    flags = {f"{a}<={b}": mean[a] <= mean[b] for a, b in zip(present, present[1:])}
    return Comparison(rows, flags, metric)


COMPARISON_COLUMNS = ("strategy", "cycle", "seed", "total_cost", "raw_fuel_g", "equivalent_fuel_g",
                      "mpg", "soc0", "socN", "gap_vs_dp", "episodes_to_95", "wall_seconds",
                      "band_mass", "infeasible_steps", "training_cycle")


def write_comparison_csv(cmp: Comparison, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARISON_COLUMNS)
        for row in cmp.rows:
            w.writerow(["" if row.get(c) is None else row.get(c) for c in COMPARISON_COLUMNS])
        for name, ok in cmp.flags.items():
            w.writerow([f"# ordering {name} on {cmp.metric}: {'pass' if ok else 'FAIL'}"])


# -- plot-data files ----------------------------------------------------------------

def write_trace_csv(trace: Trace, path) -> None:
    n = len(trace.pe)
    cols = [trace.t[:n], trace.v[:n], trace.pd, trace.pe, trace.pb, trace.soc[:n], trace.fuel]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(TRACE_HEADER) + "\n")
        for row in zip(*(np.asarray(c, dtype=np.float64).tolist() for c in cols)):
            fh.write(",".join(repr(x) for x in row) + "\n")


def read_trace_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != TRACE_HEADER:
        raise EvaluationError(f"{path}: unexpected trace header")
    data = np.array(rows[1:], dtype=np.float64)
    return {k: data[:, i] for i, k in enumerate(TRACE_HEADER)}


def write_reward_csv(history, path) -> None:
    """``history``: sequence of objects with total_reward / total_fuel_g / final_soc."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(REWARD_HEADER) + "\n")
        for k, h in enumerate(history):
            fh.write(f"{k},{float(h.total_reward)!r},{float(h.total_fuel_g)!r},"
                     f"{float(h.final_soc)!r}\n")


def read_reward_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != REWARD_HEADER:
        raise EvaluationError(f"{path}: unexpected reward header")
    return np.array(rows[1:], dtype=np.float64)


def write_operating_points_csv(trace: Trace, emap: EngineMap, path) -> None:
    """Engine speed/torque/efficiency per engine-on sample."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("t,pe_w,speed_rpm,torque_nm,efficiency\n")
        for t, pe in zip(trace.t.tolist(), trace.pe.tolist()):
            if pe <= 0:
                continue
            w, T, f = engine_op_point(min(pe, emap.p_max), emap)
            eff = pe / (f * emap.lhv) if f > 0 else 0.0
            fh.write(f"{t!r},{pe!r},{w * 60 / (2 * math.pi)!r},{T!r},{eff!r}\n")


def write_efficiency_map_csv(emap: EngineMap, path) -> None:
    """Long-format efficiency grid for contour plots (blank beyond full load)."""
    eff = emap.efficiency_grid()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("speed_rpm,torque_nm,efficiency\n")
        for i, w in enumerate(emap.speed_grid.tolist()):
            for j, T in enumerate(emap.torque_grid.tolist()):
                e = eff[i, j]
                fh.write(f"{w * 60 / (2 * math.pi)!r},{T!r},{'' if np.isnan(e) else repr(float(e))}\n")


def aggregate(reports, metric: str) -> dict[str, dict[str, float]]:
    """Per-strategy mean / min / max of ``metric`` across seeds."""
    out: dict[str, list[float]] = {}
    for r in reports:
        out.setdefault(r.strategy, []).append(float(getattr(r, metric)))
    return {k: {"mean": float(np.mean(v)), "min": float(np.min(v)), "max": float(np.max(v)),
                "n": len(v)} for k, v in out.items()}


def with_traces(report: RunReport, paths) -> RunReport:
    return replace(report, traces=[str(p) for p in paths])
