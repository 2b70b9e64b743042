"""Drive cycles and expert engine-power trajectories: loading, resampling,
saving and synthetic generation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SYNTH_KINDS = ("pulse", "urban_like", "highway_like")
MAX_SYNTH_SPEED = 35.0
MAX_SYNTH_ACCEL = 3.0


class CycleError(ValueError):
    """Malformed or inconsistent cycle / expert data."""


def _forward_accel(speed: np.ndarray, dt: float) -> np.ndarray:
    accel = np.zeros_like(speed)
    accel[:-1] = np.diff(speed) / dt
    return accel


@dataclass(frozen=True)
class DriveCycle:
    name: str
    dt: float
    speed: np.ndarray
    accel: np.ndarray = field(default=None)

    def __post_init__(self):
        speed = np.ascontiguousarray(self.speed, dtype=np.float64)
        if speed.ndim != 1 or len(speed) < 1:
            raise CycleError("a drive cycle needs at least one sample")
        if not self.dt > 0:
            raise CycleError(f"dt must be positive, got {self.dt}")
        if np.any(speed < 0) or not np.all(np.isfinite(speed)):
            raise CycleError("speeds must be finite and non-negative")
        speed.setflags(write=False)
        object.__setattr__(self, "speed", speed)
        accel = _forward_accel(speed, self.dt)
        accel.setflags(write=False)
        object.__setattr__(self, "accel", accel)
        object.__setattr__(self, "dt", float(self.dt))

    def __len__(self) -> int:
        return len(self.speed)

    @property
    def time(self) -> np.ndarray:
        return np.arange(len(self.speed)) * self.dt

    @property
    def duration(self) -> float:
        return (len(self.speed) - 1) * self.dt

    @property
    def distance(self) -> float:
        """Travelled distance in metres (trapezoidal integral of speed)."""
        return float(np.trapezoid(self.speed, dx=self.dt))

    def slice(self, start: int, stop: int | None = None) -> "DriveCycle":
        return DriveCycle(f"{self.name}[{start}:{stop if stop is not None else ''}]",
                          self.dt, self.speed[start:stop])


@dataclass(frozen=True)
class ExpertPolicy:
    cycle_name: str
    dt: float
    engine_power: np.ndarray

    def __post_init__(self):
        pe = np.ascontiguousarray(self.engine_power, dtype=np.float64)
        pe.setflags(write=False)
        object.__setattr__(self, "engine_power", pe)

    def __len__(self) -> int:
        return len(self.engine_power)


def resample(time: np.ndarray, values: np.ndarray, dt: float) -> np.ndarray:
    """Linear interpolation of ``values`` onto a uniform grid starting at time[0]."""
    time = np.asarray(time, dtype=np.float64)
    n = int(np.floor((time[-1] - time[0]) / dt + 1e-9)) + 1
    grid = time[0] + np.arange(n) * dt
    return np.interp(grid, time, np.asarray(values, dtype=np.float64))


def resample_cycle(cycle: DriveCycle, dt: float) -> DriveCycle:
    if dt == cycle.dt:
        return cycle
    return DriveCycle(cycle.name, dt, resample(cycle.time, cycle.speed, dt))


def _read_two_columns(path, header: tuple[str, str]) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise CycleError(f"{path}: empty file")
    got = tuple(c.strip() for c in rows[0])
    if got != header:
        raise CycleError(f"{path}: expected header {','.join(header)}, got {','.join(got)}")
    try:
        data = np.array([[float(c) for c in r] for r in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise CycleError(f"{path}: non-numeric value ({exc})") from None
    if data.ndim != 2 or len(data) < 2 or data.shape[1] != 2:
        raise CycleError(f"{path}: need at least 2 rows of 2 columns")
    t, x = data[:, 0], data[:, 1]
    if np.any(np.diff(t) <= 0):
        raise CycleError(f"{path}: timestamps must be strictly increasing")
    return t, x


def load_cycle(path, dt: float = 1.0, name: str | None = None) -> DriveCycle:
    t, v = _read_two_columns(path, ("t", "v"))
    if np.any(v < 0):
        raise CycleError(f"{path}: negative speed")
    return DriveCycle(name or Path(path).stem, dt, resample(t, v, dt))


def save_cycle(cycle: DriveCycle, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("t,v\n")
        for t, v in zip(cycle.time.tolist(), cycle.speed.tolist()):
            fh.write(f"{t!r},{v!r}\n")


def load_expert(path, cycle: DriveCycle, pe_max: float = 57000.0) -> ExpertPolicy:
    t, pe_kw = _read_two_columns(path, ("t", "pe_kw"))
    pe = resample(t, pe_kw, cycle.dt) * 1000.0
    if len(pe) != len(cycle):
        raise CycleError(
            f"{path}: expert has {len(pe)} samples after resampling, cycle has {len(cycle)}")
    # float noise from the kW round trip is tolerated, real excursions are not
    tol = 1e-6
    if np.any(pe < -tol) or np.any(pe > pe_max + tol):
        raise CycleError(f"{path}: engine power outside [0, {pe_max / 1000:g}] kW")
    return ExpertPolicy(cycle.name, cycle.dt, np.clip(pe, 0.0, pe_max))


def save_expert(expert: ExpertPolicy, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("t,pe_kw\n")
        for k, pe in enumerate(expert.engine_power.tolist()):
            fh.write(f"{k * expert.dt!r},{pe / 1000.0!r}\n")


# -- synthetic cycles ---------------------------------------------------------

def _pulse_template() -> np.ndarray:
    # 60 samples: 10 s ramp 0->15 m/s, 30 s cruise, 10 s ramp down, 10 s stop
    up = np.linspace(0.0, 15.0, 11)
    cruise = np.full(29, 15.0)
    down = np.linspace(15.0, 0.0, 11)
    stop = np.zeros(9)
    return np.concatenate([up, cruise, down, stop])


def _ramp(v0: float, v1: float, accel: float) -> np.ndarray:
    steps = max(1, int(np.ceil(abs(v1 - v0) / accel)))
    return np.linspace(v0, v1, steps + 1)[1:]


def _urban(duration: int, rng: np.random.Generator) -> np.ndarray:
    v = [0.0]
    while len(v) < duration:
        v.extend([0.0] * int(rng.integers(5, 16)))
        target = float(rng.uniform(8.0, 20.0))
        v.extend(_ramp(0.0, target, float(rng.uniform(0.8, 2.0))))
        cruise = int(rng.integers(15, 45))
        wobble = target + np.cumsum(rng.normal(0.0, 0.25, cruise))
        v.extend(np.clip(wobble, 0.5 * target, 20.0))
        v.extend(_ramp(v[-1], 0.0, float(rng.uniform(1.0, 2.5))))
    return np.asarray(v[:duration])


def _highway(duration: int, rng: np.random.Generator) -> np.ndarray:
    target = float(rng.uniform(25.0, 32.0))
    v = [0.0, *_ramp(0.0, target, float(rng.uniform(0.8, 1.4)))]
    decel_len = int(np.ceil(33.0 / 1.5)) + 5
    while len(v) < duration - decel_len:
        hold = int(rng.integers(30, 90))
        drift = v[-1] + np.cumsum(rng.normal(0.0, 0.15, hold))
        v.extend(np.clip(drift, 15.0, 33.0))
        nxt = float(rng.uniform(18.0, 33.0))
        v.extend(_ramp(v[-1], nxt, float(rng.uniform(0.4, 1.0))))
    v = v[:duration - decel_len]
    tail = list(_ramp(v[-1], 0.0, 1.5))
    v.extend(tail)
    v.extend([0.0] * (duration - len(v)))
    return np.asarray(v[:duration])


def synth_cycle(kind: str, duration: int = 600, seed: int = 0, dt: float = 1.0) -> DriveCycle:
    """Deterministic synthetic cycle sampled at ``dt`` (templates are built at 1 s).

    ``pulse`` repeats a 60 s trapezoid (0 -> 15 -> 0 m/s).  ``urban_like``
    chains stop / accelerate / cruise / brake phases below 20 m/s.
    ``highway_like`` cruises between 15 and 33 m/s and ends at standstill.
    """
    if kind not in SYNTH_KINDS:
        raise CycleError(f"unknown cycle kind {kind!r}; choose from {SYNTH_KINDS}")
    duration = int(duration)
    if duration < 60:
        raise CycleError("synthetic cycles need a duration of at least 60 s")
    rng = np.random.default_rng(seed)
    if kind == "pulse":
        reps = int(np.ceil(duration / 60))
        speed = np.tile(_pulse_template(), reps)[:duration]
    elif kind == "urban_like":
        speed = _urban(duration, rng)
    else:
        speed = _highway(duration, rng)
    cycle = DriveCycle(f"{kind}_{duration}_s{seed}", 1.0, np.round(speed, 6))
    return resample_cycle(cycle, dt)
