"""Series-parallel powertrain physics: road-load demand, internal-resistance
battery, static engine fuel map and the engine/battery power split."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields, replace
from functools import cached_property
from pathlib import Path

import numpy as np

RPM = 2.0 * math.pi / 60.0
LHV_GASOLINE = 42.5e3  # J/g

# flags
SAT_BATTERY = 1
SAT_SOC = 2


class PhysicsError(ValueError):
    """Inputs outside the physical domain of the model."""


@dataclass(frozen=True)
class PowertrainParams:
    M_v: float = 1325.0
    rho: float = 1.225
    f_roll: float = 0.012
    A_a: float = 2.16
    C_D: float = 0.26
    g: float = 9.8
    V_oc: float = 200.0
    r_0: float = 0.25
    Q_c: float = 8.1 * 3600.0
    soc_min: float = 0.2
    soc_max: float = 0.9
    P_e_max: float = 57000.0
    P_b_min: float = -30000.0
    P_b_max: float = 30000.0
    eta_elec: float = 0.9

    def __post_init__(self):
        for name in ("M_v", "rho", "A_a", "C_D", "g", "V_oc", "r_0", "Q_c", "P_e_max", "eta_elec"):
            if not getattr(self, name) > 0:
                raise PhysicsError(f"{name} must be strictly positive")
        if self.f_roll < 0:
            raise PhysicsError("f_roll must be non-negative")
        if not 0.0 <= self.soc_min < self.soc_max <= 1.0:
            raise PhysicsError("need 0 <= soc_min < soc_max <= 1")
        if not self.P_b_min < 0 < self.P_b_max:
            raise PhysicsError("battery power limits must bracket zero")
        if self.P_b_max > self.p_b_physical:
            raise PhysicsError(
                f"P_b_max={self.P_b_max} exceeds the battery limit V_oc^2/(4 r_0)={self.p_b_physical}")
        if self.eta_elec > 1:
            raise PhysicsError("eta_elec must be <= 1")

    @property
    def p_b_physical(self) -> float:
        return self.V_oc ** 2 / (4.0 * self.r_0)

    @property
    def battery_energy(self) -> float:
        """Nominal stored energy per unit SoC, in joules."""
        return self.Q_c * self.V_oc


def load_params(path) -> PowertrainParams:
    """Read a flat ``key = value`` file; unknown keys are an error."""
    known = {f.name for f in fields(PowertrainParams)}
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PhysicsError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise PhysicsError(f"{path}:{lineno}: unknown parameter {key!r}")
        values[key] = float(val)
    return replace(PowertrainParams(), **values)


def save_params(p: PowertrainParams, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in fields(p):
            fh.write(f"{f.name} = {float(getattr(p, f.name))!r}\n")


# -- vehicle and battery ------------------------------------------------------

def power_demand(v, a, p: PowertrainParams):
    """Rolling + aerodynamic + inertial power at the wheels (W).

    Works elementwise on arrays; negative results mean braking power.
    """
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0):
        raise PhysicsError("vehicle speed must be non-negative")
    p_roll = p.f_roll * p.M_v * p.g * v
    p_aero = 0.5 * p.rho * p.A_a * p.C_D * v * v * v
    p_inertia = p.M_v * np.asarray(a, dtype=np.float64) * v
    out = p_roll + p_aero + p_inertia
    return float(out) if out.ndim == 0 else out


def battery_current(P_b: float, p: PowertrainParams) -> float:
    """Terminal current (A, positive on discharge) delivering ``P_b`` watts."""
    disc = p.V_oc * p.V_oc - 4.0 * p.r_0 * P_b
    if disc < 0:
        raise PhysicsError(f"battery cannot deliver {P_b:.1f} W (limit {p.p_b_physical:.1f} W)")
    # rationalized root; equal to (V - sqrt(disc)) / (2 r) without cancellation near 0
    return 2.0 * P_b / (p.V_oc + math.sqrt(disc))


def soc_rate(P_b: float, p: PowertrainParams) -> float:
    return -battery_current(P_b, p) / p.Q_c


def soc_step(soc: float, P_b: float, dt: float, p: PowertrainParams) -> tuple[float, bool]:
    """Explicit Euler SoC update; returns (new_soc, clamped)."""
    nxt = soc - dt * battery_current(P_b, p) / p.Q_c
    if nxt < p.soc_min:
        return p.soc_min, True
    if nxt > p.soc_max:
        return p.soc_max, True
    return nxt, False


def split_power(P_d: float, P_e: float, p: PowertrainParams) -> tuple[float, bool]:
    """Battery power for demand ``P_d`` with the engine supplying ``P_e``.

    Discharge is divided by the electric-path efficiency, charging multiplied
    by it.  The result is clamped to the battery limits; the flag reports
    saturation.
    """
    net = P_d - P_e
    P_b = net / p.eta_elec if net >= 0 else net * p.eta_elec
    if P_b > p.P_b_max:
        return p.P_b_max, True
    if P_b < p.P_b_min:
        return p.P_b_min, True
    return P_b, False


def engine_for_battery(P_d: float, P_b: float, p: PowertrainParams) -> float:
    """Inverse of :func:`split_power` (unclamped): engine power giving ``P_b``."""
    return P_d - P_b * p.eta_elec if P_b >= 0 else P_d - P_b / p.eta_elec


def battery_power_for_current(I_b: float, p: PowertrainParams) -> float:
    return I_b * (p.V_oc - I_b * p.r_0)


# -- engine map ---------------------------------------------------------------

PEAK_EFFICIENCY = 0.35
PEAK_SPEED = 3500.0 * RPM
PEAK_TORQUE = 100.0


def _bowl_fuel(w, T, lhv):
    """Synthetic fuel rate (g/s) at speed ``w`` (rad/s) and torque ``T`` (N m).

    Brake efficiency is a quadratic bowl peaking at 35 % at 3500 rpm / 100 N m
    (36.7 kW, about 65 % of rated power).  The torque curvature is kept below
    the speed-adjusted peak so fuel rate rises strictly with torque at every
    speed, and fuel goes to zero with torque (engine off at zero power).
    """
    dw = (w - PEAK_SPEED) / PEAK_SPEED
    dt = T / PEAK_TORQUE - 1.0
    eff = PEAK_EFFICIENCY * (1.0 - 0.5 * dw * dw - 0.6 * dt * dt)
    eff = np.maximum(eff, 0.02)
    return w * T / (eff * lhv)


def _default_torque_max(w):
    # 80 N m at 1000 rpm, 115 N m peak at 4200 rpm, 57 kW at 5000 rpm
    rpm = np.asarray(w) / RPM
    return np.interp(rpm, [1000.0, 2500.0, 4200.0, 5000.0],
                     [80.0, 105.0, 115.0, 57000.0 / (5000.0 * RPM)])


class EngineMap:
    """Gridded fuel-rate map plus its minimum-fuel operating line (OOL).

    ``fuel_rate[i, j]`` is the fuel rate at ``speed_grid[i]`` and
    ``torque_grid[j]``; ``torque_max[i]`` bounds the feasible torque at each
    speed.  The OOL is tabulated on ``ool_power`` and queried by linear
    interpolation in power.
    """

    def __init__(self, speed_grid, torque_grid, fuel_rate, torque_max,
                 lhv: float = LHV_GASOLINE, p_max: float | None = None, ool_points: int = 1141):
        self.speed_grid = np.asarray(speed_grid, dtype=np.float64)
        self.torque_grid = np.asarray(torque_grid, dtype=np.float64)
        self.fuel_rate = np.asarray(fuel_rate, dtype=np.float64)
        self.torque_max = np.asarray(torque_max, dtype=np.float64)
        self.lhv = float(lhv)
        if self.fuel_rate.shape != (len(self.speed_grid), len(self.torque_grid)):
            raise PhysicsError("fuel_rate shape must be (len(speed_grid), len(torque_grid))")
        if np.any(np.diff(self.speed_grid) <= 0) or np.any(np.diff(self.torque_grid) <= 0):
            raise PhysicsError("map grids must be strictly increasing")
        if np.any(self.fuel_rate[np.isfinite(self.fuel_rate)] < 0):
            raise PhysicsError("fuel rates must be non-negative")
        if self.torque_grid[0] != 0.0:
            raise PhysicsError("torque grid must start at 0 N m")
        self.p_max_map = float(np.max(self.speed_grid * self.torque_max))
        self.p_max = self.p_max_map if p_max is None else float(p_max)
        if self.p_max > self.p_max_map * (1 + 1e-12):
            raise PhysicsError(f"map peak power {self.p_max_map:.0f} W is below p_max {self.p_max:.0f} W")
        for arr in (self.speed_grid, self.torque_grid, self.fuel_rate, self.torque_max):
            arr.setflags(write=False)
        self._build_ool(ool_points)

    # bilinear interpolation on the (speed, torque) grid
    def fuel_at(self, w, T):
        w = np.asarray(w, dtype=np.float64)
        T = np.asarray(T, dtype=np.float64)
        sg, tg = self.speed_grid, self.torque_grid
        i = np.clip(np.searchsorted(sg, w, side="right") - 1, 0, len(sg) - 2)
        j = np.clip(np.searchsorted(tg, T, side="right") - 1, 0, len(tg) - 2)
        u = (w - sg[i]) / (sg[i + 1] - sg[i])
        s = (T - tg[j]) / (tg[j + 1] - tg[j])
        f = self.fuel_rate
        return ((1 - u) * (1 - s) * f[i, j] + u * (1 - s) * f[i + 1, j]
                + (1 - u) * s * f[i, j + 1] + u * s * f[i + 1, j + 1])

    def torque_limit(self, w):
        return np.interp(w, self.speed_grid, self.torque_max)

    def min_fuel_scan(self, P: float) -> tuple[float, float, float]:
        """Minimum fuel over the speed grid at exactly power ``P``."""
        if P <= 0.0:
            return float(self.speed_grid[0]), 0.0, 0.0
        T = P / self.speed_grid
        ok = T <= self.torque_max * (1 + 1e-12)
        if not np.any(ok):
            raise PhysicsError(f"power {P:.1f} W is beyond the map envelope")
        fuel = np.where(ok, self.fuel_at(self.speed_grid, np.minimum(T, self.torque_grid[-1])), np.inf)
        k = int(np.argmin(fuel))
        return float(self.speed_grid[k]), float(T[k]), float(fuel[k])

    def _build_ool(self, n: int):
        power = np.linspace(0.0, self.p_max, n)
        pts = np.array([self.min_fuel_scan(P) for P in power])
        fuel = np.maximum.accumulate(pts[:, 2])  # enforce monotone fuel in power
        self.ool_power = power
        self.ool_speed = pts[:, 0]
        self.ool_torque = pts[:, 1]
        self.ool_fuel = fuel
        for arr in (self.ool_power, self.ool_speed, self.ool_torque, self.ool_fuel):
            arr.setflags(write=False)

    @cached_property
    def ool_efficiency(self) -> np.ndarray:
        eff = np.zeros_like(self.ool_power)
        on = self.ool_fuel > 0
        eff[on] = self.ool_power[on] / (self.ool_fuel[on] * self.lhv)
        return eff

    @cached_property
    def mean_ool_efficiency(self) -> float:
        return float(np.mean(self.ool_efficiency[1:]))

    @cached_property
    def peak_efficiency(self) -> tuple[float, float]:
        """(efficiency, power) at the most efficient OOL point."""
        k = int(np.argmax(self.ool_efficiency))
        return float(self.ool_efficiency[k]), float(self.ool_power[k])

    def efficiency_band(self, rel: float = 0.95) -> tuple[float, float]:
        """Power interval whose OOL efficiency is within ``rel`` of the peak."""
        eff = self.ool_efficiency
        inside = np.flatnonzero(eff >= rel * eff.max())
        return float(self.ool_power[inside[0]]), float(self.ool_power[inside[-1]])

    def fuel_rate_for_power(self, P_e):
        """Vectorized OOL fuel rate (g/s); no range checks."""
        return np.interp(P_e, self.ool_power, self.ool_fuel)

    def efficiency_grid(self) -> np.ndarray:
        W, T = np.meshgrid(self.speed_grid, self.torque_grid, indexing="ij")
        with np.errstate(divide="ignore", invalid="ignore"):
            eff = np.where(self.fuel_rate > 0, W * T / (self.fuel_rate * self.lhv), 0.0)
        return np.where(T <= self.torque_max[:, None] + 1e-9, eff, np.nan)


def engine_op_point(P_e: float, emap: EngineMap) -> tuple[float, float, float]:
    """(speed rad/s, torque N m, fuel g/s) on the operating line for ``P_e``."""
    if not -1e-9 <= P_e <= emap.p_max * (1 + 1e-12):
        raise PhysicsError(f"engine power {P_e:.1f} W outside [0, {emap.p_max:.1f}]")
    if P_e <= 0.0:
        return 0.0, 0.0, 0.0
    pw = emap.ool_power
    w = float(np.interp(P_e, pw, emap.ool_speed))
    return w, P_e / w, float(np.interp(P_e, pw, emap.ool_fuel))


def default_engine_map(p_max: float = 57000.0, lhv: float = LHV_GASOLINE) -> EngineMap:
    """Synthetic map on 1000-5000 rpm x 0-120 N m (100 rpm x 2.5 N m cells)."""
    speed = np.arange(1000.0, 5000.0 + 1e-9, 100.0) * RPM
    torque = np.arange(0.0, 120.0 + 1e-9, 2.5)
    W, T = np.meshgrid(speed, torque, indexing="ij")
    fuel = _bowl_fuel(W, T, lhv)
    return EngineMap(speed, torque, fuel, _default_torque_max(speed), lhv=lhv, p_max=p_max)


def save_engine_map(emap: EngineMap, path) -> None:
    """CSV: first row rpm grid, first column torque grid, cells g/s; last row ``Tmax``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["T\\rpm", *[repr(float(s / RPM)) for s in emap.speed_grid]])
        for j, T in enumerate(emap.torque_grid):
            w.writerow([repr(float(T)), *[repr(float(x)) for x in emap.fuel_rate[:, j]]])
        w.writerow(["Tmax", *[repr(float(x)) for x in emap.torque_max]])


def load_engine_map(path, p_max: float | None = None, lhv: float = LHV_GASOLINE) -> EngineMap:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    rpm = np.array([float(x) for x in rows[0][1:]])
    tmax = None
    torque, cells = [], []
    for r in rows[1:]:
        if r[0].strip().lower() == "tmax":
            tmax = np.array([float(x) for x in r[1:]])
            continue
        torque.append(float(r[0]))
        cells.append([float(x) if x.strip() else np.nan for x in r[1:]])
    fuel = np.array(cells).T
    torque = np.array(torque)
    if tmax is None:
        # no explicit WOT row: highest torque with a finite cell
        finite = np.isfinite(fuel)
        tmax = np.array([torque[np.flatnonzero(col)[-1]] for col in finite])
    fuel = np.where(np.isfinite(fuel), fuel, np.inf)
    return EngineMap(rpm * RPM, torque, fuel, tmax, lhv=lhv, p_max=p_max)
