"""Energy-management MDP: states, actions, per-step cost, feasibility and a
fast per-cycle environment used by the DP forward pass and the RL learners.

Costs are in grams-equivalent: ``dt * (fuel_rate + delta * deficit**2)``
where ``deficit = soc_ref - soc`` below the reference and 0 above it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cycle_io import DriveCycle
from .powertrain import (EngineMap, PowertrainParams, default_engine_map, power_demand)

FLAG_BATTERY = 1      # battery power saturated at P_b_min / P_b_max
FLAG_SOC = 2          # SoC clamped to [soc_min, soc_max]
FLAG_INFEASIBLE = 4   # no admissible engine power; least-violating action used

INFEASIBLE_PENALTY = 1000.0  # cost added per infeasible step
TERMINAL_SCALE = 20.0        # default terminal weight = delta * TERMINAL_SCALE

_PB_TOL = 1e-9


@dataclass(frozen=True)
class EmsState:
    v: float
    a: float
    soc: float
    t: int


@dataclass(frozen=True)
class EmsAction:
    P_e: float


@dataclass(frozen=True)
class CostWeights:
    delta: float = 500.0
    soc_ref: float = 0.7
    reward_scale: float = 1.0
    terminal_weight: float | None = None

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.terminal_weight is None:
            object.__setattr__(self, "terminal_weight", self.delta * TERMINAL_SCALE)
        if self.terminal_weight < 0:
            raise ValueError("terminal_weight must be non-negative")


@dataclass(frozen=True)
class EmsContext:
    """Everything a transition needs besides the cycle."""
    params: PowertrainParams
    emap: EngineMap
    weights: CostWeights

    def __post_init__(self):
        w, p = self.weights, self.params
        if not p.soc_min <= w.soc_ref <= p.soc_max:
            raise ValueError("soc_ref must lie inside [soc_min, soc_max]")
        if self.emap.p_max < p.P_e_max * (1 - 1e-12):
            raise ValueError("engine map does not cover P_e_max")

    @classmethod
    def default(cls, **weights) -> "EmsContext":
        p = PowertrainParams()
        return cls(p, default_engine_map(p.P_e_max), CostWeights(**weights))


def soc_penalty(soc: float, w: CostWeights) -> float:
    if soc < w.soc_ref:
        d = w.soc_ref - soc
        return w.delta * d * d
    return 0.0


def step_cost(fuel_rate: float, soc: float, w: CostWeights, dt: float) -> float:
    if fuel_rate < 0:
        raise ValueError("fuel rate must be non-negative")
    return dt * (fuel_rate + soc_penalty(soc, w))


def terminal_cost(soc: float, w: CostWeights) -> float:
    d = w.soc_ref - soc
    return w.terminal_weight * d * d if d > 0 else 0.0


def reward(cost: float, w: CostWeights) -> float:
    return -w.reward_scale * cost


# -- feasibility --------------------------------------------------------------

def _battery_power_of_current(I, p: PowertrainParams) -> float:
    return I * (p.V_oc - I * p.r_0)


def battery_window(soc: float, dt: float, p: PowertrainParams) -> tuple[float, float]:
    """Battery-power interval keeping both P_b and the next SoC admissible."""
    i_peak = p.V_oc / (2.0 * p.r_0)
    i_hi = (soc - p.soc_min) * p.Q_c / dt
    i_lo = (soc - p.soc_max) * p.Q_c / dt
    hi = p.p_b_physical if i_hi >= i_peak else _battery_power_of_current(i_hi, p)
    lo = _battery_power_of_current(i_lo, p)
    return max(p.P_b_min, lo), min(p.P_b_max, hi)


def engine_window(P_d: float, soc: float, dt: float, p: PowertrainParams) -> tuple[float, float]:
    """Unclipped engine-power interval whose battery power is admissible."""
    pb_lo, pb_hi = battery_window(soc, dt, p)
    eta = p.eta_elec
    lo = P_d - (pb_hi * eta if pb_hi >= 0 else pb_hi / eta)
    hi = P_d - (pb_lo * eta if pb_lo >= 0 else pb_lo / eta)
    return lo, hi


def feasible_actions(s: EmsState, P_d: float, ctx: EmsContext, dt: float = 1.0) -> tuple[float, float]:
    """Admissible engine powers ``[lo, hi]`` within ``[0, P_e_max]``.

    While braking, surplus that the battery cannot absorb goes to the
    friction brakes, so engine-off stays admissible.  Returns ``lo > hi``
    when the interval is empty (demand beyond engine plus battery); callers
    must check.
    """
    lo, hi = engine_window(P_d, s.soc, dt, ctx.params)
    if P_d < 0:
        hi = max(hi, 0.0)
    return max(lo, 0.0), min(hi, ctx.params.P_e_max)


def project_action(P_e: float, lo: float, hi: float, pe_max: float) -> tuple[float, bool]:
    """Clip into ``[lo, hi]``; an empty interval resolves to ``pe_max``, the
    least-violating action.  Returns (action, infeasible)."""
    if lo <= hi:
        return min(max(P_e, lo), hi), False
    return pe_max, True


# -- transitions --------------------------------------------------------------

class EmsEnv:
    """Deterministic plant on one drive cycle with precomputed power demand.

    ``step`` projects the requested engine power onto the feasible interval
    before applying the physics, so constraint handling is identical for DP
    rollouts and RL agents.
    """

    def __init__(self, cycle: DriveCycle, ctx: EmsContext):
        self.cycle = cycle
        self.ctx = ctx
        self.dt = cycle.dt
        self.n_steps = len(cycle)
        self.pd = np.asarray(power_demand(cycle.speed, cycle.accel, ctx.params), dtype=np.float64)
        self._pd_list = self.pd.tolist()
        self._v = cycle.speed.tolist()
        self._a = cycle.accel.tolist()
        emap = ctx.emap
        self._ool_p = emap.ool_power
        self._ool_f = emap.ool_fuel

    def state(self, t: int, soc: float) -> EmsState:
        if t >= self.n_steps:
            return EmsState(0.0, 0.0, soc, t)
        return EmsState(self._v[t], self._a[t], soc, t)

    def observe(self, t: int, soc: float) -> tuple[float, float, float]:
        if t >= self.n_steps:
            return 0.0, 0.0, soc
        return self._v[t], self._a[t], soc

    def window(self, t: int, soc: float) -> tuple[float, float]:
        pd = self._pd_list[t]
        lo, hi = engine_window(pd, soc, self.dt, self.ctx.params)
        if pd < 0:
            hi = max(hi, 0.0)
        return max(lo, 0.0), min(hi, self.ctx.params.P_e_max)

    def fuel_rate(self, P_e: float) -> float:
        if P_e <= 0.0:
            return 0.0
        return float(np.interp(P_e, self._ool_p, self._ool_f))

    def step(self, t: int, soc: float, P_e: float, project: bool = True):
        """Advance one step.

        Returns ``(soc_next, cost, flags, info)`` where ``info`` holds the
        executed engine power, battery power and fuel rate.  Without
        ``project`` the requested power is only clipped to ``[0, P_e_max]``
        and any resulting saturation is flagged.
        """
        if not 0 <= t < self.n_steps:
            raise IndexError(f"step {t} outside cycle of {self.n_steps} samples")
        p = self.ctx.params
        w = self.ctx.weights
        pd = self._pd_list[t]
        b_lo, b_hi = battery_window(soc, self.dt, p)
        flags = 0
        if project:
            lo, hi = self.window(t, soc)
            P_e, infeasible = project_action(P_e, lo, hi, p.P_e_max)
            if infeasible:
                flags |= FLAG_INFEASIBLE
        else:
            P_e = min(max(P_e, 0.0), p.P_e_max)
        net = pd - P_e
        P_b = net / p.eta_elec if net >= 0 else net * p.eta_elec
        if P_b < b_lo:
            # braking surplus goes to the friction brakes; engine overcharge is a violation
            if not (pd < 0 and P_e == 0.0) and P_b < b_lo - _PB_TOL * abs(b_lo) - _PB_TOL:
                flags |= FLAG_SOC if b_lo > p.P_b_min else FLAG_BATTERY
            P_b = b_lo
        elif P_b > b_hi:
            if P_b > b_hi + _PB_TOL * abs(b_hi) + _PB_TOL:
                flags |= FLAG_BATTERY if b_hi == p.P_b_max else FLAG_SOC
            P_b = b_hi
        current = 2.0 * P_b / (p.V_oc + math.sqrt(p.V_oc * p.V_oc - 4.0 * p.r_0 * P_b))
        nxt = min(max(soc - self.dt * current / p.Q_c, p.soc_min), p.soc_max)
        fuel = self.fuel_rate(P_e)
        pen = 0.0
        if soc < w.soc_ref:
            d = w.soc_ref - soc
            pen = w.delta * d * d
        cost = self.dt * (fuel + pen)
        if flags & FLAG_INFEASIBLE:
            cost += INFEASIBLE_PENALTY
        return nxt, cost, flags, (P_e, P_b, fuel)

    def terminal(self, soc: float) -> float:
        return terminal_cost(soc, self.ctx.weights)


def transition(s: EmsState, u: EmsAction, cycle: DriveCycle, ctx: EmsContext,
               env: EmsEnv | None = None) -> tuple[EmsState, float, int]:
    """One raw MDP step (no projection): saturation is flagged, not avoided."""
    if not 0 <= s.t < len(cycle):
        raise IndexError(f"step {s.t} outside cycle of {len(cycle)} samples")
    env = env or EmsEnv(cycle, ctx)
    nxt, cost, flags, _ = env.step(s.t, s.soc, u.P_e, project=False)
    return env.state(s.t + 1, nxt), cost, flags


@dataclass
class Trace:
    """Per-step record of one rollout.  ``soc`` has one more entry than the
    per-step arrays; ``total_cost`` includes the terminal cost."""
    t: np.ndarray
    v: np.ndarray
    pd: np.ndarray
    pe: np.ndarray
    pb: np.ndarray
    soc: np.ndarray
    fuel: np.ndarray
    cost: np.ndarray
    flags: np.ndarray
    terminal_cost: float
    total_cost: float

    @property
    def fuel_grams(self) -> float:
        return float(np.sum(self.fuel) * (self.t[1] - self.t[0] if len(self.t) > 1 else 1.0))

    @property
    def infeasible_steps(self) -> int:
        return int(np.count_nonzero(self.flags))


def simulate(env: EmsEnv, policy, soc0: float) -> Trace:
    """Roll ``policy(t, soc) -> P_e`` over the whole cycle."""
    n = env.n_steps
    pe = np.empty(n)
    pb = np.empty(n)
    fuel = np.empty(n)
    cost = np.empty(n)
    flags = np.zeros(n, dtype=np.int64)
    soc = np.empty(n + 1)
    soc[0] = s = float(soc0)
    total = 0.0
    for t in range(n):
        s, c, f, (e, b, m) = env.step(t, s, policy(t, s))
        pe[t], pb[t], fuel[t], cost[t], flags[t] = e, b, m, c, f
        soc[t + 1] = s
        total += c
    term = env.terminal(s)
    total += term
    return Trace(env.cycle.time, env.cycle.speed.copy(), env.pd.copy(), pe, pb, soc, fuel,
                 cost, flags, term, total)


def replay_actions(env: EmsEnv, actions, soc0: float) -> Trace:
    actions = np.asarray(actions, dtype=np.float64)
    return simulate(env, lambda t, s: actions[t], soc0)
