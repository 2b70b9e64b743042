"""Deterministic dynamic programming over a (time x SoC) lattice.

The backward sweep tabulates the optimal cost-to-go on a uniform SoC grid.
Every grid engine power is first projected onto the node's feasible
interval (so the candidate set is the discretized action set with
infeasible members replaced by the nearest admissible power).  Next-state
values are read by linear interpolation in SoC, or by nearest-node lookup in
``snap`` mode which the brute-force oracle mirrors exactly.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from ._accel import USE_NUMBA, maybe_njit
from ._npz import save_npz
from .cycle_io import DriveCycle, ExpertPolicy
from .ems_mdp import INFEASIBLE_PENALTY, EmsContext, EmsEnv, Trace, simulate


class DpError(ValueError):
    pass


@dataclass(frozen=True)
class DpConfig:
    soc_points: int = 561
    action_points: int = 115
    terminal_weight: float | None = None  # None: use CostWeights.terminal_weight
    snap: bool = False

    def __post_init__(self):
        if self.soc_points < 2 or self.action_points < 2:
            raise DpError("DP grids need at least 2 points")
        if self.terminal_weight is not None and self.terminal_weight < 0:
            raise DpError("terminal_weight must be non-negative")


@dataclass
class ValueGrid:
    values: np.ndarray       # (N+1, S) cost-to-go
    best_action: np.ndarray  # (N, S) engine power, W
    soc_grid: np.ndarray
    action_grid: np.ndarray
    cycle_name: str
    config: DpConfig
    terminal_weight: float

    @property
    def n_steps(self) -> int:
        return self.best_action.shape[0]

    def config_hash(self) -> str:
        blob = json.dumps({"config": asdict(self.config), "tw": self.terminal_weight,
                           "soc": self.soc_grid.tolist(), "act": self.action_grid.tolist(),
                           "cycle": self.cycle_name}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.values).tobytes())
        h.update(np.ascontiguousarray(self.best_action).tobytes())
        return h.hexdigest()


# -- kernels --------------------------------------------------------------------

@maybe_njit
def _interp_uniform(x, x0, dx, y):
    n = y.shape[0]
    u = (x - x0) / dx
    if u <= 0.0:
        return y[0]
    if u >= n - 1:
        return y[n - 1]
    i = int(u)
    f = u - i
    if f == 0.0:
        return y[i]
    return y[i] + (y[i + 1] - y[i]) * f


@maybe_njit
def _sweep_loops(pd, dt, soc_grid, act_grid, v_term, delta, soc_ref,
                 V_oc, r_0, Q_c, soc_min, soc_max, pe_max, pb_min, pb_max, eta,
                 ool_p0, ool_dp, ool_f, penalty, snap):
    n = pd.shape[0]
    ns = soc_grid.shape[0]
    na = act_grid.shape[0]
    s0 = soc_grid[0]
    ds = soc_grid[1] - soc_grid[0]
    values = np.empty((n + 1, ns))
    best = np.empty((n, ns))
    values[n, :] = v_term
    i_peak = V_oc / (2.0 * r_0)
    p_phys = V_oc * V_oc / (4.0 * r_0)
    for k in range(n - 1, -1, -1):
        P_d = pd[k]
        vnext = values[k + 1]
        for i in range(ns):
            soc = soc_grid[i]
            # feasible engine window at this node
            i_hi = (soc - soc_min) * Q_c / dt
            i_lo = (soc - soc_max) * Q_c / dt
            b_hi = p_phys if i_hi >= i_peak else i_hi * (V_oc - i_hi * r_0)
            b_lo = i_lo * (V_oc - i_lo * r_0)
            b_lo = max(pb_min, b_lo)
            b_hi = min(pb_max, b_hi)
            lo = P_d - (b_hi * eta if b_hi >= 0.0 else b_hi / eta)
            hi = P_d - (b_lo * eta if b_lo >= 0.0 else b_lo / eta)
            if P_d < 0.0:
                hi = max(hi, 0.0)  # friction brakes take the surplus
            lo = max(lo, 0.0)
            hi = min(hi, pe_max)
            pen = 0.0
            if soc < soc_ref:
                pen = delta * (soc_ref - soc) ** 2
            bv = np.inf
            ba = 0.0
            for j in range(na):
                extra = 0.0
                if lo <= hi:
                    a = min(max(act_grid[j], lo), hi)
                else:
                    a = pe_max
                    extra = penalty
                net = P_d - a
                pb = net / eta if net >= 0.0 else net * eta
                pb = min(max(pb, b_lo), b_hi)
                cur = 2.0 * pb / (V_oc + math.sqrt(V_oc * V_oc - 4.0 * r_0 * pb))
                nxt = soc - dt * cur / Q_c
                nxt = min(max(nxt, soc_min), soc_max)
                fuel = 0.0
                if a > 0.0:
                    fuel = _interp_uniform(a, ool_p0, ool_dp, ool_f)
                if snap:
                    m = int(math.floor((nxt - s0) / ds + 0.5))
                    m = min(max(m, 0), ns - 1)
                    vn = vnext[m]
                else:
                    vn = _interp_uniform(nxt, s0, ds, vnext)
                c = dt * (fuel + pen) + extra + vn
                if c < bv:
                    bv = c
                    ba = a
            values[k, i] = bv
            best[k, i] = ba
    return values, best


def _sweep_numpy(pd, dt, soc_grid, act_grid, v_term, delta, soc_ref,
                 V_oc, r_0, Q_c, soc_min, soc_max, pe_max, pb_min, pb_max, eta,
                 ool_p0, ool_dp, ool_f, penalty, snap):
    """Vectorized twin of :func:`_sweep_loops` (one (S, A) block per step)."""
    n = pd.shape[0]
    ns = soc_grid.shape[0]
    s0 = soc_grid[0]
    ds = soc_grid[1] - soc_grid[0]
    ool_x = ool_p0 + ool_dp * np.arange(ool_f.shape[0])
    values = np.empty((n + 1, ns))
    best = np.empty((n, ns))
    values[n] = v_term
    soc = soc_grid[:, None]
    i_peak = V_oc / (2.0 * r_0)
    p_phys = V_oc * V_oc / (4.0 * r_0)
    i_hi = (soc - soc_min) * Q_c / dt
    i_lo = (soc - soc_max) * Q_c / dt
    b_hi = np.minimum(pb_max, np.where(i_hi >= i_peak, p_phys, i_hi * (V_oc - i_hi * r_0)))
    b_lo = np.maximum(pb_min, i_lo * (V_oc - i_lo * r_0))
    pen = np.where(soc < soc_ref, delta * (soc_ref - soc) ** 2, 0.0)
    acts = act_grid[None, :]
    for k in range(n - 1, -1, -1):
        P_d = pd[k]
        lo = np.maximum(P_d - np.where(b_hi >= 0, b_hi * eta, b_hi / eta), 0.0)
        hi = P_d - np.where(b_lo >= 0, b_lo * eta, b_lo / eta)
        if P_d < 0.0:
            hi = np.maximum(hi, 0.0)
        hi = np.minimum(hi, pe_max)
        empty = lo > hi
        a = np.minimum(np.maximum(acts, lo), hi)
        a = np.where(empty, pe_max, a)
        extra = np.where(empty, penalty, 0.0)
        net = P_d - a
        pb = np.minimum(np.maximum(np.where(net >= 0, net / eta, net * eta), b_lo), b_hi)
        cur = 2.0 * pb / (V_oc + np.sqrt(V_oc * V_oc - 4.0 * r_0 * pb))
        nxt = np.clip(soc - dt * cur / Q_c, soc_min, soc_max)
        fuel = np.where(a > 0, np.interp(a, ool_x, ool_f), 0.0)
        if snap:
            m = np.clip(np.floor((nxt - s0) / ds + 0.5).astype(np.int64), 0, ns - 1)
            vn = values[k + 1][m]
        else:
            vn = np.interp(nxt, soc_grid, values[k + 1])
        c = dt * (fuel + pen) + extra + vn
        j = np.argmin(c, axis=1)  # first minimum == lowest power on ties
        rows = np.arange(ns)
        values[k] = c[rows, j]
        best[k] = a[rows, j]
    return values, best


_sweep = _sweep_loops if USE_NUMBA else _sweep_numpy


# -- public API ---------------------------------------------------------------

def soc_grid_for(ctx: EmsContext, cfg: DpConfig) -> np.ndarray:
    p = ctx.params
    return np.linspace(p.soc_min, p.soc_max, cfg.soc_points)


def action_grid_for(ctx: EmsContext, cfg: DpConfig) -> np.ndarray:
    return np.linspace(0.0, ctx.params.P_e_max, cfg.action_points)


def solve(cycle: DriveCycle, cfg: DpConfig, ctx: EmsContext, kernel=None,
          env: EmsEnv | None = None) -> ValueGrid:
    """Backward induction: ``values[k][i] = min_a L(soc_i, a) + V[k+1](soc')``."""
    p, w = ctx.params, ctx.weights
    tw = w.terminal_weight if cfg.terminal_weight is None else cfg.terminal_weight
    soc_grid = soc_grid_for(ctx, cfg)
    act_grid = action_grid_for(ctx, cfg)
    env = env or EmsEnv(cycle, ctx)
    deficit = np.maximum(w.soc_ref - soc_grid, 0.0)
    v_term = tw * deficit * deficit
    ool_p = ctx.emap.ool_power
    ool_dp = ool_p[1] - ool_p[0]
    if not np.allclose(np.diff(ool_p), ool_dp, rtol=1e-9, atol=0.0):
        raise DpError("operating-line power grid must be uniform")
    kernel = kernel or _sweep
    values, best = kernel(
        env.pd, float(cycle.dt), soc_grid, act_grid, v_term, float(w.delta), float(w.soc_ref),
        p.V_oc, p.r_0, p.Q_c, p.soc_min, p.soc_max, p.P_e_max, p.P_b_min, p.P_b_max, p.eta_elec,
        float(ool_p[0]), float(ool_dp), np.ascontiguousarray(ctx.emap.ool_fuel),
        INFEASIBLE_PENALTY, bool(cfg.snap))
    return ValueGrid(values, best, soc_grid, act_grid, cycle.name, cfg, float(tw))


def value_at(grid: ValueGrid, k: int, soc: float) -> float:
    if not 0 <= k <= grid.n_steps:
        raise IndexError(f"step {k} outside [0, {grid.n_steps}]")
    if not grid.soc_grid[0] <= soc <= grid.soc_grid[-1]:
        raise DpError(f"soc {soc} outside grid [{grid.soc_grid[0]}, {grid.soc_grid[-1]}]")
    return float(np.interp(soc, grid.soc_grid, grid.values[k]))


def grid_policy(grid: ValueGrid):
    """``policy(t, soc)``: best action linearly interpolated in SoC."""
    sg, best = grid.soc_grid, grid.best_action
    return lambda t, soc: float(np.interp(soc, sg, best[t]))


def extract_trajectory(grid: ValueGrid, cycle: DriveCycle, soc0: float,
                       ctx: EmsContext) -> tuple[ExpertPolicy, Trace]:
    """Forward pass with the tabulated policy from continuous ``soc0``."""
    if grid.n_steps != len(cycle):
        raise DpError("value grid and cycle lengths differ")
    if not grid.soc_grid[0] <= soc0 <= grid.soc_grid[-1]:
        raise DpError(f"soc0 {soc0} outside grid range")
    if grid.terminal_weight != ctx.weights.terminal_weight:
        ctx = replace(ctx, weights=replace(ctx.weights, terminal_weight=grid.terminal_weight))
    trace = simulate(EmsEnv(cycle, ctx), grid_policy(grid), soc0)
    return ExpertPolicy(cycle.name, cycle.dt, trace.pe), trace


def save_value_grid(grid: ValueGrid, path) -> None:
    """Binary dump (``.npz``) with a JSON header of cycle, grids and config hash."""
    header = {"cycle": grid.cycle_name, "config": asdict(grid.config),
              "terminal_weight": grid.terminal_weight, "config_hash": grid.config_hash()}
    save_npz(path, values=grid.values, best_action=grid.best_action,
             soc_grid=grid.soc_grid, action_grid=grid.action_grid,
             header=np.array(json.dumps(header, sort_keys=True)))


def load_value_grid(path) -> ValueGrid:
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        return ValueGrid(z["values"], z["best_action"], z["soc_grid"], z["action_grid"],
                         header["cycle"], DpConfig(**header["config"]), header["terminal_weight"])


def save_value_grid_csv(grid: ValueGrid, path) -> None:
    """Long-format CSV: ``k,soc,value,best_action_w`` (best action blank at k = N)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# cycle={grid.cycle_name} soc_points={len(grid.soc_grid)} "
                 f"action_points={len(grid.action_grid)} config_hash={grid.config_hash()}\n")
        fh.write("k,soc,value,best_action_w\n")
        n = grid.n_steps
        for k in range(n + 1):
            row = grid.values[k].tolist()
            for i, s in enumerate(grid.soc_grid.tolist()):
                a = "" if k == n else repr(float(grid.best_action[k, i]))
                fh.write(f"{k},{s!r},{row[i]!r},{a}\n")

