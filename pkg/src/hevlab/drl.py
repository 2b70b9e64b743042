"""DQL and DDPG learners for the energy-management MDP.

Both learners drive the same :class:`~hevlab.ems_mdp.EmsEnv` the DP solver
uses, so costs are directly comparable.  DDPG can run with an
:class:`ExpertGuard` that clamps every exploratory action into a band around
a time-indexed expert trajectory (typically the DP solution); with the guard
disabled it is plain DDPG.

The minibatch updates are fused into single kernels (target computation,
backprop, Adam and soft target updates) so that one call per environment
step is all the Python overhead a training run pays.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ._accel import maybe_njit
from .cycle_io import DriveCycle, ExpertPolicy
from .ems_mdp import EmsAction, EmsContext, EmsEnv, Trace, simulate
from .neural import DivergenceError, Mlp, _adam, _backward, _forward, _polyak

STATE_DIM = 3
V_SCALE = 35.0
A_SCALE = 3.0
EPS_MODES = ("exp", "literal")
REPLAY_MODES = ("uniform", "prioritized")


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    lr_actor: float | None = None   # None: same as lr
    gamma: float = 0.95
    episodes: int = 1000
    batch: int = 64
    capacity: int = 2000
    eps_mode: str = "exp"
    eps_decay: float = 150.0        # episodes per e-fold in "exp" mode
    eps_base: float = 0.001         # base of the literal schedule
    noise_w: float = 2000.0         # exploration std at epsilon = 1
    radius_start: float = 5000.0
    radius_end: float = 1000.0
    radius_anneal: float = 1.0      # fraction of training spent shrinking the radius
    tau: float = 0.001
    guard_pull: float = 1000.0      # weight pulling the actor back into the guard band
    hidden: int = 64
    dql_levels: int = 20
    replay: str = "uniform"
    pri_alpha: float = 0.6
    pri_beta0: float = 0.4
    pri_beta1: float = 1.0
    pri_eps: float = 1e-3
    soc0: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise TrainingError("gamma must lie in (0, 1)")
        if self.batch < 1 or self.batch > self.capacity:
            raise TrainingError("need 1 <= batch <= capacity")
        if self.episodes < 1:
            raise TrainingError("episodes must be positive")
        if self.eps_mode not in EPS_MODES:
            raise TrainingError(f"eps_mode must be one of {EPS_MODES}")
        if self.replay not in REPLAY_MODES:
            raise TrainingError(f"replay must be one of {REPLAY_MODES}")
        if self.radius_start < 0 or self.radius_end < 0:
            raise TrainingError("guard radii must be non-negative")
        if not 0.0 <= self.tau <= 1.0:
            raise TrainingError("tau must lie in [0, 1]")
        if not 0.0 < self.radius_anneal <= 1.0:
            raise TrainingError("radius_anneal must lie in (0, 1]")
        if self.guard_pull < 0:
            raise TrainingError("guard_pull must be non-negative")
        if self.dql_levels < 2 or self.hidden < 1:
            raise TrainingError("need at least 2 DQL levels and a positive hidden width")

    def guard(self, expert: ExpertPolicy) -> "ExpertGuard":
        """The annealed guard this config describes around ``expert``."""
        return ExpertGuard(expert, self.radius_start, self.radius_end, anneal=self.radius_anneal)

    @property
    def actor_lr(self) -> float:
        return self.lr if self.lr_actor is None else self.lr_actor

    def to_dict(self) -> dict:
        return asdict(self)


def epsilon(episode: int, cfg: TrainConfig, step: int = 0) -> float:
    """Exploration probability (DQL) and noise multiplier (DDPG).

    ``exp`` mode decays per episode as ``exp(-episode / eps_decay)``.  The
    ``literal`` mode is ``eps_base ** step`` over the global step count,
    floored at the smallest positive float so it never reaches 0.
    """
    if cfg.eps_mode == "exp":
        return math.exp(-episode / cfg.eps_decay)
    return max(cfg.eps_base ** step, np.finfo(np.float64).tiny)


def normalize_state(v, a, soc) -> np.ndarray:
    return np.array([v / V_SCALE, a / A_SCALE, soc], dtype=np.float64)


# -- replay -----------------------------------------------------------------------

@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: float
    r: float
    s_next: np.ndarray
    done: bool
    priority: float = 1.0


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    index: np.ndarray
    weights: np.ndarray
    band_lo: np.ndarray
    band_hi: np.ndarray


class ReplayBuffer:
    """Fixed-capacity FIFO ring, optionally with proportional prioritization.

    New transitions enter at the current maximum priority so each is seen at
    least once with high probability.  Each entry also records the guard
    band (in normalized action units, default the full ``[-1, 1]``) that was
    active when it was collected.
    """

    def __init__(self, capacity: int, state_dim: int = STATE_DIM, mode: str = "uniform",
                 alpha: float = 0.6, eps: float = 1e-3):
        if capacity < 1:
            raise TrainingError("capacity must be positive")
        if mode not in REPLAY_MODES:
            raise TrainingError(f"replay mode must be one of {REPLAY_MODES}")
        self.capacity = int(capacity)
        self.mode = mode
        self.alpha = float(alpha)
        self.eps = float(eps)
        self.s = np.zeros((capacity, state_dim))
        self.s_next = np.zeros((capacity, state_dim))
        self.a = np.zeros(capacity)
        self.r = np.zeros(capacity)
        self.done = np.zeros(capacity)
        self.priority = np.zeros(capacity)
        self.band_lo = np.full(capacity, -1.0)
        self.band_hi = np.full(capacity, 1.0)
        self.tag = np.full(capacity, -1, dtype=np.int64)
        self._next = 0
        self._size = 0
        self._inserted = 0
        self._max_priority = 1.0

    def __len__(self) -> int:
        return self._size

    def add(self, s, a, r, s_next, done, priority: float | None = None,
            band: tuple[float, float] = (-1.0, 1.0)) -> int:
        i = self._next
        self.s[i] = s
        self.s_next[i] = s_next
        self.a[i] = a
        self.r[i] = r
        self.done[i] = float(done)
        p = self._max_priority if priority is None else float(priority)
        if not p > 0:
            raise TrainingError("priority must be positive")
        self.priority[i] = p
        self.band_lo[i], self.band_hi[i] = band
        self.tag[i] = self._inserted
        self._inserted += 1
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        return i

    def push(self, tr: Transition) -> int:
        return self.add(tr.s, tr.a, tr.r, tr.s_next, tr.done, tr.priority)

    def get(self, i: int) -> Transition:
        if not 0 <= i < self._size:
            raise IndexError(i)
        return Transition(self.s[i].copy(), float(self.a[i]), float(self.r[i]),
                          self.s_next[i].copy(), bool(self.done[i]), float(self.priority[i]))

    def probabilities(self) -> np.ndarray:
        n = self._size
        if self.mode == "uniform":
            return np.full(n, 1.0 / n)
        p = self.priority[:n] ** self.alpha
        return p / p.sum()

    def update_priorities(self, index, td) -> None:
        p = np.abs(np.asarray(td, dtype=np.float64)) + self.eps
        self.priority[index] = p
        self._max_priority = max(self._max_priority, float(p.max()))


def buffer_sample(buf: ReplayBuffer, n: int, rng: np.random.Generator,
                  beta: float = 0.4) -> Batch:
    """Uniform mode draws without replacement with unit weights.
    Prioritized mode draws with replacement from ``priority**alpha`` and
    returns importance weights ``(N p)**-beta`` scaled to a maximum of 1."""
    size = len(buf)
    if n > size:
        raise TrainingError(f"cannot sample {n} from a buffer holding {size}")
    if buf.mode == "uniform":
        idx = rng.choice(size, n, replace=False)
        w = np.ones(n)
    else:
        prob = buf.probabilities()
        idx = rng.choice(size, n, replace=True, p=prob)
        w = (size * prob[idx]) ** (-beta)
        w /= w.max()
    return Batch(buf.s[idx], buf.a[idx], buf.r[idx], buf.s_next[idx], buf.done[idx], idx, w,
                 buf.band_lo[idx], buf.band_hi[idx])


# -- expert guard ---------------------------------------------------------------

@dataclass
class ExpertGuard:
    """Time-indexed admissible band ``expert(t) +- radius``.

    The radius moves linearly from ``radius_start`` to ``radius_end`` over
    the first ``anneal`` fraction of training and then holds
    (``radius_end=None`` keeps it constant).
    """
    policy: ExpertPolicy | None
    radius_start: float = 5000.0
    radius_end: float | None = None
    enabled: bool = True
    anneal: float = 1.0
    radius: float = field(init=False)

    def __post_init__(self):
        if self.enabled and self.policy is None:
            raise TrainingError("an enabled guard needs an expert policy")
        if self.radius_start < 0 or (self.radius_end is not None and self.radius_end < 0):
            raise TrainingError("guard radius must be non-negative")
        if not 0.0 < self.anneal <= 1.0:
            raise TrainingError("anneal fraction must lie in (0, 1]")
        self.radius = float(self.radius_start)

    @classmethod
    def disabled(cls) -> "ExpertGuard":
        return cls(None, 0.0, enabled=False)

    def set_episode(self, episode: int, episodes: int) -> float:
        if self.radius_end is None or episodes <= 1:
            self.radius = float(self.radius_start)
        else:
            f = min(episode / (self.anneal * (episodes - 1)), 1.0)
            self.radius = float(self.radius_start + f * (self.radius_end - self.radius_start))
        return self.radius

    def interval(self, t: int, pe_max: float) -> tuple[float, float]:
        if not self.enabled:
            return 0.0, pe_max
        pe = self.policy.engine_power
        if not 0 <= t < len(pe):
            raise IndexError(f"step {t} outside expert of {len(pe)} samples")
        e = float(pe[t])
        return max(e - self.radius, 0.0), min(e + self.radius, pe_max)


def guarded_action(actor_out: float, guard: ExpertGuard | None, t: int, noise: float = 0.0,
                   rng: np.random.Generator | None = None, pe_max: float = 57000.0) -> EmsAction:
    """``actor_out`` plus Gaussian noise of std ``noise``, clamped into the
    guard band (or only into ``[0, pe_max]`` without a guard)."""
    cand = float(actor_out)
    if noise > 0.0:
        if rng is None:
            raise TrainingError("exploration noise needs an rng")
        cand += noise * rng.standard_normal()
    if guard is None:
        lo, hi = 0.0, pe_max
    else:
        lo, hi = guard.interval(t, pe_max)
    return EmsAction(min(max(cand, lo), hi))


# -- fused update kernels -----------------------------------------------------------

@maybe_njit
def _ddpg_update(ap, atp, asz, am, av, cp, ctp, csz, cm, cv, step,
                 S, A, R, S2, D, W, LO, HI, pull, gamma, lr_a, lr_c, tau, b1, b2, eps):
    B = S.shape[0]
    k = S.shape[1]
    y2, _ = _forward(atp, asz, True, S2)
    X2 = np.empty((B, k + 1))
    X2[:, :k] = S2
    X2[:, k] = y2[:, 0]
    q2, _ = _forward(ctp, csz, False, X2)
    X = np.empty((B, k + 1))
    X[:, :k] = S
    X[:, k] = A
    q, cache = _forward(cp, csz, False, X)
    td = R + gamma * (1.0 - D) * q2[:, 0] - q[:, 0]
    dq = np.empty((B, 1))
    dq[:, 0] = -2.0 * W * td / B
    gc, _ = _backward(cp, csz, False, X, cache, dq, True)
    # actor ascends Q(s, pi(s)) through the freshly updated critic
    _adam(cp, gc, cm, cv, lr_c, b1, b2, eps, step)
    ya, acache = _forward(ap, asz, True, S)
    X[:, k] = ya[:, 0]
    _, qcache = _forward(cp, csz, False, X)
    up = np.full((B, 1), -1.0 / B)
    _, dX = _backward(cp, csz, False, X, qcache, up, False)
    # hinge-squared pull toward the band each sample was collected under;
    # the band is [-1, 1] without a guard, so plain DDPG is untouched
    da = np.empty((B, 1))
    for i in range(B):
        y = ya[i, 0]
        g = dX[i, k]
        if y > HI[i]:
            g += 2.0 * pull * (y - HI[i]) / B
        elif y < LO[i]:
            g += 2.0 * pull * (y - LO[i]) / B
        da[i, 0] = g
    ga, _ = _backward(ap, asz, True, S, acache, da, True)
    _adam(ap, ga, am, av, lr_a, b1, b2, eps, step)
    _polyak(ctp, cp, tau)
    _polyak(atp, ap, tau)
    ok = np.isfinite(np.sum(gc) + np.sum(ga) + np.sum(td))
    return td, ok


@maybe_njit
def _dqn_update(qp, qtp, sz, m, v, step, S, Aidx, R, S2, D, W, gamma, lr, tau, b1, b2, eps):
    B = S.shape[0]
    q2, _ = _forward(qtp, sz, False, S2)
    q, cache = _forward(qp, sz, False, S)
    nA = q.shape[1]
    td = np.empty(B)
    dq = np.zeros((B, nA))
    for i in range(B):
        best = q2[i, 0]
        for j in range(1, nA):
            if q2[i, j] > best:
                best = q2[i, j]
        j = Aidx[i]
        td[i] = R[i] + gamma * (1.0 - D[i]) * best - q[i, j]
        dq[i, j] = -2.0 * W[i] * td[i] / B
    g, _ = _backward(qp, sz, False, S, cache, dq, True)
    _adam(qp, g, m, v, lr, b1, b2, eps, step)
    _polyak(qtp, qp, tau)
    ok = np.isfinite(np.sum(g) + np.sum(td))
    return td, ok


# -- training ---------------------------------------------------------------------

@dataclass
class EpisodeStats:
    total_reward: float
    total_fuel_g: float
    final_soc: float
    guard_exits: int = 0


@dataclass
class TrainResult:
    strategy: str
    nets: dict
    history: list[EpisodeStats]
    trace: Trace
    config: TrainConfig
    seconds: float
    updates: int

    @property
    def rewards(self) -> np.ndarray:
        return np.array([h.total_reward for h in self.history])

    @property
    def policy_net(self) -> Mlp:
        return self.nets["actor"] if "actor" in self.nets else self.nets["q"]


def _observations(cycle: DriveCycle) -> tuple[np.ndarray, np.ndarray]:
    # one extra row so s_next exists at the last step (standstill, value masked by done)
    v = np.append(cycle.speed / V_SCALE, 0.0)
    a = np.append(cycle.accel / A_SCALE, 0.0)
    return v, a


def _check_divergence(ok, strategy, episode, t):
    if not ok:
        raise DivergenceError(f"{strategy}: non-finite update at episode {episode}, step {t}")


def _beta(cfg: TrainConfig, episode: int) -> float:
    f = episode / max(cfg.episodes - 1, 1)
    return cfg.pri_beta0 + f * (cfg.pri_beta1 - cfg.pri_beta0)


def dql_levels(cfg: TrainConfig, pe_max: float) -> np.ndarray:
    return np.linspace(0.0, pe_max, cfg.dql_levels)


def train_dql(cycle: DriveCycle, expert: ExpertPolicy | None, cfg: TrainConfig,
              ctx: EmsContext, log=None) -> TrainResult:
    """Deep Q-learning over ``cfg.dql_levels`` evenly spaced engine powers.

    ``expert`` is accepted for interface symmetry and ignored: the baseline
    learns without prior knowledge.
    """
    del expert
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    pe_max = ctx.params.P_e_max
    levels = dql_levels(cfg, pe_max)
    nA = len(levels)
    h = cfg.hidden
    q = Mlp([STATE_DIM, h, h, nA], "relu_hidden_linear_out", rng=rng)
    qt = q.copy()
    env = EmsEnv(cycle, ctx)
    buf = ReplayBuffer(cfg.capacity, STATE_DIM, cfg.replay, cfg.pri_alpha, cfg.pri_eps)
    vn, an = _observations(cycle)
    N = env.n_steps
    x = np.empty((1, STATE_DIM))
    history = []
    updates = 0
    step = 0
    for ep in range(cfg.episodes):
        beta = _beta(cfg, ep)
        soc = cfg.soc0
        tot_r = fuel = 0.0
        for t in range(N):
            eps = epsilon(ep, cfg, step)
            x[0, 0], x[0, 1], x[0, 2] = vn[t], an[t], soc
            if rng.random() < eps:
                k = int(rng.integers(nA))
            else:
                qv, _ = _forward(q.params, q._sizes_arr, False, x)
                k = int(np.argmax(qv[0]))
            soc2, cost, _, (_, _, f) = env.step(t, soc, levels[k])
            done = t == N - 1
            if done:
                cost += env.terminal(soc2)
            r = -ctx.weights.reward_scale * cost
            buf.add(x[0], k, r, (vn[t + 1], an[t + 1], soc2), done)
            tot_r += r
            fuel += f * env.dt
            soc = soc2
            step += 1
            if len(buf) >= cfg.batch:
                b = buffer_sample(buf, cfg.batch, rng, beta)
                q.adam_t += 1
                td, ok = _dqn_update(q.params, qt.params, q._sizes_arr, q.adam_m, q.adam_v,
                                     float(q.adam_t), b.s, b.a.astype(np.int64), b.r, b.s_next,
                                     b.done, b.weights, cfg.gamma, cfg.lr, cfg.tau,
                                     0.9, 0.999, 1e-8)
                _check_divergence(ok, "dql", ep, t)
                if buf.mode == "prioritized":
                    buf.update_priorities(b.index, td)
                updates += 1
        history.append(EpisodeStats(tot_r, fuel, soc))
        if log is not None:
            log(ep, history[-1])
    trace = rollout_policy(q, cycle, cfg.soc0, ctx, levels=levels)
    return TrainResult("dql", {"q": q, "q_target": qt}, history, trace, cfg,
                       time.perf_counter() - t0, updates)


def train_ddpg(cycle: DriveCycle, guard: ExpertGuard | None, cfg: TrainConfig,
               ctx: EmsContext, log=None) -> TrainResult:
    """DDPG with target networks; ``guard`` restricts exploration when enabled.

    Every step consumes exactly one normal draw whatever the noise scale, so
    runs differing only in the guard stay aligned on the same random stream.
    """
    t0 = time.perf_counter()
    if guard is not None and not guard.enabled:
        guard = None
    if guard is not None and len(guard.policy) != len(cycle):
        raise TrainingError(f"expert has {len(guard.policy)} samples, cycle has {len(cycle)}")
    rng = np.random.default_rng(cfg.seed)
    pe_max = ctx.params.P_e_max
    h = cfg.hidden
    actor = Mlp([STATE_DIM, h, h, 1], "relu_hidden_tanh_out", action_range=(0.0, pe_max), rng=rng)
    critic = Mlp([STATE_DIM + 1, h, h, 1], "relu_hidden_linear_out", rng=rng)
    actor_t, critic_t = actor.copy(), critic.copy()
    env = EmsEnv(cycle, ctx)
    buf = ReplayBuffer(cfg.capacity, STATE_DIM, cfg.replay, cfg.pri_alpha, cfg.pri_eps)
    vn, an = _observations(cycle)
    N = env.n_steps
    x = np.empty((1, STATE_DIM))
    half = 0.5 * pe_max
    strategy = "ddpg" if guard is None else "ddpg_guarded"
    history = []
    updates = 0
    step = 0
    for ep in range(cfg.episodes):
        beta = _beta(cfg, ep)
        if guard is not None:
            guard.set_episode(ep, cfg.episodes)
        soc = cfg.soc0
        tot_r = fuel = 0.0
        exits = 0
        for t in range(N):
            sigma = cfg.noise_w * epsilon(ep, cfg, step)
            x[0, 0], x[0, 1], x[0, 2] = vn[t], an[t], soc
            y, _ = _forward(actor.params, actor._sizes_arr, True, x)
            cand = half * (y[0, 0] + 1.0) + sigma * rng.standard_normal()
            if guard is not None:
                lo, hi = guard.interval(t, pe_max)
            else:
                lo, hi = 0.0, pe_max
            a = min(max(cand, lo), hi)
            soc2, cost, _, (pe, _, f) = env.step(t, soc, a)
            if pe < lo or pe > hi:
                exits += 1  # feasibility projection overrode the guard band
            done = t == N - 1
            if done:
                cost += env.terminal(soc2)
            r = -ctx.weights.reward_scale * cost
            buf.add(x[0], pe / half - 1.0, r, (vn[t + 1], an[t + 1], soc2), done,
                    band=(lo / half - 1.0, hi / half - 1.0))
            tot_r += r
            fuel += f * env.dt
            soc = soc2
            step += 1
            if len(buf) >= cfg.batch:
                b = buffer_sample(buf, cfg.batch, rng, beta)
                actor.adam_t += 1
                critic.adam_t += 1
                td, ok = _ddpg_update(actor.params, actor_t.params, actor._sizes_arr,
                                      actor.adam_m, actor.adam_v,
                                      critic.params, critic_t.params, critic._sizes_arr,
                                      critic.adam_m, critic.adam_v, float(actor.adam_t),
                                      b.s, b.a, b.r, b.s_next, b.done, b.weights,
                                      b.band_lo, b.band_hi, cfg.guard_pull,
                                      cfg.gamma, cfg.actor_lr, cfg.lr, cfg.tau,
                                      0.9, 0.999, 1e-8)
                _check_divergence(ok, strategy, ep, t)
                if buf.mode == "prioritized":
                    buf.update_priorities(b.index, td)
                updates += 1
        history.append(EpisodeStats(tot_r, fuel, soc, exits))
        if log is not None:
            log(ep, history[-1])
    trace = rollout_policy(actor, cycle, cfg.soc0, ctx)
    nets = {"actor": actor, "critic": critic, "actor_target": actor_t, "critic_target": critic_t}
    return TrainResult(strategy, nets, history, trace, cfg, time.perf_counter() - t0, updates)


def rollout_policy(net: Mlp, cycle: DriveCycle, soc0: float, ctx: EmsContext,
                   levels: np.ndarray | None = None) -> Trace:
    """Greedy, noise-free, guard-free rollout.

    A tanh-headed ``net`` is read as an actor; any other net as a Q-network
    over ``levels`` (default: evenly spaced over ``[0, P_e_max]``, one per
    output).
    """
    env = EmsEnv(cycle, ctx)
    vn, an = _observations(cycle)
    x = np.empty((1, STATE_DIM))
    pe_max = ctx.params.P_e_max
    if net.tanh_out:
        lo, hi = net.action_range if net.action_range is not None else (0.0, pe_max)

        def policy(t, soc):
            x[0, 0], x[0, 1], x[0, 2] = vn[t], an[t], soc
            y, _ = _forward(net.params, net._sizes_arr, True, x)
            return lo + 0.5 * (y[0, 0] + 1.0) * (hi - lo)
    else:
        lv = np.linspace(0.0, pe_max, net.n_out) if levels is None else np.asarray(levels)
        if len(lv) != net.n_out:
            raise TrainingError("levels do not match the Q-network output width")

        def policy(t, soc):
            x[0, 0], x[0, 1], x[0, 2] = vn[t], an[t], soc
            qv, _ = _forward(net.params, net._sizes_arr, False, x)
            return float(lv[int(np.argmax(qv[0]))])
    return simulate(env, policy, soc0)


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=int(seed))
