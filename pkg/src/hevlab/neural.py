"""Small fully connected networks with hand-written backpropagation.

Parameters live in one flat float64 vector, layer by layer as
``W_0 (out x in), b_0, W_1, b_1, ...``.  Keeping them flat makes the
optimizer, soft target updates, checkpoints and hashing one-liners, and lets
the batched forward/backward kernels compile under numba.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from ._accel import USE_NUMBA, maybe_njit
from ._npz import save_npz

ACTIVATIONS = ("relu_hidden_tanh_out", "relu_hidden_linear_out")
CHECKPOINT_VERSION = 1


class NetworkError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    """Non-finite values appeared during training."""


def _forward_numpy(params, sizes, tanh_out, X):
    B = X.shape[0]
    L = sizes.shape[0] - 1
    acts = np.empty(B * int(np.sum(sizes[1:])))
    h = X
    po = ao = 0
    for l in range(L):
        n_in, n_out = sizes[l], sizes[l + 1]
        W = params[po:po + n_out * n_in].reshape(n_out, n_in)
        po += n_out * n_in
        b = params[po:po + n_out]
        po += n_out
        z = np.dot(h, W.T) + b
        if l < L - 1:
            z = np.maximum(z, 0.0)
        elif tanh_out:
            z = np.tanh(z)
        h = acts[ao:ao + B * n_out].reshape(B, n_out)
        h[:] = z
        ao += B * n_out
    return h.copy(), acts


@maybe_njit
def _forward_loops(params, sizes, tanh_out, X):
    B = X.shape[0]
    L = sizes.shape[0] - 1
    total = 0
    for l in range(L):
        total += sizes[l + 1]
    acts = np.empty(B * total)
    h = np.ascontiguousarray(X)
    po = 0
    ao = 0
    for l in range(L):
        n_in = sizes[l]
        n_out = sizes[l + 1]
        W = params[po:po + n_out * n_in].reshape(n_out, n_in)
        po += n_out * n_in
        b = params[po:po + n_out]
        po += n_out
        z = np.dot(h, W.T)
        # bias and activation are written straight into the cache block
        h = acts[ao:ao + B * n_out].reshape(B, n_out)
        ao += B * n_out
        for i in range(B):
            for j in range(n_out):
                v = z[i, j] + b[j]
                if l < L - 1:
                    if v < 0.0:
                        v = 0.0
                elif tanh_out:
                    v = math.tanh(v)
                h[i, j] = v
    return h.copy(), acts


def _backward_numpy(params, sizes, tanh_out, X, acts, dY, want_params=True):
    B = X.shape[0]
    L = sizes.shape[0] - 1
    p_off = np.concatenate(([0], np.cumsum(sizes[1:] * sizes[:-1] + sizes[1:])))
    a_off = np.concatenate(([0], np.cumsum(B * sizes[1:])))
    grad = np.zeros(params.shape[0])
    n_last = sizes[L]
    out = acts[a_off[L - 1]:a_off[L - 1] + B * n_last].reshape(B, n_last)
    delta = dY * (1.0 - out * out) if tanh_out else dY
    dX = None
    for l in range(L - 1, -1, -1):
        n_in, n_out = sizes[l], sizes[l + 1]
        h_in = X if l == 0 else acts[a_off[l - 1]:a_off[l - 1] + B * n_in].reshape(B, n_in)
        o = p_off[l]
        W = params[o:o + n_out * n_in].reshape(n_out, n_in)
        if want_params:
            grad[o:o + n_out * n_in] = np.dot(delta.T, h_in).ravel()
            grad[o + n_out * n_in:o + n_out * n_in + n_out] = delta.sum(axis=0)
        dh = np.dot(delta, W)
        if l > 0:
            delta = dh * (h_in > 0.0)
        else:
            dX = dh
    return grad, dX


@maybe_njit
def _backward_loops(params, sizes, tanh_out, X, acts, dY, want_params=True):
    B = X.shape[0]
    L = sizes.shape[0] - 1
    p_off = np.empty(L, dtype=np.int64)
    a_off = np.empty(L, dtype=np.int64)
    po = 0
    ao = 0
    for l in range(L):
        p_off[l] = po
        a_off[l] = ao
        po += sizes[l + 1] * sizes[l] + sizes[l + 1]
        ao += B * sizes[l + 1]
    grad = np.zeros(params.shape[0])
    n_last = sizes[L]
    out = acts[a_off[L - 1]:a_off[L - 1] + B * n_last].reshape(B, n_last)
    delta = np.empty((B, n_last))
    for i in range(B):
        for j in range(n_last):
            d = dY[i, j]
            if tanh_out:
                d *= 1.0 - out[i, j] * out[i, j]
            delta[i, j] = d
    Xc = np.ascontiguousarray(X)
    dX = np.empty((B, sizes[0]))
    for l in range(L - 1, -1, -1):
        n_in = sizes[l]
        n_out = sizes[l + 1]
        if l == 0:
            h_in = Xc
        else:
            h_in = acts[a_off[l - 1]:a_off[l - 1] + B * n_in].reshape(B, n_in)
        o = p_off[l]
        W = params[o:o + n_out * n_in].reshape(n_out, n_in)
        if want_params:
            gW = grad[o:o + n_out * n_in].reshape(n_out, n_in)
            gW[:, :] = np.dot(delta.T, h_in)
            gb = grad[o + n_out * n_in:o + n_out * n_in + n_out]
            for i in range(B):
                for j in range(n_out):
                    gb[j] += delta[i, j]
        dh = np.dot(delta, W)
        if l > 0:
            for i in range(B):
                for j in range(n_in):
                    if h_in[i, j] <= 0.0:
                        dh[i, j] = 0.0
            delta = dh
        else:
            dX = dh
    return grad, dX


# Moments below the normal range are flushed to zero.  With an exactly zero
# gradient, b1 * m rounds back to the smallest subnormal instead of reaching
# zero, and subnormal arithmetic made late-training updates ~2.5x slower.
_TINY = 2.2250738585072014e-308


def _adam_numpy(params, grad, m, v, lr, b1, b2, eps, t):
    m *= b1
    m += (1.0 - b1) * grad
    m[np.abs(m) < _TINY] = 0.0
    v *= b2
    v += (1.0 - b2) * grad * grad
    v[v < _TINY] = 0.0
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    params -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@maybe_njit
def _adam_loops(params, grad, m, v, lr, b1, b2, eps, t):
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i in range(params.shape[0]):
        g = grad[i]
        mi = b1 * m[i] + (1.0 - b1) * g
        vi = b2 * v[i] + (1.0 - b2) * g * g
        if abs(mi) < _TINY:
            mi = 0.0
        if vi < _TINY:
            vi = 0.0
        m[i] = mi
        v[i] = vi
        params[i] -= lr * (mi / c1) / (math.sqrt(vi / c2) + eps)


def _polyak_numpy(target, source, tau):
    target *= 1.0 - tau
    target += tau * source


@maybe_njit
def _polyak_loops(target, source, tau):
    keep = 1.0 - tau
    for i in range(target.shape[0]):
        target[i] = keep * target[i] + tau * source[i]


# fused element loops win under numba; whole-array ops win in plain numpy
_forward = _forward_loops if USE_NUMBA else _forward_numpy
_backward = _backward_loops if USE_NUMBA else _backward_numpy
_adam = _adam_loops if USE_NUMBA else _adam_numpy
_polyak = _polyak_loops if USE_NUMBA else _polyak_numpy


@dataclass
class GradSet:
    """Gradient of ``sum(output * upstream)`` w.r.t. parameters and input."""
    flat: np.ndarray
    dx: np.ndarray
    sizes: tuple[int, ...] = field(repr=False)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return _split(self.flat, self.sizes)


def _split(flat, sizes):
    out, o = [], 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        W = flat[o:o + n_in * n_out].reshape(n_out, n_in)
        o += n_in * n_out
        out.append((W, flat[o:o + n_out]))
        o += n_out
    return out


def n_params(sizes) -> int:
    return sum(i * o + o for i, o in zip(sizes[:-1], sizes[1:]))


class Mlp:
    """ReLU hidden layers with a tanh or linear head.

    ``action_range=(low, high)`` declares how a tanh head maps onto an
    actuator range; see :meth:`scale`.
    """

    def __init__(self, layer_sizes, activation: str = "relu_hidden_linear_out",
                 params: np.ndarray | None = None, action_range: tuple[float, float] | None = None,
                 seed: int | None = None, rng: np.random.Generator | None = None):
        if activation not in ACTIVATIONS:
            raise NetworkError(f"unknown activation {activation!r}")
        sizes = tuple(int(s) for s in layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise NetworkError("need at least an input and an output layer of positive width")
        self.sizes = sizes
        self._sizes_arr = np.array(sizes, dtype=np.int64)
        self.activation = activation
        self.tanh_out = activation == "relu_hidden_tanh_out"
        self.action_range = None if action_range is None else (float(action_range[0]), float(action_range[1]))
        if params is None:
            params = self._init_params(rng if rng is not None else np.random.default_rng(seed))
        params = np.ascontiguousarray(params, dtype=np.float64).copy()
        if params.shape != (n_params(sizes),):
            raise NetworkError(f"expected {n_params(sizes)} parameters, got {params.shape}")
        self.params = params
        self.reset_optimizer()

    def _init_params(self, rng):
        chunks = []
        n_layers = len(self.sizes) - 1
        for l, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            # final layer starts near zero so initial outputs stay mid-range
            bound = 3e-3 if l == n_layers - 1 else 1.0 / np.sqrt(n_in)
            chunks.append(rng.uniform(-bound, bound, n_in * n_out))
            chunks.append(np.zeros(n_out))
        return np.concatenate(chunks)

    def reset_optimizer(self):
        self.adam_m = np.zeros_like(self.params)
        self.adam_v = np.zeros_like(self.params)
        self.adam_t = 0

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def layers(self):
        return _split(self.params, self.sizes)

    def copy(self) -> "Mlp":
        net = Mlp(self.sizes, self.activation, self.params, self.action_range)
        net.adam_m[:] = self.adam_m
        net.adam_v[:] = self.adam_v
        net.adam_t = self.adam_t
        return net

    def scale(self, y):
        """Map head output in [-1, 1] onto ``action_range``."""
        lo, hi = self.action_range
        return lo + 0.5 * (np.asarray(y) + 1.0) * (hi - lo)

    def unscale(self, a):
        lo, hi = self.action_range
        return 2.0 * (np.asarray(a) - lo) / (hi - lo) - 1.0

    def digest(self) -> str:
        return hashlib.sha256(self.params.tobytes()).hexdigest()

    def same_architecture(self, other: "Mlp") -> bool:
        return self.sizes == other.sizes and self.activation == other.activation


def _as_batch(net: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.ascontiguousarray(x.reshape(1, -1) if single else x)
    if X.ndim != 2 or X.shape[1] != net.n_in:
        raise NetworkError(f"input width {X.shape[-1]} does not match layer size {net.n_in}")
    return X, single


def forward_cache(net: Mlp, X: np.ndarray):
    """Batched forward pass returning ``(output, activation cache)``."""
    return _forward(net.params, net._sizes_arr, net.tanh_out, X)


def forward(net: Mlp, x, scaled: bool = False) -> np.ndarray:
    X, single = _as_batch(net, x)
    y, _ = _forward(net.params, net._sizes_arr, net.tanh_out, X)
    if scaled:
        if net.action_range is None:
            raise NetworkError("network has no action_range")
        y = net.scale(y)
    return y[0] if single else y


def backward(net: Mlp, x, upstream, cache=None) -> GradSet:
    """Reverse-mode gradients of ``sum(forward(x) * upstream)``.

    For a batch, parameter gradients are summed over rows and ``dx`` keeps
    one row per sample.
    """
    X, single = _as_batch(net, x)
    dY = np.ascontiguousarray(np.asarray(upstream, dtype=np.float64).reshape(X.shape[0], -1))
    if dY.shape[1] != net.n_out:
        raise NetworkError(f"upstream width {dY.shape[1]} does not match output size {net.n_out}")
    if cache is None:
        _, cache = _forward(net.params, net._sizes_arr, net.tanh_out, X)
    flat, dx = _backward(net.params, net._sizes_arr, net.tanh_out, X, cache, dY)
    return GradSet(flat, dx[0] if single else dx, net.sizes)


def apply_update(net: Mlp, g: GradSet | np.ndarray, lr: float, optimizer: str = "adam",
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> Mlp:
    """Descend along ``g`` in place (the gradient of a loss to minimize)."""
    flat = g.flat if isinstance(g, GradSet) else np.asarray(g, dtype=np.float64)
    if flat.shape != net.params.shape:
        raise NetworkError("gradient shape does not match network parameters")
    if not np.all(np.isfinite(flat)):
        raise DivergenceError("non-finite gradient")
    if optimizer == "sgd":
        net.params -= lr * flat
    elif optimizer == "adam":
        net.adam_t += 1
        _adam(net.params, flat, net.adam_m, net.adam_v, float(lr), betas[0], betas[1], eps,
              float(net.adam_t))
    else:
        raise NetworkError(f"unknown optimizer {optimizer!r}")
    if not np.all(np.isfinite(net.params)):
        raise DivergenceError("non-finite parameters after update")
    return net


def soft_update(target: Mlp, source: Mlp, tau: float) -> Mlp:
    if not target.same_architecture(source):
        raise NetworkError("soft update between different architectures")
    if tau == 1.0:
        target.params[:] = source.params
    elif tau != 0.0:
        _polyak(target.params, source.params, float(tau))
    return target


def save_checkpoint(path, **nets: Mlp) -> None:
    """One ``.npz`` holding named networks plus a JSON architecture header."""
    header = {"version": CHECKPOINT_VERSION,
              "nets": {k: {"sizes": list(n.sizes), "activation": n.activation,
                           "action_range": n.action_range} for k, n in nets.items()}}
    arrays = {f"{k}__params": n.params for k, n in nets.items()}
    save_npz(path, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_checkpoint(path) -> dict[str, Mlp]:
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise NetworkError(f"unsupported checkpoint version {header.get('version')}")
        out = {}
        for k, meta in header["nets"].items():
            rng_ = meta["action_range"]
            out[k] = Mlp(meta["sizes"], meta["activation"], z[f"{k}__params"],
                         tuple(rng_) if rng_ is not None else None)
        return out
