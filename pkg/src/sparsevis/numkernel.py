"""Dense float64 primitives with a minimal reverse-mode gradient tape.

Every op accepts :class:`Tensor` or plain arrays and returns a :class:`Tensor`.
When a :class:`GradientTape` is active and some input requires a gradient, the
op appends its output node to the tape together with a backward closure.
Replaying the tape in reverse order applies the chain rule.

Shapes follow numpy conventions: a "matrix" is ``(rows, cols)`` and any
leading axes are batch axes, so the same kernels serve single samples and
mini-batches.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

RMS_EPS = 1e-6

_state = threading.local()


class Tensor:
    """An ndarray plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


class GradientTape:
    """Ordered record of primitive applications.

    Use as a context manager; ops executed inside are recorded.  Tapes nest
    per thread, and only the innermost one records.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with GradientTape() as tape:
    ...     loss = sum_all(matmul(w, w))
    >>> tape.gradient(loss, [w])[0]
    array([[4., 4.],
           [4., 4.]])
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "GradientTape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``target`` w.r.t. ``sources``.

        Sources the target does not depend on get exact zeros.
        """
        if target.data.size != 1:
            raise ValueError(f"target must be scalar, got shape {target.data.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not (isinstance(parent, Tensor) and parent.requires_grad):
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _active_tape() -> GradientTape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _node(out: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    tape = _active_tape()
    if tape is None or not any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        return Tensor(out)
    t = Tensor(out, requires_grad=True)
    t._parents = parents
    t._backward = backward
    tape.nodes.append(t)
    return t


@contextlib.contextmanager
def no_grad():
    """Suspend recording on this thread."""
    saved = getattr(_state, "tapes", None)
    _state.tapes = []
    try:
        yield
    finally:
        _state.tapes = saved


# --------------------------------------------------------------------------
# multiply-accumulate instrumentation


class MacCounter:
    """Counts multiply-accumulates executed by the matrix kernels."""

    def __init__(self):
        self.macs = 0
        self.paused = 0

    def add(self, n: int) -> None:
        if not self.paused:
            self.macs += int(n)

    @property
    def flops(self) -> int:
        return 2 * self.macs


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    saved = getattr(_state, "counter", None)
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = saved


@contextlib.contextmanager
def uncounted():
    """Exclude the enclosed kernels from an active MAC count."""
    counter = getattr(_state, "counter", None)
    if counter is not None:
        counter.paused += 1
    try:
        yield
    finally:
        if counter is not None:
            counter.paused -= 1


def _count(n: int) -> None:
    counter = getattr(_state, "counter", None)
    if counter is not None:
        counter.add(n)


# --------------------------------------------------------------------------
# shape helpers


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# --------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)

    def backward(g):
        return _unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)

    return _node(ad + bd, (a, b), backward)


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, (a, b), backward)


def scale(a, c: float) -> Tensor:
    return _node(_data(a) * c, (a,), lambda g: (g * c,))


def sum_all(a) -> Tensor:
    ad = _data(a)
    return _node(np.asarray(ad.sum()), (a,), lambda g: (np.broadcast_to(g, ad.shape).copy(),))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    ad = _data(a)
    return _node(ad.reshape(shape), (a,), lambda g: (g.reshape(ad.shape),))


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(_data(a), axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(parts: Sequence, axis: int) -> Tensor:
    datas = [_data(p) for p in parts]
    bounds = np.cumsum([0] + [d.shape[axis] for d in datas])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(datas))
        )

    return _node(np.concatenate(datas, axis=axis), tuple(parts), backward)


def slice_axis(a, start: int, stop: int, axis: int) -> Tensor:
    ad = _data(a)
    index = [slice(None)] * ad.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(ad)
        full[index] = g
        return (full,)

    return _node(ad[index], (a,), backward)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``."""
    td = _data(table)
    ids = np.asarray(ids)

    def backward(g):
        gt = np.zeros_like(td)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, td.shape[-1]))
        return (gt,)

    return _node(td[ids], (table,), backward)


def silu(a) -> Tensor:
    ad = _data(a)
    sig = 1.0 / (1.0 + np.exp(-ad))

    def backward(g):
        return (g * (sig * (1.0 + ad * (1.0 - sig))),)

    return _node(ad * sig, (a,), backward)


# --------------------------------------------------------------------------
# matrix kernels


def matmul(a, b) -> Tensor:
    """Matrix product with batch broadcasting over leading axes."""
    ad, bd = _data(a), _data(b)
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} x {bd.shape}")
    out = np.matmul(ad, bd)
    _count(out.size * ad.shape[-1])

    def backward(g):
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(_swap(ad), g), bd.shape)
        ga = _unbroadcast(np.matmul(g, _swap(bd)), ad.shape)
        return ga, gb

    return _node(out, (a, b), backward)


def _softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    # rows that are entirely -inf get all-zero weights
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=-1, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def softmax_rows(a) -> Tensor:
    """Row-wise softmax with per-row max subtraction."""
    y = _softmax(_data(a))

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (a,), backward)


def rmsnorm(x, gain, eps: float = RMS_EPS) -> Tensor:
    xd, gd = _data(x), _data(gain)
    if gd.shape != xd.shape[-1:]:
        raise ValueError(f"gain length {gd.shape} does not match feature dim {xd.shape[-1]}")
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xhat = xd * r

    def backward(g):
        ggain = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)
        dxhat = g * gd
        gx = r * (dxhat - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        return gx, ggain

    return _node(xhat * gd, (x, gain), backward)


def scaled_dot_attention(q, k, v, mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """``softmax(q kᵀ / sqrt(d) + mask) v``.

    ``mask`` is additive (0 keeps, -inf drops) and broadcasts against the
    ``(..., n_q, n_k)`` score matrix.  Returns the output tensor and the
    attention weights as a plain array (weights are not differentiated).
    """
    qd, kd, vd = _data(q), _data(k), _data(v)
    if qd.shape[-1] != kd.shape[-1] or kd.shape[-2] != vd.shape[-2]:
        raise ValueError(f"attention shape mismatch: q{qd.shape} k{kd.shape} v{vd.shape}")
    c = 1.0 / math.sqrt(qd.shape[-1])
    scores = np.matmul(qd, _swap(kd)) * c
    _count(scores.size * qd.shape[-1])
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape[-2:] != scores.shape[-2:]:
            raise ValueError(f"mask shape {mask.shape} does not match scores {scores.shape}")
        scores = scores + mask
    w = _softmax(scores)
    out = np.matmul(w, vd)
    _count(out.size * w.shape[-1])

    def backward(g):
        gv = _unbroadcast(np.matmul(_swap(w), g), vd.shape)
        gw = np.matmul(g, _swap(vd))
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * c
        gq = _unbroadcast(np.matmul(gs, kd), qd.shape)
        gk = _unbroadcast(np.matmul(_swap(gs), qd), kd.shape)
        return gq, gk, gv

    return _node(out, (q, k, v), backward), w


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), -np.inf), k=1)


def rope_tables(positions: np.ndarray, dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    half = dim // 2
    freqs = base ** (-np.arange(half) / half)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang), np.sin(ang)


def _rotate_half(x: np.ndarray) -> np.ndarray:
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def rope(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding over the last axis of ``(..., n, dim)``."""
    xd = _data(x)

    def backward(g):
        gs = g * sin
        h = g.shape[-1] // 2
        return (g * cos + np.concatenate([gs[..., h:], -gs[..., :h]], axis=-1),)

    return _node(xd * cos + _rotate_half(xd) * sin, (x,), backward)


def depthwise_conv1d(x, kernels, padding: int) -> Tensor:
    """Per-channel convolution along the token axis.

    ``x`` is ``(..., n, c)`` and ``kernels`` is ``(c, k)`` with odd ``k``;
    ``out[t, ch] = sum_j kernels[ch, j] * x[t + j - padding, ch]`` with zero
    padding outside the sequence.
    """
    xd, kd = _data(x), _data(kernels)
    c, k = kd.shape
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if xd.shape[-1] != c:
        raise ValueError(f"kernels cover {c} channels, input has {xd.shape[-1]}")
    n = xd.shape[-2]
    if n + 2 * padding - k + 1 != n:
        raise ValueError(f"padding {padding} does not preserve length for kernel size {k}")
    pad = [(0, 0)] * xd.ndim
    pad[-2] = (padding, padding)
    xp = np.pad(xd, pad)
    out = np.zeros_like(xd)
    for j in range(k):
        out += xp[..., j : j + n, :] * kd[:, j]
    _count(xd.size * k)

    def backward(g):
        gp = np.zeros_like(xp)
        gk = np.empty_like(kd)
        for j in range(k):
            gp[..., j : j + n, :] += g * kd[:, j]
            gk[:, j] = (g * xp[..., j : j + n, :]).reshape(-1, c).sum(axis=0)
        index = [slice(None)] * xd.ndim
        index[-2] = slice(padding, padding + n)
        return gp[tuple(index)], gk

    return _node(out, (x, kernels), backward)


def cross_entropy(logits, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted mean of token cross-entropies.

    ``targets`` holds class ids with the shape of ``logits`` minus the last
    axis; ``weights`` (same shape) selects and weighs positions.
    """
    ld = _data(logits)
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise ValueError("cross_entropy needs at least one weighted position")
    m = ld.max(axis=-1, keepdims=True)
    logz = m + np.log(np.exp(ld - m).sum(axis=-1, keepdims=True))
    logp = ld - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * weights).sum() / total

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return ((p - onehot) * (weights / total)[..., None] * g,)

    return _node(np.asarray(loss), (logits,), backward)


# --------------------------------------------------------------------------
# finite-difference check


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    floor: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Worst componentwise error between tape and central-difference gradients.

    ``loss_fn`` rebuilds the scalar loss from the current values of
    ``params``, which are perturbed in place and restored.  The error for a
    component is ``|a - b| / max(|a|, |b|)``, falling back to the absolute
    error ``|a - b|`` when both magnitudes are below ``floor``.  With
    ``max_entries`` only a seeded random subset of components is probed.
    """
    params = list(params)
    for p in params:
        p.requires_grad = True
    with GradientTape() as tape:
        loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    analytic = tape.gradient(loss, params)

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if max_entries is not None and max_entries < len(coords):
        pick = np.random.default_rng(seed).choice(len(coords), size=max_entries, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            saved = flat[j]
            flat[j] = saved + eps
            up = float(loss_fn().data)
            flat[j] = saved - eps
            down = float(loss_fn().data)
            flat[j] = saved
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("loss is not finite under perturbation")
            numeric = (up - down) / (2 * eps)
            a = float(analytic[i].reshape(-1)[j])
            diff = abs(a - numeric)
            mag = max(abs(a), abs(numeric))
            err = diff / mag if mag >= floor else diff
            worst = max(worst, err)
    return worst
