"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record onto a :class:`Tape` while one is active (``with
Tape() as tape:``). Outside a tape everything runs as plain numpy, which is
what inference and greedy decoding use.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class NumericError(ArithmeticError):
    """Raised when a primitive receives non-finite input."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; every one of these maps to a recorded primitive
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


@dataclass
class Node:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as operations execute, so the list is topologically
    ordered by construction.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: list = []


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        _ACTIVE.append(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()


def recording() -> bool:
    return bool(_ACTIVE) and _ACTIVE[-1] is not None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: tuple, backward: Callable) -> Tensor:
    if _ACTIVE and _ACTIVE[-1] is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].nodes.append(Node(inputs, out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(root: Tensor, tape: Tape) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every leaf on ``tape``.

    Leaves that take part in the tape but do not reach ``root`` end up with a
    zero gradient buffer.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    produced = {id(n.output) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    if id(root) not in produced and root.requires_grad:
        leaves[id(root)] = root
    for key, t in leaves.items():
        g = grads.get(key)
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        if g is not None:
            t.grad = t.grad + g


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)
    sa, sb = a.shape, b.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bw)


def matmul(a, b) -> Tensor:
    """np.matmul semantics, including 1-d operands and batch broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError("matmul operands must be at least 1-d")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bw(g):
        A = a.data[None, :] if a.ndim == 1 else a.data
        B = b.data[:, None] if b.ndim == 1 else b.data
        G = g
        if a.ndim == 1:
            G = np.expand_dims(G, -2)
        if b.ndim == 1:
            G = np.expand_dims(G, -1)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(G, np.swapaxes(B, -1, -2)), A.shape)
            if a.ndim == 1:
                ga = ga.reshape(a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(A, -1, -2), G), B.shape)
            if b.ndim == 1:
                gb = gb.reshape(b.shape)
        return ga, gb

    return _record(out, (a, b), bw)


# ------------------------------------------------------------ nonlinearities


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = Tensor(s)
    return _record(out, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)
    out = Tensor(t)
    return _record(out, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, 0.0))
    return _record(out, (x,), lambda g: (g * pos,))


# ------------------------------------------------------------- shape ops


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        idx = [slice(None)] * g.ndim
        res = []
        for i in range(len(tensors)):
            idx[axis] = slice(bounds[i], bounds[i + 1])
            res.append(g[tuple(idx)])
        return tuple(res)

    return _record(out, tuple(tensors), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along a new axis (reshape + concat)."""
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(out, tuple(tensors), bw)


def slice_(x: Tensor, key) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data[key])
    shape = x.shape

    fancy = _is_fancy(key)

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        if fancy:
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _record(out, (x,), bw)


def _is_fancy(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    old = x.shape
    return _record(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    out = Tensor(np.transpose(x.data, axes))
    inv = tuple(np.argsort(axes))
    return _record(out, (x,), lambda g: (np.transpose(g, inv),))


def gather(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of ``table`` (first axis) selected by ``ids``."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"gather index out of range for table of {table.shape[0]} rows")
    out = Tensor(table.data[ids])

    def bw(g):
        full = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(full, ids, g)
        return (full,)

    return _record(out, (table,), bw)


def pick(x: Tensor, idx) -> Tensor:
    """Select one entry along the last axis per leading position."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ValueError(f"pick index shape {idx.shape} != {x.shape[:-1]}")
    out = Tensor(np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0])

    def bw(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _record(out, (x,), bw)


# ------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))
    shape = x.shape
    n = x.size // max(out.size, 1) if x.size else 1

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _record(out, (x,), bw)


def mean_square_difference(a: Tensor, b: Tensor, weights=None) -> Tensor:
    """Weighted mean of (a - b)^2; ``weights`` broadcasts against the difference."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a.data - b.data
    w = np.ones_like(d) if weights is None else np.broadcast_to(np.asarray(weights, DTYPE), d.shape)
    total = w.sum()
    val = float((w * d * d).sum() / total) if total > 0 else 0.0
    out = Tensor(val)

    def bw(g):
        if total <= 0:
            return np.zeros_like(d), np.zeros_like(d)
        gd = g * 2.0 * w * d / total
        return gd, -gd

    return _record(out, (a, b), bw)


# ---------------------------------------------------------------- layers


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout. Identity when not training or p == 0."""
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, mask)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _record(out, (x, gain, bias), bw)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Cosine along ``axis``; rows where either vector has zero norm give 0 with zero gradient."""
    a, b = _as_tensor(a), _as_tensor(b)
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    ok = (na > 0) & (nb > 0)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    cos = np.where(ok, dot / (na_s * nb_s), 0.0)
    out = Tensor(np.squeeze(cos, axis=axis))

    def bw(g):
        g = np.expand_dims(g, axis) * ok
        ga = g * (b.data / (na_s * nb_s) - cos * a.data / (na_s * na_s)) if a.requires_grad else None
        gb = g * (a.data / (na_s * nb_s) - cos * b.data / (nb_s * nb_s)) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), bw)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    axis = _check_axis(x, axis)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)
    return _record(out, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, target) -> Tensor:
    """-log softmax(logits)[target] per leading position (scalar for 1-d logits)."""
    logits = _as_tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    V = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ValueError(f"target shape {target.shape} != {logits.shape[:-1]}")
    if target.size and (target.min() < 0 or target.max() >= V):
        raise ValueError(f"target index out of range for vocabulary of {V}")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("cross_entropy received non-finite logits")
    logp = log_softmax_np(logits.data)
    out = Tensor(-np.take_along_axis(logp, target[..., None], axis=-1)[..., 0])

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, target[..., None], np.take_along_axis(p, target[..., None], -1) - 1.0, axis=-1)
        return (p * np.expand_dims(g, -1),)

    return _record(out, (logits,), bw)


# -------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    base_lr: float = 1e-3
    weight_decay: float = 0.0


def adam_step(param: Tensor, grad: np.ndarray, state: AdamState, lr: float) -> None:
    """One in-place Adam update with bias correction and decoupled weight decay."""
    grad = np.asarray(grad, dtype=DTYPE)
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ValueError(f"adam shape mismatch: param {param.shape}, grad {grad.shape}")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    if lr == 0.0:
        return
    if state.weight_decay:
        param.data = param.data - lr * state.weight_decay * param.data
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.states = [
            AdamState(np.zeros_like(p.data), np.zeros_like(p.data), 0, betas[0], betas[1], eps, lr, weight_decay)
            for p in self.params
        ]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p, s in zip(self.params, self.states):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(p, g, s, lr)


def lr_at(epoch: int, base_lr: float, warmup_epochs: int) -> float:
    """Linear warmup reaching ``base_lr`` at epoch ``warmup_epochs - 1``."""
    if warmup_epochs < 0:
        raise ValueError("warmup_epochs must be >= 0")
    return base_lr * min(1.0, (epoch + 1) / max(1, warmup_epochs))


# ----------------------------------------------------------- gradient check


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f().data)
        flat[i] = old - h
        fm = float(f().data)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-5) -> float:
    """||a - b|| / max(||a|| + ||b||, floor).

    The floor keeps gradients that are exactly zero in theory (finite
    differences then return rounding noise near 1e-11) from reading as 100%
    error; it acts like an absolute tolerance of ``floor * tol``.
    """
    num = float(np.linalg.norm(a - b))
    den = max(float(np.linalg.norm(a)) + float(np.linalg.norm(b)), floor)
    return num / den


def gradcheck(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between tape gradients and finite differences."""
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    with Tape() as tape:
        out = f()
    backward(out, tape)
    worst = 0.0
    for x in inputs:
        num = numeric_grad(f, x, h)
        worst = max(worst, relative_error(x.grad, num))
    return worst


def param_count(params: Iterable[Tensor]) -> int:
    return sum(math.prod(p.shape) for p in params)
