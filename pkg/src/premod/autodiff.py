"""Small dense-tensor engine with reverse-mode differentiation.

Tensors wrap float64 numpy arrays. Every op records its parents and a
backward closure; ``backward`` walks the recorded graph in reverse
topological order and frees it afterwards.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np


class ShapeMismatch(ValueError):
    pass


class GraphReused(RuntimeError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g, owned: bool = False):
    """Add ``g`` into t.grad; ``owned`` arrays are fresh and may be adopted without a copy."""
    if t.grad is None:
        t.grad = g if owned and g.flags.writeable else np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def bw(g):
        # g is adopted by at most one parent; the other gets its own copy
        shared = False
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            shared = ga is g
            _accum(a, ga, owned=True)
        if b.requires_grad:
            gb = _unbroadcast(g, b.shape)
            _accum(b, gb, owned=not (shared and gb is g) and b is not a)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape), owned=True)
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape), owned=b is not a)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape), owned=True)
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape), owned=True)

    return _make(a.data * b.data, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accum(a, g * c, owned=True)

    return _make(a.data * c, (a,), bw)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    try:
        if b.ndim == 2 and a.ndim > 2:
            out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
        else:
            out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}") from exc

    if b.ndim == 2 and a.ndim > 2:
        # fold the batch axes into one big product
        flat = a.data.reshape(-1, a.shape[-1])

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _accum(a, (g2 @ b.data.T).reshape(a.shape), owned=True)
            if b.requires_grad:
                _accum(b, flat.T @ g2, owned=True)

        return _make(out, (a, b), bw)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape), owned=True)
        if b.requires_grad:
            _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape), owned=True)

    return _make(out, (a, b), bw)


def pow_const(a, k: float) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accum(a, g * k * a.data ** (k - 1), owned=True)

    return _make(a.data**k, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accum(a, g / a.data, owned=True)

    return _make(np.log(a.data), (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        _accum(a, g * out, owned=True)

    return _make(out, (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        _accum(a, g * mask, owned=True)

    return _make(a.data * mask, (a,), bw)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out * out), owned=True)

    return _make(out, (a,), bw)


def _sigmoid(x):
    # stable for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(np.atleast_1d(a.data)).reshape(a.shape)

    def bw(g):
        _accum(a, g * out * (1.0 - out), owned=True)

    return _make(out, (a,), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - inner), owned=True)

    return _make(out, (a,), bw)


def layer_norm(a, gamma, beta, eps: float = 1e-9) -> Tensor:
    """Normalise over the last axis, then apply scale ``gamma`` and shift ``beta``."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    n = a.shape[-1]
    if gamma.shape[-1] != n or beta.shape[-1] != n:
        raise ShapeMismatch(f"layer_norm over {n} with gamma {gamma.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, _unbroadcast(g * xhat, gamma.shape), owned=True)
        if beta.requires_grad:
            _accum(beta, _unbroadcast(g, beta.shape), owned=beta.shape != g.shape)
        if a.requires_grad:
            gx = g * gamma.data
            ga = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accum(a, ga, owned=True)

    return _make(out, (a, gamma, beta), bw)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, cuts, axis=axis)):
            if t.requires_grad:
                _accum(t, piece, owned=True)

    return _make(out, tensors, bw)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(a.shape[ax] for ax in axes)
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def bw(g):
        _accum(a, g.reshape(old), owned=True)

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)

    def bw(g):
        _accum(a, np.transpose(g, inverse), owned=True)

    return _make(np.transpose(a.data, axes), (a,), bw)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full, owned=True)

    return _make(a.data[idx], (a,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _accum(a, g * inside, owned=True)

    return _make(np.clip(a.data, lo, hi), (a,), bw)


def dropout(a, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return as_tensor(a)
    keep = (rng.random(a.shape, dtype=np.float32) >= rate) * (1.0 / (1.0 - rate))
    return mul(a, Tensor(keep))


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss._consumed:
        raise GraphReused("backward already called on this graph; rebuild it first")
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        g = node.grad
        if g is None:
            continue
        node._backward(g)
    # free intermediate buffers and the graph
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
            if node is not loss:
                node.grad = None
    loss._consumed = True


# ---------------------------------------------------------------- losses


@dataclass
class TrainHyper:
    gamma: float = 2.0
    alpha: float = 0.25
    lr0: float = 2e-4
    plateau_patience: int = 2
    plateau_factor: float = 5.0
    batch_size: int = 64
    max_epochs: int = 30
    early_stop_patience: int = 5
    dropout: float = 0.1
    loss: str = "focal"
    weight_decay: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        for name in ("lr0", "plateau_factor", "batch_size", "max_epochs", "early_stop_patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.loss not in ("focal", "bce"):
            raise ValueError(f"unknown loss {self.loss!r}")


P_EPS = 1e-12


def focal_loss(p, y, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Mean focal loss  -a_t (1 - p_t)^gamma log p_t  over a batch.

    ``p`` holds predicted probabilities, ``y`` the 0/1 labels.
    """
    p = clip(as_tensor(p), P_EPS, 1.0 - P_EPS)
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    # p_t = y*p + (1-y)*(1-p)
    pt = add(mul(p, 2.0 * y - 1.0), 1.0 - y)
    at = alpha * y + (1.0 - alpha) * (1.0 - y)
    modulator = pow_const(sub(1.0, pt), gamma) if gamma != 0 else Tensor(np.ones(p.shape))
    per_item = mul(mul(modulator, log(pt)), -at)
    return mean(per_item)


def bce_loss(p, y) -> Tensor:
    p = clip(as_tensor(p), P_EPS, 1.0 - P_EPS)
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    pt = add(mul(p, 2.0 * y - 1.0), 1.0 - y)
    return scale(mean(log(pt)), -1.0)


# ------------------------------------------------------------ optimisation


class Adam:
    """Adaptive-moment optimiser over a list of leaf tensors."""

    def __init__(self, params, lr=2e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class PlateauSchedule:
    """Divide the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, optimizer: Adam, patience: int = 2, factor: float = 5.0):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.stale = 0

    @property
    def lr(self):
        return self.optimizer.lr

    def update(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.optimizer.lr /= self.factor
                self.stale = 0
        return self.optimizer.lr
