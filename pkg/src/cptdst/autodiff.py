"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every operation records a closure mapping the output gradient to the input
gradients. Inputs that do not require gradients are skipped during the
backward pass, which is what keeps prompt tuning through a frozen backbone
cheap: no weight gradients are ever formed for frozen tensors.

Ops are deliberately coarse (fused softmax, layer norm, cross-entropy) since
Python overhead per node dominates at desk scale.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError

DTYPE = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _raise_not_scalar(t: Tensor):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _node(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), backward)


# ---------------------------------------------------------------------------
# shape and reduction


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _node(out, tensors, backward)


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Embedding lookup: ``out[...] = table[index[...]]``."""
    index = np.asarray(index, dtype=np.int64)
    out = table.data[index]

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, index.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (grad,)

    return _node(out, (table,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 2:
                ga = g @ b.data.T
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim >= 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# fused neural-net primitives


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; ``mask`` is an additive constant (e.g. -inf-like)."""
    out = a.data + mask if mask is not None else a.data.copy()
    out -= out.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        gx = g * out
        gx -= out * gx.sum(axis=axis, keepdims=True)
        return (gx,)

    return _node(out, (a,), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over (..., L, dh) heads as a single node."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    kt = np.swapaxes(k.data, -1, -2)
    p = (q.data @ kt) * scale
    if mask is not None:
        p += mask
    p -= p.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def backward(g):
        gq = gk = gv = None
        if v.requires_grad:
            gv = np.swapaxes(p, -1, -2) @ g
        if q.requires_grad or k.requires_grad:
            ds = g @ np.swapaxes(v.data, -1, -2)
            ds *= p
            ds -= p * ds.sum(axis=-1, keepdims=True)
            ds *= scale
            if q.requires_grad:
                gq = ds @ k.data
            if k.requires_grad:
                gk = np.swapaxes(ds, -1, -2) @ q.data
        return gq, gk, gv

    return _node(out, (q, k, v), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def backward(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _node(out, (x, gain, bias), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Summed negative log-likelihood of ``targets`` under softmax(``logits``).

    ``logits`` has shape (..., V) and ``targets`` the leading shape. ``weights``
    (same shape as ``targets``) masks padded positions.
    """
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    w = np.ones(t.shape, dtype=DTYPE) if weights is None else np.asarray(weights, dtype=DTYPE).reshape(-1)
    m = flat.max(axis=1, keepdims=True)
    e = np.exp(flat - m)
    z = e.sum(axis=1, keepdims=True)
    logp = flat[np.arange(t.size), t] - m[:, 0] - np.log(z[:, 0])
    loss = -(w * logp).sum()

    def backward(g):
        p = e / z
        p[np.arange(t.size), t] -= 1.0
        return ((g * w[:, None] * p).reshape(logits.shape),)

    return _node(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every graph tensor that requires a gradient."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError(f"loss is not finite: {loss.data!r}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
        # release the graph behind us, like most engines do
        node._backward = None
        node._parents = ()


# ---------------------------------------------------------------------------
# parameters and optimizers


@dataclass
class ParamGroup:
    name: str
    tensors: list[Tensor] = field(default_factory=list)
    frozen: bool = False

    def __post_init__(self):
        self._sync()

    def _sync(self) -> None:
        for t in self.tensors:
            t.requires_grad = not self.frozen
            if self.frozen:
                t.grad = None

    def freeze(self) -> None:
        self.frozen = True
        self._sync()

    def unfreeze(self) -> None:
        self.frozen = False
        self._sync()

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors)


def global_grad_norm(tensors: Iterable[Tensor]) -> float:
    return math.sqrt(sum(float((t.grad * t.grad).sum()) for t in tensors if t.grad is not None))


def _live_tensors(groups: Sequence[ParamGroup]) -> list[Tensor]:
    live = []
    for group in groups:
        if group.frozen:
            for t in group.tensors:
                t.grad = None
            continue
        for t in group.tensors:
            if t.grad is None:
                raise ContractError(f"missing gradient in non-frozen group {group.name!r}")
            if not np.isfinite(t.grad).all():
                raise NonFiniteError(f"non-finite gradient in group {group.name!r}")
            live.append(t)
    return live


class Optimizer:
    def __init__(self, lr: float, clip_norm: float | None = None):
        if lr <= 0:
            raise ContractError("learning rate must be positive")
        self.lr = lr
        self.clip_norm = clip_norm

    def step(self, groups: Sequence[ParamGroup], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        if lr <= 0:
            raise ContractError("learning rate must be positive")
        live = _live_tensors(groups)
        scale = 1.0
        if self.clip_norm is not None:
            norm = global_grad_norm(live)
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for t in live:
            self._update(t, t.grad * scale if scale != 1.0 else t.grad, lr)
            t.grad = None

    def _update(self, t: Tensor, g: np.ndarray, lr: float) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def _update(self, t, g, lr):
        t.data -= lr * g


class Adam(Optimizer):
    """Adam with decoupled weight decay (AdamW when ``weight_decay`` > 0)."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, clip_norm: float | None = 1.0):
        super().__init__(lr, clip_norm)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        self._t: dict[int, int] = {}

    def _update(self, t, g, lr):
        b1, b2 = self.betas
        key = id(t)
        m = self._m.get(key)
        if m is None:
            m = self._m[key] = np.zeros_like(t.data)
            self._v[key] = np.zeros_like(t.data)
            self._t[key] = 0
        v = self._v[key]
        self._t[key] += 1
        step = self._t[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**step)
        vhat = v / (1 - b2**step)
        if self.weight_decay:
            t.data -= lr * self.weight_decay * t.data
        t.data -= lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind: str, lr: float, clip_norm: float | None = 1.0) -> Optimizer:
    if kind == "adam":
        return Adam(lr, clip_norm=clip_norm)
    if kind == "sgd":
        return SGD(lr, clip_norm=clip_norm)
    raise ContractError(f"unknown optimizer {kind!r}")


def apply_update(params: Sequence[ParamGroup], learning_rate: float,
                 optimizer: Optimizer | None = None) -> Sequence[ParamGroup]:
    """One optimizer step over ``params``; plain unclipped SGD when no optimizer is given."""
    if learning_rate <= 0:
        raise ContractError("learning rate must be positive")
    (optimizer or SGD(learning_rate)).step(params, learning_rate)
    return params


# ---------------------------------------------------------------------------
# gradient check


def finite_difference_check(model_fn: Callable[[], Tensor], params: Sequence[Tensor | ParamGroup],
                            epsilon: float = 1e-5, max_entries: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Largest relative error between autodiff and central differences.

    For each parameter tensor the error is ``max|autodiff - fd| / max(max|fd|, 1e-8)``
    and the maximum over tensors is returned. ``max_entries`` limits how many
    coordinates per tensor are perturbed (sampled with ``rng``).
    """
    if not 0 < epsilon <= 1e-3:
        raise ContractError(f"epsilon must lie in (0, 1e-3], got {epsilon}")
    tensors: list[Tensor] = []
    for p in params:
        tensors.extend(p.tensors if isinstance(p, ParamGroup) else [p])
    saved = [t.requires_grad for t in tensors]
    rng = rng or np.random.default_rng(0)
    try:
        for t in tensors:
            t.requires_grad = True
            t.grad = None
        loss = model_fn()
        ref = loss.item()
        backward(loss)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
        with no_grad():
            if model_fn().item() != ref:
                raise ContractError("model_fn is not deterministic")
            worst = 0.0
            for t, ga in zip(tensors, analytic):
                flat = t.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_entries is not None and flat.size > max_entries:
                    idx = rng.choice(flat.size, size=max_entries, replace=False)
                fd = np.empty(idx.size)
                for n, i in enumerate(idx):
                    orig = flat[i]
                    flat[i] = orig + epsilon
                    up = model_fn().item()
                    flat[i] = orig - epsilon
                    down = model_fn().item()
                    flat[i] = orig
                    fd[n] = (up - down) / (2 * epsilon)
                err = np.abs(ga.reshape(-1)[idx] - fd).max() / max(np.abs(fd).max(), 1e-8)
                worst = max(worst, float(err))
    finally:
        for t, flag in zip(tensors, saved):
            t.requires_grad = flag
            t.grad = None
    return worst
