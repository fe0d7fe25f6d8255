"""Reverse-mode differentiable kernels over float64 numpy arrays.

A minimal tape: every op records its parents and a closure that routes the
output gradient back to them. The op set covers exactly what the models in
this repo need (matmul, broadcast add/mul, embedding gather, layer norm,
softmax / log-softmax, relu, log-sigmoid, reductions, reshape / transpose /
concat, and a fused soft-target cross entropy). Everything runs in 64-bit
so central-difference verification has headroom.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

Array = np.ndarray


def _f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Node in the computation graph: float64 data plus an optional backward hook."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 parents: tuple = (), backward: Optional[Callable[[Array], None]] = None):
        self.data = _f64(data)
        self.grad: Optional[Array] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf's .grad."""
        if self.data.size != 1:
            raise ValueError("backward() is only defined for scalar outputs")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_f64(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set")
        return mul(self, 1.0 / _f64(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum a gradient back down to the shape it was broadcast up from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def bwd(g: Array) -> None:
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return Tensor(out, parents=(a, b), backward=bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def bwd(g: Array) -> None:
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out, parents=(a, b), backward=bwd)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects inputs with ndim >= 2")
    out = a.data @ b.data

    def bwd(g: Array) -> None:
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_unbroadcast(gb, b.data.shape))

    return Tensor(out, parents=(a, b), backward=bwd)


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def bwd(g: Array) -> None:
        x._accum(g * mask)

    return Tensor(out, parents=(x,), backward=bwd)


def gather_rows(table, idx) -> Tensor:
    """Row lookup (embedding gather): table (N, n) indexed by an int array of any shape."""
    table = _wrap(table)
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]

    def bwd(g: Array) -> None:
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        table._accum(gt)

    return Tensor(out, parents=(table,), backward=bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = (x.data - mu) / std
    out = gain.data * xhat + bias.data

    def bwd(g: Array) -> None:
        sum_axes = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            gain._accum(_unbroadcast((g * xhat).sum(axis=sum_axes), gain.data.shape))
        if bias.requires_grad:
            bias._accum(_unbroadcast(g.sum(axis=sum_axes), bias.data.shape))
        if x.requires_grad:
            gx = g * gain.data
            gi = (gx - gx.mean(axis=-1, keepdims=True)
                  - xhat * (gx * xhat).mean(axis=-1, keepdims=True)) / std
            x._accum(gi)

    return Tensor(out, parents=(x, gain, bias), backward=bwd)


def _softmax_np(z: Array, axis: int = -1) -> Array:
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_np(z: Array, axis: int = -1) -> Array:
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


# plain-array aliases used across the repo
softmax_np = _softmax_np
log_softmax_np = _log_softmax_np


def softmax(x) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    x = _wrap(x)
    y = _softmax_np(x.data)

    def bwd(g: Array) -> None:
        x._accum(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return Tensor(y, parents=(x,), backward=bwd)


def log_softmax(x) -> Tensor:
    x = _wrap(x)
    out = _log_softmax_np(x.data)
    p = np.exp(out)

    def bwd(g: Array) -> None:
        x._accum(g - p * g.sum(axis=-1, keepdims=True))

    return Tensor(out, parents=(x,), backward=bwd)


def _sigmoid_np(z: Array) -> Array:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


sigmoid_np = _sigmoid_np


def log_sigmoid(x) -> Tensor:
    """log(sigmoid(x)), computed as -softplus(-x) for stability."""
    x = _wrap(x)
    z = x.data
    out = np.where(z >= 0, -np.log1p(np.exp(-np.abs(z))), z - np.log1p(np.exp(-np.abs(z))))

    def bwd(g: Array) -> None:
        # d/dx log sigmoid(x) = sigmoid(-x)
        x._accum(g * _sigmoid_np(-z))

    return Tensor(out, parents=(x,), backward=bwd)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g: Array) -> None:
        if axis is None:
            x._accum(np.broadcast_to(g, x.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            x._accum(np.broadcast_to(gg, x.data.shape).copy())

    return Tensor(out, parents=(x,), backward=bwd)


def mean(x) -> Tensor:
    x = _wrap(x)
    return tsum(x) / float(x.data.size)


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    out = x.data.reshape(shape)

    def bwd(g: Array) -> None:
        x._accum(g.reshape(x.data.shape))

    return Tensor(out, parents=(x,), backward=bwd)


def transpose(x, axes) -> Tensor:
    x = _wrap(x)
    axes = tuple(axes)
    out = x.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g: Array) -> None:
        x._accum(g.transpose(inv))

    return Tensor(out, parents=(x,), backward=bwd)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g: Array) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accum(g[tuple(sl)])

    return Tensor(out, parents=tuple(parts), backward=bwd)


def weighted_soft_ce(targets: Array, logits, weights: Array) -> Tensor:
    """Fused sum_i w_i * CE(target_i, logits_i) over rows.

    targets (M, V) and weights (M,) are constants; the gradient w.r.t. logits
    is w_i * (softmax(logits_i) - target_i), exact by construction.
    """
    logits = _wrap(logits)
    targets = _f64(targets)
    weights = _f64(weights)
    if targets.shape != logits.data.shape:
        raise ValueError(f"target shape {targets.shape} != logits shape {logits.data.shape}")
    ls = _log_softmax_np(logits.data)
    out = -float((weights * (targets * ls).sum(axis=-1)).sum())

    def bwd(g: Array) -> None:
        p = np.exp(ls)
        logits._accum(float(g) * weights[:, None] * (p - targets))

    return Tensor(out, parents=(logits,), backward=bwd)


def cross_entropy_soft(target, logits):
    """Cross entropy -sum_i target_i * log softmax(logits)_i for one distribution.

    target must be a probability vector (sums to 1 within 1e-9) of the same
    length as logits. Differentiable w.r.t. logits with gradient
    softmax(logits) - target. Returns a Tensor when logits is a Tensor,
    otherwise a float.
    """
    t = _f64(target)
    is_tensor = isinstance(logits, Tensor)
    z = logits.data if is_tensor else _f64(logits)
    if t.ndim != 1 or z.ndim != 1 or t.shape != z.shape:
        raise ValueError(f"target/logits length mismatch: {t.shape} vs {z.shape}")
    if abs(float(t.sum()) - 1.0) > 1e-9:
        raise ValueError(f"target is not normalized (sum={float(t.sum())!r})")
    if np.any(t < 0):
        raise ValueError("target has negative entries")
    if not is_tensor:
        return -float((t * _log_softmax_np(z)).sum())
    return weighted_soft_ce(t[None, :], reshape(logits, (1, z.shape[0])), np.ones(1))


class ParamSet:
    """Named float64 tensors with fixed shapes for the lifetime of a run."""

    def __init__(self, arrays: Mapping[str, Array]):
        self._arrays: Dict[str, Array] = {}
        for name, arr in arrays.items():
            a = _f64(arr)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"parameter {name!r} contains non-finite values")
            self._arrays[name] = a

    def names(self):
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def __getitem__(self, name: str) -> Array:
        return self._arrays[name]

    def __setitem__(self, name: str, value: Array) -> None:
        a = _f64(value)
        if name in self._arrays and a.shape != self._arrays[name].shape:
            raise ValueError(f"shape of {name!r} is fixed at {self._arrays[name].shape}")
        self._arrays[name] = a

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def n_params(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._arrays.items()})

    def leaves(self, requires_grad: bool = True) -> Dict[str, Tensor]:
        """Fresh graph leaves sharing this set's storage."""
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self._arrays.items()}

    def validate_finite(self) -> None:
        for name, a in self._arrays.items():
            if not np.all(np.isfinite(a)):
                raise ValueError(f"parameter {name!r} became non-finite")


@dataclass
class GradReport:
    """Max relative error between analytic and central-difference gradients, per tensor."""

    eps: float
    per_tensor: Dict[str, float]

    @property
    def max_rel_error(self) -> float:
        return max(self.per_tensor.values()) if self.per_tensor else 0.0


LossFn = Callable[[Dict[str, Tensor]], Tensor]


def value_and_grad(fn: LossFn, params: ParamSet):
    """Evaluate fn on fresh leaves and return (scalar value, grads by name)."""
    leaves = params.leaves(requires_grad=True)
    out = fn(leaves)
    out.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for k, t in leaves.items()}
    return out.item(), grads


def grad_check(fn: LossFn, params: ParamSet, eps: float = 1e-5,
               sample: Optional[int] = None, seed: int = 0) -> GradReport:
    """Compare analytic gradients of fn against central finite differences.

    Perturbs each coordinate (or `sample` seeded coordinates per tensor) by
    +-eps in place. Relative error falls back to absolute error when both
    gradients are near zero.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    value, grads = value_and_grad(fn, params)
    if not np.isfinite(value):
        raise ValueError("loss is non-finite at the evaluation point")
    rng = np.random.default_rng(seed)

    def evaluate() -> float:
        return float(fn(params.leaves(requires_grad=False)).data)

    per_tensor: Dict[str, float] = {}
    for name, arr in params.items():
        n = arr.size
        if sample is not None and sample < n:
            coords = rng.choice(n, size=sample, replace=False)
        else:
            coords = range(n)
        worst = 0.0
        flat = arr.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = evaluate()
            flat[i] = orig - eps
            f_minus = evaluate()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            an = float(grads[name].reshape(-1)[i])
            denom = max(abs(fd), abs(an))
            err = abs(fd - an) / denom if denom > 1e-8 else abs(fd - an)
            worst = max(worst, err)
        per_tensor[name] = worst
    return GradReport(eps=eps, per_tensor=per_tensor)
