"""Dense tensors with reverse-mode autodiff, AdamW and a finite-difference checker.

Tensors wrap a numpy array. Every op records its parents and a closure that
pushes the output gradient back; ``Tensor.backward`` walks the graph in
reverse topological order. Shapes must match exactly except for the
broadcasts each op documents (bias-add over rows, shared right operand in
``matmul``, explicit ``broadcast_to``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "gather",
    "gelu",
    "softmax",
    "layer_norm",
    "cross_entropy",
    "tsum",
    "mean",
    "grad_check",
    "AdamWState",
    "adamw_init",
    "adamw_step",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


class NumericError(FloatingPointError):
    """Raised on non-finite inputs or losses."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(_needs_grad(p) for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def _is_bias(a: Tensor, b: Tensor) -> bool:
    return b.ndim == 1 and a.ndim >= 1 and b.shape == a.shape[-1:]


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a bias vector added to every row of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g))
    if _is_bias(a, b):
        axes = tuple(range(a.ndim - 1))
        return _result(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes)))
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    if _is_bias(a, b):
        axes = tuple(range(a.ndim - 1))
        return _result(
            a.data * b.data, (a, b), lambda g: (g * b.data, (g * a.data).sum(axis=axes))
        )
    raise ShapeError(f"mul: shapes {a.shape} and {b.shape} are incompatible")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Batched matrix product.

    ``b`` either has the same leading (batch) dims as ``a`` or is a plain
    matrix shared across all of ``a``'s batch dims.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    shared = b.ndim == 2 and a.ndim > 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} and {b.shape[:-2]} differ")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    """Expand size-1 axes of ``a`` to ``shape``; ranks must already agree."""
    a = as_tensor(a)
    if a.ndim != len(shape) or any(s != 1 and s != t for s, t in zip(a.shape, shape)):
        raise ShapeError(f"broadcast_to: cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s == 1 and t != 1)
    return _result(
        np.broadcast_to(a.data, shape).copy(),
        (a,),
        lambda g: (g.sum(axis=axes, keepdims=True),),
    )


def gather(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; rows never looked up get exactly zero gradient."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"gather: table must be 2-d, got {table.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("gather: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"gather: ids out of range for table with {table.shape[0]} rows")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[ids], (table,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), backward)


def softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is an additive constant (e.g. a large negative value on padded
    keys) broadcast against ``a``; it carries no gradient.
    """
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax: non-finite input")
    x = a.data if mask is None else a.data + mask
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """``gamma * (x - mean) / sqrt(var + eps) + beta`` over the last axis."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match last axis of {x.shape}"
        )
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    axes = tuple(range(x.ndim - 1))

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(out, (x, gamma, beta), backward)


def cross_entropy(logits, target, reduction: str = "mean") -> Tensor:
    """``-log softmax(logits)[target]``.

    ``logits`` is a vector with an integer target, or an (N, V) matrix with N
    targets, reduced by ``reduction`` ("mean" or "sum").
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    t = np.atleast_1d(np.asarray(target))
    if z.ndim != 2 or t.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {t.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        raise TypeError("cross_entropy: targets must be integers")
    if t.size and (t.min() < 0 or t.max() >= z.shape[1]):
        raise IndexError(f"cross_entropy: target out of range for {z.shape[1]} classes")
    if not np.all(np.isfinite(z)):
        raise NumericError("cross_entropy: non-finite logits")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    losses = lse - shifted[rows, t]
    denom = z.shape[0] if reduction == "mean" else 1
    total = losses.sum() / denom

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, t] -= 1.0
        p *= g / denom
        return (p[0] if single else p,)

    return _result(np.asarray(total, dtype=z.dtype), (logits,), backward)


def tsum(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a) -> Tensor:
    return scale(tsum(a), 1.0 / a.data.size)


def grad_check(
    fn: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray] | np.ndarray,
    h: float = 1e-6,
    per_tensor: bool = False,
    oracle_dtype=np.float64,
):
    """Compare reverse-mode gradients with central differences.

    ``fn`` maps a dict of tensors to a scalar tensor (a bare array is wrapped
    as ``{"x": array}``). Reverse mode always runs in float64. Relative error
    per component is ``|a - n| / max(|a|, |n|, 1e-8)``. Returns the max over
    all components, or a ``{name: max error}`` dict when ``per_tensor`` is set.

    ``oracle_dtype=np.longdouble`` evaluates the differences in extended
    precision. In float64 their roundoff floor is around 1e-11 absolute,
    which alone exceeds a 1e-5 relative budget on components below ~1e-6.
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    if isinstance(params, np.ndarray):
        params = {"x": params}
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in base.items()}
    loss = fn(leaves)
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: non-finite loss")
    loss.backward()

    def evaluate(arrays):
        value = fn({k: Tensor(v) for k, v in arrays.items()}).data[()]
        if not np.isfinite(value):
            raise NumericError("grad_check: non-finite loss during perturbation")
        return value

    errors: dict[str, float] = {}
    for name, arr in base.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        work = {k: v.astype(oracle_dtype) for k, v in base.items()}
        probe = work[name]
        flat = probe.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate(work)
            flat[i] = orig - h
            fm = evaluate(work)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * oracle_dtype(h))
        a = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        errors[name] = float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
    if per_tensor:
        return errors
    return max(errors.values(), default=0.0)


@dataclass(frozen=True)
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01

    def hyper(self) -> dict[str, float]:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
        }


def adamw_init(params: Mapping[str, np.ndarray], **hyper) -> AdamWState:
    state = AdamWState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        **hyper,
    )
    if state.lr <= 0 or state.eps <= 0 or state.weight_decay < 0:
        raise ValueError("adamw: lr and eps must be positive, weight_decay non-negative")
    if not (0 < state.beta1 < 1 and 0 < state.beta2 < 1):
        raise ValueError("adamw: betas must lie in (0, 1)")
    return state


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamWState,
) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One decoupled-weight-decay Adam update; inputs are left untouched.

    Parameters missing from ``grads`` are carried over unchanged (frozen).
    """
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params: dict[str, np.ndarray] = {}
    new_m = dict(state.m)
    new_v = dict(state.v)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            continue
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ShapeError(f"adamw: gradient for {name!r} has shape {g.shape}, param {p.shape}")
        dt = p.dtype
        m = (b1 * state.m[name] + (1 - b1) * g).astype(dt)
        v = (b2 * state.v[name] + (1 - b2) * g * g).astype(dt)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params[name] = (p * (1 - state.lr * state.weight_decay) - state.lr * update).astype(dt)
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, step=t, m=new_m, v=new_v)
