"""Dense tensors with a small reverse-mode autodiff engine.

Every op creates a node with a monotonically increasing id, so the inputs of
a node always precede it and a reverse sort by id is a valid topological
order for backward. Ops keep the dtype of their inputs; precision is chosen
by whoever creates the leaf tensors (float32 for runs, float64 for gradient
checks).
"""
from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "ContractError",
    "NumericError",
    "BatchTooSmallError",
    "REGISTERED_OPS",
    "matmul",
    "transpose",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "gelu",
    "add_bias",
    "l2_normalize",
    "batch_norm_train",
    "batch_norm_eval",
    "sum_all",
    "mean_all",
    "cross_entropy",
    "backward",
    "finite_diff_check",
    "count_flops",
    "corrupt_gradient",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_ids = itertools.count()

# op name -> gradient multiplier; test-only hook used as a negative control
_GRAD_CORRUPTION: dict[str, float] = {}


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class BatchTooSmallError(ValueError):
    pass


class Tensor:
    """A node in the autodiff graph.

    ``requires_grad`` marks leaves that are trainable and any value derived
    from them. Constant tensors carry no parents and no backward rule.
    """

    __slots__ = ("data", "requires_grad", "op", "parents", "_backward", "id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar, kept to what the engine supports
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, data: np.ndarray, parents: Sequence[Tensor], rule) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out._backward = rule
    else:
        out.op = op
    return out


# ---------------------------------------------------------------------------
# FLOP counting: forward cost per the 2*m*k*n matmul convention; elementwise,
# bias and norm terms are linear in the element count.

_flop_counter: list[dict[str, int]] = []

FLOPS_PER_ELEMENT = {
    "add": 1,
    "sub": 1,
    "mul": 1,
    "scale": 1,
    "relu": 1,
    "gelu": 8,
    "add_bias": 1,
    "batch_norm": 4,
}


def _count(kind: str, n: int) -> None:
    """Record ``n`` elements of ``kind`` (matmul callers pass FLOPs directly)."""
    flops = int(n) * FLOPS_PER_ELEMENT.get(kind, 1)
    for counter in _flop_counter:
        counter[kind] = counter.get(kind, 0) + flops


@contextmanager
def count_flops():
    """Tally forward FLOPs of every matmul/elementwise/norm op in the block."""
    counter: dict[str, int] = {}
    _flop_counter.append(counter)
    try:
        yield counter
    finally:
        _flop_counter.remove(counter)


@contextmanager
def corrupt_gradient(op: str, factor: float = 1.5):
    """Scale the gradient rule of ``op`` (negative-control hook for tests)."""
    if op not in REGISTERED_OPS:
        raise KeyError(op)
    _GRAD_CORRUPTION[op] = factor
    try:
        yield
    finally:
        _GRAD_CORRUPTION.pop(op, None)


# ---------------------------------------------------------------------------
# ops


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    _count("matmul", 2 * m * k * n)
    A, B = a.data, b.data

    def rule(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _node("matmul", A @ B, (a, b), rule)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _node("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        _count("add", a.data.size)
        return _node("add", a.data + a.data.dtype.type(b), (a,), lambda g: (g,))
    b = _as_tensor(b)
    _check_same(a, b, "add")
    _count("add", a.data.size)
    return _node("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        _count("sub", a.data.size)
        return _node("sub", a.data - a.data.dtype.type(b), (a,), lambda g: (g,))
    b = _as_tensor(b)
    _check_same(a, b, "sub")
    _count("sub", a.data.size)
    return _node("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    _count("mul", a.data.size)
    A, B = a.data, b.data
    return _node("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = a.data.dtype.type(c)
    _count("scale", a.data.size)
    return _node("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    _count("relu", a.data.size)
    return _node("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU with the tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    half = x.dtype.type(0.5)
    inner = c * (x + k * x**3)
    t = np.tanh(inner)
    out = half * x * (1 + t)
    _count("gelu", x.size)

    def rule(g):
        dinner = c * (1 + 3 * k * x**2)
        return (g * (half * (1 + t) + half * x * (1 - t * t) * dinner),)

    return _node("gelu", out, (a,), rule)


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, relu, gelu."""
    if kind == "add":
        return add(a, 0 if b is None else b)
    if kind == "sub":
        return sub(a, 0 if b is None else b)
    if kind == "mul":
        return mul(a, b)
    if kind == "scale":
        return scale(a, b)
    if kind == "relu":
        return relu(a)
    if kind == "gelu":
        return gelu(a)
    raise ContractError(f"unknown elementwise kind {kind!r}")


def add_bias(x, bias) -> Tensor:
    """Row-vector bias broadcast over the batch dimension."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if x.data.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError(f"add_bias shape mismatch: {x.shape} + {bias.shape}")
    _count("add_bias", x.data.size)
    return _node("add_bias", x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)))


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Divide each row by max(||row||, eps)."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"l2_normalize expects [B, d], got {x.shape}")
    X = x.data
    norms = np.sqrt((X * X).sum(axis=1, keepdims=True))
    clipped = norms < eps
    denom = np.where(clipped, X.dtype.type(eps), norms)
    Y = X / denom

    def rule(g):
        # below eps the denominator is constant
        proj = (g * Y).sum(axis=1, keepdims=True)
        gx = np.where(clipped, g / denom, (g - Y * proj) / denom)
        return (gx,)

    return _node("l2_normalize", Y, (x,), rule)


def batch_norm_train(x, gamma, beta, eps: float = BN_EPS) -> Tensor:
    """Per-feature batch standardization (biased variance) then affine.

    Running statistics are owned by the caller; see ``batch_stats``.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 2:
        raise DimensionError(f"batch_norm expects [B, d], got {x.shape}")
    B, d = x.shape
    if B < 2:
        raise BatchTooSmallError(f"batch norm needs at least 2 rows, got {B}")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"batch_norm affine shape mismatch: {gamma.shape}, {beta.shape} for d={d}")
    X = x.data
    mu = X.mean(axis=0)
    var = X.var(axis=0)
    inv = 1.0 / np.sqrt(var + X.dtype.type(eps))
    xhat = (X - mu) * inv
    G = gamma.data
    _count("batch_norm", X.size)

    def rule(g):
        dxhat = g * G
        gx = inv / B * (B * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return (gx, (g * xhat).sum(axis=0), g.sum(axis=0))

    return _node("batch_norm_train", xhat * G + beta.data, (x, gamma, beta), rule)


def batch_norm_eval(x, gamma, beta, running_mean, running_var, eps: float = BN_EPS) -> Tensor:
    """Batch norm with fixed statistics (inference mode)."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    X = x.data
    inv = (1.0 / np.sqrt(np.asarray(running_var) + X.dtype.type(eps))).astype(X.dtype)
    xhat = (X - np.asarray(running_mean, dtype=X.dtype)) * inv
    G = gamma.data
    _count("batch_norm", X.size)

    def rule(g):
        return (g * G * inv, (g * xhat).sum(axis=0), g.sum(axis=0))

    return _node("batch_norm_eval", xhat * G + beta.data, (x, gamma, beta), rule)


def batch_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return x.mean(axis=0), x.var(axis=0)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    shape, dtype = x.shape, x.dtype
    return _node("sum", np.asarray(x.data.sum(), dtype=dtype), (x,), lambda g: (np.full(shape, g, dtype=dtype),))


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    shape, dtype, n = x.shape, x.dtype, x.data.size
    return _node(
        "mean", np.asarray(x.data.mean(), dtype=dtype), (x,), lambda g: (np.full(shape, g / n, dtype=dtype),)
    )


def cross_entropy(logits, targets) -> Tensor:
    """Mean softmax cross-entropy of integer ``targets`` under ``logits``."""
    logits = _as_tensor(logits)
    Z = logits.data
    if Z.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, C] logits, got {logits.shape}")
    B = Z.shape[0]
    if B == 0:
        raise ContractError("cross_entropy on an empty batch")
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (B,):
        raise DimensionError(f"targets shape {t.shape} does not match batch {B}")
    zmax = Z.max(axis=1, keepdims=True)
    shifted = Z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = (lse - shifted[np.arange(B), t]).mean()

    def rule(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(B), t] -= 1
        return (p * (g / B),)

    return _node("cross_entropy", np.asarray(loss, dtype=Z.dtype), (logits,), rule)


REGISTERED_OPS = (
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "gelu",
    "add_bias",
    "l2_normalize",
    "batch_norm_train",
    "batch_norm_eval",
    "sum",
    "mean",
    "cross_entropy",
)


# ---------------------------------------------------------------------------


def backward(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Reverse accumulation from a scalar ``loss``.

    Returns one gradient per entry of ``params``; parameters the loss does not
    depend on get an exact zero tensor.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        nodes: dict[int, Tensor] = {}
        stack = [loss]
        while stack:
            n = stack.pop()
            if n.id in nodes or not n.requires_grad:
                continue
            nodes[n.id] = n
            stack.extend(n.parents)
        grads[loss.id] = np.ones_like(loss.data)
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = grads.get(nid)
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            factor = _GRAD_CORRUPTION.get(node.op)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if factor is not None:
                    pg = pg * factor
                prev = grads.get(parent.id)
                grads[parent.id] = pg if prev is None else prev + pg
    out = []
    for p in params:
        g = grads.get(p.id)
        out.append(np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape))
    return out


def finite_diff_check(
    f: Callable[[Sequence[np.ndarray]], float],
    params: Sequence[np.ndarray],
    analytic: Sequence[np.ndarray],
    h: float = 1e-5,
    floor: float = 1e-8,
) -> float:
    """Worst per-coordinate relative error between ``analytic`` and central differences.

    ``f`` maps a list of arrays to a float and must not keep references to
    them; the arrays are perturbed in place and restored. The error is
    |a - n| / max(|a|, |n|, floor); ``floor`` should sit above the
    difference quotient's round-off, roughly eps * |f| / h.
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = np.asarray(ga).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(params))
            flat[i] = orig - h
            fm = float(f(params))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"non-finite objective at coordinate {i}")
            num = (fp - fm) / (2 * h)
            a = float(gflat[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
