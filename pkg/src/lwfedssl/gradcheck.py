"""Finite-difference gradient suite over every registered op and the local SSL loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .model import ModelSpec, build_model
from .ssl import MomentumBranch, SslConfig, ssl_loss
from .tensor import Tensor

TOLERANCE = 1e-4
# The composite loss has coordinates whose true gradient is exactly zero
# (a BN shift feeding straight into another BN). With B=4 the batch norms
# amplify round-off, so those difference quotients are noise up to ~2e-9.
# Gradients below the floor are therefore judged on absolute error.
COMPOSITE_STEP = 1e-5
COMPOSITE_FLOOR = 1e-4
CASES_PER_OP = 7
COMPOSITE = "ssl_loss"


@dataclass
class OpResult:
    name: str
    cases: int = 0
    max_rel_error: float = 0.0

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= TOLERANCE


@dataclass
class GradcheckReport:
    results: list[OpResult] = field(default_factory=list)

    @property
    def cases(self) -> int:
        return sum(r.cases for r in self.results)

    @property
    def worst(self) -> OpResult:
        return max(self.results, key=lambda r: r.max_rel_error)

    @property
    def failures(self) -> list[OpResult]:
        return [r for r in self.results if not r.ok]

    @property
    def ok(self) -> bool:
        return not self.failures


def _weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    # Reduction used as the scalar objective. It is deliberately not a
    # registered op so a corrupted rule never leaks into other ops' checks.
    return T._node("probe", np.asarray((y.data * w).sum(), dtype=y.dtype), (y,), lambda g: (g * w,))


def _away_from_zero(a: np.ndarray, margin: float = 0.1) -> np.ndarray:
    return np.sign(a) * (np.abs(a) + margin) + (a == 0) * margin


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[..., Tensor], list[np.ndarray]]]:
    """For each op: a function of leaf tensors and the leaf arrays to differentiate."""
    n = rng.standard_normal
    labels = rng.integers(0, 3, size=4)
    c = float(rng.uniform(-2, 2))
    rm, rv = n(4), rng.uniform(0.5, 2.0, size=4)
    return {
        "matmul": (lambda a, b: T.matmul(a, b), [n((3, 4)), n((4, 2))]),
        "transpose": (lambda a: T.transpose(a), [n((3, 4))]),
        "add": (lambda a, b: T.add(a, b), [n((3, 4)), n((3, 4))]),
        "sub": (lambda a, b: T.sub(a, b), [n((3, 4)), n((3, 4))]),
        "mul": (lambda a, b: T.mul(a, b), [n((3, 4)), n((3, 4))]),
        "scale": (lambda a: T.scale(a, c), [n((3, 4))]),
        "relu": (lambda a: T.relu(a), [_away_from_zero(n((3, 4)))]),
        # beyond |x| ~ 5 the derivative drops below what central differences resolve
        "gelu": (lambda a: T.gelu(a), [rng.uniform(-4, 4, size=(3, 4))]),
        "add_bias": (lambda x, b: T.add_bias(x, b), [n((3, 4)), n(4)]),
        "l2_normalize": (lambda x: T.l2_normalize(x), [n((3, 4))]),
        "batch_norm_train": (lambda x, g, b: T.batch_norm_train(x, g, b), [n((5, 4)), n(4), n(4)]),
        "batch_norm_eval": (lambda x, g, b: T.batch_norm_eval(x, g, b, rm, rv), [n((5, 4)), n(4), n(4)]),
        "sum": (lambda a: T.sum_all(a), [n((3, 4))]),
        "mean": (lambda a: T.mean_all(a), [n((3, 4))]),
        "cross_entropy": (lambda z: T.cross_entropy(z, labels), [n((4, 3))]),
    }


def _objective(fn, arrays: list[np.ndarray], w: np.ndarray | None, leaves: bool) -> Tensor:
    xs = [Tensor(a, requires_grad=leaves) for a in arrays]
    y = fn(*xs)
    loss = y if y.data.size == 1 else _weighted_sum(y, w)
    return loss, xs


def check_op(name: str, seed: int, h: float = 1e-5) -> float:
    """Worst relative error for one random case of op ``name``."""
    rng = np.random.default_rng([seed, 0x6C])
    fn, arrays = _op_cases(rng)[name]
    y = fn(*[Tensor(a) for a in arrays])
    w = None if y.data.size == 1 else rng.standard_normal(y.shape)
    loss, leaves = _objective(fn, arrays, w, True)
    analytic = T.backward(loss, leaves)
    return T.finite_diff_check(lambda arrs: float(_objective(fn, arrs, w, False)[0].data), arrays, analytic, h)


def _composite_case(seed: int, align_weight: float, frozen: int) -> float:
    """Relative error of the local objective l_con + alpha * l_align on a 2-block model, B=4."""
    spec = ModelSpec(input_dim=6, num_layers=2, block_hidden_dim=5, block_out_dim=4, proj_hidden=8, proj_out=4, pred_hidden=8)
    rng = np.random.default_rng([seed, 0xC0])
    state = build_model(spec, seed, dtype=np.float64)
    for grp in state.groups.values():
        for name, a in grp.items():
            if name.endswith("running_var"):
                a[...] = rng.uniform(0.5, 2.0, size=a.shape)
            elif name.endswith("running_mean"):
                a[...] = 0.1 * rng.standard_normal(a.shape)
    state.frozen_prefix = frozen
    branch = MomentumBranch.from_model(state)
    for grp in branch.groups.values():
        for a in grp.values():
            a += 0.05 * rng.standard_normal(a.shape)
    global_encoder = state.copy()
    for g in global_encoder.encoder_groups:
        for a in global_encoder.groups[g].values():
            a += 0.05 * rng.standard_normal(a.shape)
    cfg = SslConfig(align_weight=align_weight, batch_size=4)
    x1, x2 = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    glob = global_encoder if align_weight > 0 else None

    loss, p, _, _ = ssl_loss(state, branch, x1, x2, cfg, glob)
    analytic = T.backward(loss, p.tensors())
    arrays = [state.groups[g][n] for g, n in p.keys()]
    return T.finite_diff_check(
        lambda _: float(ssl_loss(state, branch, x1, x2, cfg, glob)[0].data),
        arrays,
        analytic,
        h=COMPOSITE_STEP,
        floor=COMPOSITE_FLOOR,
    )


COMPOSITE_CASES = ((0.01, 0), (1.0, 0), (0.5, 1), (0.0, 0))


def run_suite(seed: int = 0, ops=T.REGISTERED_OPS) -> GradcheckReport:
    report = GradcheckReport()
    for k, name in enumerate(ops):
        res = OpResult(name)
        for case in range(CASES_PER_OP):
            err = check_op(name, seed * 1_000_003 + k * 101 + case)
            res.cases += 1
            res.max_rel_error = max(res.max_rel_error, err)
        report.results.append(res)
    res = OpResult(COMPOSITE)
    for i, (alpha, frozen) in enumerate(COMPOSITE_CASES):
        res.max_rel_error = max(res.max_rel_error, _composite_case(seed * 31 + i, alpha, frozen))
        res.cases += 1
    report.results.append(res)
    return report
