"""MoCo-v3-style local training: views, InfoNCE, momentum targets, alignment."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .model import (
    ModelState,
    OptimizerState,
    Params,
    adamw_step,
    apply_running_stats,
    forward_encoder,
    head_forward,
    is_buffer,
)
from .tensor import ContractError, NumericError, Tensor


@dataclass(frozen=True)
class SslConfig:
    temperature: float = 0.2
    momentum: float = 0.99
    align_weight: float = 0.01
    local_epochs: int = 3
    batch_size: int = 32
    normalize_alignment: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0 <= self.momentum <= 1:
            raise ValueError("momentum must be in [0, 1]")
        if self.align_weight < 0:
            raise ValueError("align_weight must be >= 0")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm)")


@dataclass(frozen=True)
class AugmentPolicy:
    crop_pad: int = 0
    flip_prob: float = 0.0
    jitter_sigma: float = 1.0
    cutout_frac: float = 0.0

    @property
    def needs_image(self) -> bool:
        return self.crop_pad > 0 or self.flip_prob > 0 or self.cutout_frac > 0

    @property
    def is_identity(self) -> bool:
        return not self.needs_image and self.jitter_sigma == 0


def image_side(dim: int) -> int | None:
    side = math.isqrt(dim)
    return side if side * side == dim else None


def _augment_row(row: np.ndarray, policy: AugmentPolicy, side: int | None, rng: np.random.Generator) -> np.ndarray:
    x = row
    if side is not None and policy.needs_image:
        img = x.reshape(side, side)
        if policy.crop_pad > 0:
            p = policy.crop_pad
            padded = np.pad(img, p)
            i, j = rng.integers(0, 2 * p + 1, size=2)
            img = padded[i : i + side, j : j + side]
        if policy.flip_prob > 0 and rng.random() < policy.flip_prob:
            img = img[:, ::-1]
        if policy.cutout_frac > 0:
            size = max(1, int(round(policy.cutout_frac * side)))
            i, j = rng.integers(0, side - size + 1, size=2)
            img = img.copy()
            img[i : i + size, j : j + size] = 0
        x = img.reshape(-1)
    if policy.jitter_sigma > 0:
        x = x + rng.normal(0.0, policy.jitter_sigma, size=x.shape)
    return np.array(x, dtype=row.dtype)


def augment(
    x: np.ndarray,
    policy: AugmentPolicy,
    seed: int,
    indices: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Two independently augmented views of every row of ``x``.

    Each view of row ``r`` is a pure function of (seed, indices[r], view), so
    results do not depend on batch composition.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ContractError(f"augment expects a non-empty [B, D] batch, got {x.shape}")
    if policy.is_identity:
        return x.copy(), x.copy()
    side = image_side(x.shape[1])
    if policy.needs_image and side is None:
        raise ValueError(f"image augmentations need a square feature dim, got {x.shape[1]}")
    indices = np.arange(x.shape[0]) if indices is None else np.asarray(indices)
    views = []
    for v in (1, 2):
        rows = [
            _augment_row(x[r], policy, side, np.random.default_rng([seed, int(indices[r]), v]))
            for r in range(x.shape[0])
        ]
        views.append(np.stack(rows))
    return views[0], views[1]


# ---------------------------------------------------------------------------
# losses


def infonce(q: Tensor, k, temperature: float) -> Tensor:
    """Mean over rows of -log softmax(q_i . k_j / tau)[j = i].

    Row i of ``k`` is the positive for row i of ``q``; the other rows are the
    negatives. ``k`` is treated as a constant.
    """
    q = q if isinstance(q, Tensor) else Tensor(q)
    kd = k.data if isinstance(k, Tensor) else np.asarray(k, dtype=q.dtype)
    if q.shape[0] == 0:
        raise ContractError("infonce on an empty batch")
    if q.shape != kd.shape:
        raise T.DimensionError(f"infonce shape mismatch: {q.shape} vs {kd.shape}")
    logits = T.scale(T.matmul(q, Tensor(kd.T.copy())), 1.0 / temperature)
    return T.cross_entropy(logits, np.arange(q.shape[0]))


def alignment_loss(z1_local: Tensor, z2_local: Tensor, z1_global, z2_global, temperature: float) -> Tensor:
    """Symmetric contrastive alignment of local to (constant) global representations."""
    return T.add(infonce(z1_local, z2_global, temperature), infonce(z2_local, z1_global, temperature))


# ---------------------------------------------------------------------------
# momentum branch


@dataclass
class MomentumBranch:
    """Target copies of the encoder layers and the projection head."""

    groups: dict[str, dict[str, np.ndarray]]

    @classmethod
    def from_model(cls, state: ModelState) -> "MomentumBranch":
        names = state.encoder_groups + ["proj"]
        return cls({g: {n: a.copy() for n, a in state.groups[g].items()} for g in names})

    def as_state(self, online: ModelState) -> ModelState:
        view = ModelState(online.spec, dict(self.groups), online.active_depth, online.frozen_prefix, online.dtype)
        return view


def momentum_update(
    online: ModelState,
    target: MomentumBranch,
    momentum: float,
    groups: Iterable[str] | None = None,
) -> None:
    """target <- mu * target + (1 - mu) * online for the trainable arrays of ``groups``."""
    names = list(target.groups if groups is None else groups)
    if momentum == 1:
        return
    mu = online.dtype.type(momentum)
    for g in names:
        if g == "pred":
            continue
        tg, og = target.groups[g], online.groups[g]
        for n, a in og.items():
            if is_buffer(n):
                continue
            if tg[n].shape != a.shape:
                raise ContractError(f"momentum shape mismatch for {g}/{n}: {tg[n].shape} vs {a.shape}")
            tg[n] = mu * tg[n] + (1 - mu) * a


# ---------------------------------------------------------------------------
# local training


def trainable_groups(state: ModelState) -> list[str]:
    return [f"enc.{i}" for i in range(state.frozen_prefix, state.active_depth)] + ["proj", "pred"]


@dataclass
class StepMetrics:
    losses: list[float] = field(default_factory=list)
    contrastive: list[float] = field(default_factory=list)
    alignment: list[float] = field(default_factory=list)
    batches: int = 0
    samples: int = 0
    global_evals: int = 0

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.losses)) if self.losses else float("nan")


def _online(state: ModelState, p: Params, x: np.ndarray, stats: dict | None) -> tuple[Tensor, Tensor]:
    z = forward_encoder(state, Tensor(x), train=True, params=p, stats=stats)
    q = head_forward(head_forward(z, p, "proj", True, stats), p, "pred", True, stats)
    return z, T.l2_normalize(q)


def _target(online: ModelState, branch: MomentumBranch, x: np.ndarray) -> np.ndarray:
    tstate = branch.as_state(online)
    tp = Params(tstate)
    k = head_forward(forward_encoder(tstate, Tensor(x), train=True, params=tp), tp, "proj", True)
    return T.l2_normalize(k).data


def ssl_loss(
    state: ModelState,
    branch: MomentumBranch,
    x1: np.ndarray,
    x2: np.ndarray,
    cfg: SslConfig,
    global_encoder: ModelState | None = None,
    stats: dict | None = None,
) -> tuple[Tensor, Params, float, float]:
    """Local objective l_con + alpha * l_align on one pair of views.

    Pure with respect to ``state``: batch statistics are only recorded into
    ``stats``. Returns (loss, params, l_con, l_align).
    """
    p = Params(state, trainable_groups(state))
    z1, q1 = _online(state, p, x1, stats)
    z2, q2 = _online(state, p, x2, stats)
    k1 = _target(state, branch, x1)
    k2 = _target(state, branch, x2)
    l_con = T.add(infonce(q1, k2, cfg.temperature), infonce(q2, k1, cfg.temperature))
    loss = l_con
    l_align = 0.0
    if global_encoder is not None:
        g1 = forward_encoder(global_encoder, Tensor(x1), train=False).data
        g2 = forward_encoder(global_encoder, Tensor(x2), train=False).data
        if cfg.normalize_alignment:
            z1, z2 = T.l2_normalize(z1), T.l2_normalize(z2)
            g1, g2 = T.l2_normalize(g1).data, T.l2_normalize(g2).data
        la = alignment_loss(z1, z2, g1, g2, cfg.temperature)
        l_align = float(la.data)
        loss = T.add(loss, T.scale(la, cfg.align_weight))
    return loss, p, float(l_con.data), l_align


def ssl_step(
    state: ModelState,
    branch: MomentumBranch,
    opt: OptimizerState,
    x1: np.ndarray,
    x2: np.ndarray,
    cfg: SslConfig,
    lr: float,
    global_encoder: ModelState | None = None,
) -> tuple[float, float, float]:
    """One update on a pair of views. Returns (total, contrastive, alignment) losses."""
    stats: dict = {}
    loss, p, l_con, l_align = ssl_loss(state, branch, x1, x2, cfg, global_encoder, stats)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    grads = T.backward(loss, p.tensors())
    adamw_step(state.groups, p.keys(), grads, opt, lr)
    apply_running_stats(state, stats)
    momentum_update(state, branch, cfg.momentum, [g for g in p.trainable if g != "pred"])
    return value, l_con, l_align


def iter_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled full batches; the short tail is dropped."""
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def local_ssl_epoch(
    state: ModelState,
    branch: MomentumBranch,
    opt: OptimizerState,
    data: np.ndarray,
    cfg: SslConfig,
    lr: float,
    policy: AugmentPolicy,
    seed: int,
    global_encoder: ModelState | None = None,
    metrics: StepMetrics | None = None,
    label: str = "client",
) -> StepMetrics:
    """One pass over ``data`` (updates ``state``, ``branch`` and ``opt`` in place).

    ``global_encoder`` enables the alignment term; pass ``None`` when the
    alignment weight is zero so the global model is never evaluated.
    """
    metrics = StepMetrics() if metrics is None else metrics
    if global_encoder is not None and global_encoder.active_depth != state.active_depth:
        raise ContractError("global encoder depth differs from the local model depth")
    rng = np.random.default_rng(seed)
    data = np.asarray(data, dtype=state.dtype)
    for b, idx in enumerate(iter_batches(len(data), cfg.batch_size, rng)):
        x1, x2 = augment(data[idx], policy, seed, idx)
        try:
            total, con, align = ssl_step(state, branch, opt, x1, x2, cfg, lr, global_encoder)
        except NumericError as exc:
            raise NumericError(f"{label}, batch {b}: {exc}") from exc
        metrics.losses.append(total)
        metrics.contrastive.append(con)
        metrics.alignment.append(align)
        metrics.batches += 1
        metrics.samples += len(idx)
        if global_encoder is not None:
            metrics.global_evals += 1
    return metrics


def run_ssl(
    state: ModelState,
    data: np.ndarray,
    epochs: int,
    cfg: SslConfig,
    opt: OptimizerState,
    lr_for_epoch: Callable[[int], float],
    policy: AugmentPolicy,
    seed: int,
) -> StepMetrics:
    """Plain MoCo-style SSL over all current layers: fresh target branch, ``epochs`` passes."""
    branch = MomentumBranch.from_model(state)
    metrics = StepMetrics()
    for e in range(epochs):
        local_ssl_epoch(
            state, branch, opt, data, cfg, lr_for_epoch(e), policy, derive_seed(seed, e), metrics=metrics, label="server"
        )
    return metrics
