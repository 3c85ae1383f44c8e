"""Linear probe and fine-tuning on top of a trained encoder."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import stratified_split
from .model import (
    LrSchedule,
    ModelState,
    OptimizerState,
    Params,
    adamw_step,
    apply_running_stats,
    forward_encoder,
    lr_at,
)
from .schedule import ConfigError
from .tensor import ContractError, Tensor


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 20
    batch_size: int = 256
    base_lr: float = 3e-2
    weight_decay: float = 1e-5
    warmup_epochs: int = 0
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: dict[int, float]
    n_train: int
    n_test: int
    checkpoint: str = ""
    mode: str = "linear_probe"
    augmentation: str = "none"
    predictions: list[int] = field(default_factory=list)
    targets: list[int] = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class_accuracy"] = {str(k): v for k, v in self.per_class_accuracy.items()}
        return json.dumps(d, indent=1, sort_keys=True)


def extract_features(encoder: ModelState, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Full-depth inference-mode features; ``encoder`` is left untouched."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != encoder.spec.input_dim:
        raise ContractError(f"data shape {x.shape} does not fit encoder input_dim {encoder.spec.input_dim}")
    if encoder.active_depth == 0:
        raise ContractError("encoder has no layers")
    x = x.astype(encoder.dtype)
    out = [forward_encoder(encoder, Tensor(x[i : i + batch_size]), train=False).data for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def _report(pred: np.ndarray, y: np.ndarray, n_train: int, mode: str) -> EvalReport:
    per_class = {int(c): float(np.mean(pred[y == c] == c)) for c in np.unique(y)}
    correct = int(np.sum(pred == y))
    return EvalReport(
        accuracy=correct / len(y),
        per_class_accuracy=per_class,
        n_train=n_train,
        n_test=len(y),
        mode=mode,
        predictions=[int(p) for p in pred],
        targets=[int(t) for t in y],
    )


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


class LinearHead:
    """Softmax-regression weights trained with AdamW and a cosine schedule."""

    def __init__(self, dim: int, n_classes: int, dtype, seed: int):
        rng = np.random.default_rng([seed, 7])
        a = math.sqrt(6.0 / (dim + n_classes))
        self.weight = rng.uniform(-a, a, size=(dim, n_classes)).astype(dtype)
        self.bias = np.zeros(n_classes, dtype=dtype)

    def logits(self, feats: Tensor, w: Tensor, b: Tensor) -> Tensor:
        return T.add_bias(T.matmul(feats, w), b)

    def predict(self, feats: np.ndarray) -> np.ndarray:
        return np.argmax(feats @ self.weight + self.bias, axis=1)


def _schedule(cfg: ProbeConfig, base_lr: float) -> LrSchedule:
    return LrSchedule(
        kind="cosine",
        base_lr=base_lr,
        batch_size=cfg.batch_size,
        total_steps=max(cfg.epochs, 1),
        warmup_steps=cfg.warmup_epochs,
    )


def train_linear_head(feats: np.ndarray, y: np.ndarray, n_classes: int, cfg: ProbeConfig) -> LinearHead:
    head = LinearHead(feats.shape[1], n_classes, feats.dtype, cfg.seed)
    groups = {"head": {"weight": head.weight, "bias": head.bias}}
    keys = [("head", "weight"), ("head", "bias")]
    opt = OptimizerState(base_lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    sched = _schedule(cfg, cfg.base_lr)
    rng = np.random.default_rng([cfg.seed, 8])
    for epoch in range(cfg.epochs):
        lr = lr_at(sched, epoch)
        for idx in _batches(len(feats), cfg.batch_size, rng):
            w = Tensor(groups["head"]["weight"], requires_grad=True)
            b = Tensor(groups["head"]["bias"], requires_grad=True)
            loss = T.cross_entropy(head.logits(Tensor(feats[idx]), w, b), y[idx])
            adamw_step(groups, keys, T.backward(loss, [w, b]), opt, lr)
    head.weight, head.bias = groups["head"]["weight"], groups["head"]["bias"]
    return head


def _check_labels(y: np.ndarray) -> int:
    if len(np.unique(y)) < 2:
        raise ConfigError("training split needs at least two classes")
    return int(y.max()) + 1


def linear_probe(
    features: np.ndarray,
    labels: np.ndarray,
    cfg: ProbeConfig = ProbeConfig(),
    split: tuple[np.ndarray, np.ndarray] | None = None,
) -> EvalReport:
    """Train a linear classifier on frozen ``features``; report held-out accuracy."""
    features = np.asarray(features)
    labels = np.asarray(labels, dtype=np.int64)
    train, test = split if split is not None else stratified_split(labels, cfg.test_fraction, cfg.seed)
    n_classes = _check_labels(labels[train])
    n_classes = max(n_classes, int(labels.max()) + 1)
    head = train_linear_head(features[train], labels[train], n_classes, cfg)
    return _report(head.predict(features[test]), labels[test], len(train), "linear_probe")


def fine_tune(
    encoder: ModelState,
    x: np.ndarray,
    labels: np.ndarray,
    cfg: ProbeConfig = ProbeConfig(epochs=40, base_lr=1e-3, warmup_epochs=10),
    split: tuple[np.ndarray, np.ndarray] | None = None,
) -> EvalReport:
    """Train a copy of the encoder end to end with a linear head."""
    labels = np.asarray(labels, dtype=np.int64)
    train, test = split if split is not None else stratified_split(labels, cfg.test_fraction, cfg.seed)
    n_classes = max(_check_labels(labels[train]), int(labels.max()) + 1)
    model = encoder.copy()
    model.frozen_prefix = 0
    x = np.asarray(x, dtype=model.dtype)
    head = LinearHead(model.spec.block_out_dim, n_classes, model.dtype, cfg.seed)
    model.groups["head"] = {"weight": head.weight, "bias": head.bias}
    opt = OptimizerState(base_lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    sched = _schedule(cfg, cfg.base_lr)
    rng = np.random.default_rng([cfg.seed, 9])
    groups = model.encoder_groups
    xt, yt = x[train], labels[train]
    for epoch in range(cfg.epochs):
        lr = lr_at(sched, epoch)
        for idx in _batches(len(xt), cfg.batch_size, rng):
            if len(idx) < 2:
                continue
            p = Params(model, groups + ["head"])
            stats: dict = {}
            feats = forward_encoder(model, Tensor(xt[idx]), train=True, params=p, stats=stats)
            w, b = p.get("head", "weight"), p.get("head", "bias")
            loss = T.cross_entropy(T.add_bias(T.matmul(feats, w), b), yt[idx])
            grads = T.backward(loss, p.tensors())
            adamw_step(model.groups, p.keys(), grads, opt, lr)
            apply_running_stats(model, stats)
    head.weight, head.bias = model.groups["head"]["weight"], model.groups["head"]["bias"]
    feats = extract_features(model, x[test])
    return _report(head.predict(feats), labels[test], len(train), "fine_tune")

