"""Federation engine: stage growth, calibration, local training and FedAvg."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import (
    LrSchedule,
    ModelSpec,
    ModelState,
    OptimizerState,
    build_model,
    init_layer,
    layer_name,
    lr_at,
)
from .resource import ResourceEntry, client_entry, server_entry
from .schedule import ALLOCATIONS, LAYERWISE, STRATEGIES, ConfigError, StageSchedule, make_schedule
from .ssl import AugmentPolicy, MomentumBranch, SslConfig, derive_seed, local_ssl_epoch, run_ssl
from .tensor import NumericError

log = logging.getLogger(__name__)

__all__ = [
    "FedConfig",
    "OptimConfig",
    "RoundRecord",
    "AggregationError",
    "FederationAborted",
    "make_schedule",
    "aggregate",
    "advance_stage",
    "server_calibrate",
    "run_federation",
]


class AggregationError(ValueError):
    pass


class FederationAborted(RuntimeError):
    def __init__(self, round_index: int, message: str, records: list):
        super().__init__(f"round {round_index}: {message}")
        self.round = round_index
        self.records = records


@dataclass(frozen=True)
class FedConfig:
    strategy: str = "lw_fedssl"
    clients: int = 4
    rounds: int = 15
    allocation: str = "uniform"
    weight_transfer: bool = True
    calibration_epochs: int = 3
    client_fraction: float = 1.0
    calibrate_after_aggregation: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.allocation not in ALLOCATIONS:
            raise ConfigError(f"unknown allocation {self.allocation!r}")
        if self.clients < 1 or self.rounds < 1:
            raise ConfigError("clients and rounds must be >= 1")
        if self.calibration_epochs < 0:
            raise ConfigError("calibration_epochs must be >= 0")
        if not 0 < self.client_fraction <= 1:
            raise ConfigError("client_fraction must be in (0, 1]")


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 1.5e-4
    weight_decay: float = 1e-5
    schedule: str = "cosine"
    warmup_epochs: int = 0


@dataclass
class RoundRecord:
    round: int
    stage: int
    clients: list[int]
    mean_local_loss: float
    calibration_loss: float | None
    resources: list[ResourceEntry] = field(default_factory=list)
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resources"] = [asdict(e) for e in self.resources]
        return d


# ---------------------------------------------------------------------------


def aggregate(
    locals_: Sequence[dict[str, dict[str, np.ndarray]]], weights: Sequence[float]
) -> dict[str, dict[str, np.ndarray]]:
    """Weighted average of parameter groups, summed in the given order."""
    if not locals_:
        raise AggregationError("nothing to aggregate")
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(locals_):
        raise AggregationError("one weight per local model required")
    if abs(w.sum() - 1.0) > 1e-9:
        raise AggregationError(f"weights sum to {w.sum()!r}, not 1")
    ref = locals_[0]
    out: dict[str, dict[str, np.ndarray]] = {}
    for g, grp in ref.items():
        out[g] = {}
        for n, a in grp.items():
            acc = np.zeros(a.shape, dtype=np.float64)
            for wi, loc in zip(w, locals_):
                b = loc.get(g, {}).get(n)
                if b is None or b.shape != a.shape:
                    raise AggregationError(f"{g}/{n}: missing or mismatched shape")
                acc += wi * b
            out[g][n] = acc.astype(a.dtype)
    return out


def advance_stage(state: ModelState, stage: int, strategy: str, seed: int, weight_transfer: bool = True) -> None:
    """Append encoder layer ``stage`` (1-based) to ``state`` in place."""
    if stage != state.active_depth + 1:
        raise ValueError(f"cannot grow from depth {state.active_depth} to stage {stage}")
    spec = state.spec
    fresh = init_layer(spec, stage - 1, seed, state.dtype)
    layer = fresh
    if weight_transfer and stage > 1:
        prev = state.groups[layer_name(stage - 2)]
        if all(prev[n].shape == a.shape for n, a in fresh.items()):
            layer = {n: a.copy() for n, a in prev.items()}
        else:
            log.warning("weight transfer L%d -> L%d skipped: shapes differ; using fresh init", stage - 1, stage)
    groups = {layer_name(i): state.groups[layer_name(i)] for i in range(state.active_depth)}
    groups[layer_name(stage - 1)] = layer
    groups["proj"] = state.groups["proj"]
    groups["pred"] = state.groups["pred"]
    state.groups = groups
    state.active_depth = stage
    state.frozen_prefix = stage - 1 if strategy in LAYERWISE else 0


def server_calibrate(
    state: ModelState,
    aux: np.ndarray | None,
    epochs: int,
    cfg: SslConfig,
    opt: OptimizerState,
    lr_for_epoch: Callable[[int], float],
    policy: AugmentPolicy,
    seed: int,
):
    """Unfreeze, run plain SSL on the auxiliary data for ``epochs``, refreeze.

    Returns the step metrics, or ``None`` when nothing ran.
    """
    if epochs == 0:
        return None
    if aux is None or len(aux) == 0:
        raise ConfigError("server calibration needs a non-empty auxiliary dataset")
    frozen = state.frozen_prefix
    state.frozen_prefix = 0
    try:
        return run_ssl(state, aux, epochs, cfg, opt, lr_for_epoch, policy, seed)
    finally:
        state.frozen_prefix = frozen


# ---------------------------------------------------------------------------


@dataclass
class _ClientResult:
    client: int
    upload: dict[str, dict[str, np.ndarray]]
    mean_loss: float
    batches: int
    global_evals: int


def make_lr_schedule(optim: OptimConfig, ssl: SslConfig, schedule: StageSchedule) -> LrSchedule:
    E = ssl.local_epochs
    return LrSchedule(
        kind=optim.schedule,
        base_lr=optim.base_lr,
        batch_size=ssl.batch_size,
        total_steps=schedule.rounds * E,
        per_stage_steps=tuple(n * E for n in schedule.rounds_per_stage),
        warmup_steps=optim.warmup_epochs,
    )


def _client_round(
    client: int,
    r: int,
    broadcast: ModelState,
    data: np.ndarray,
    schedule: StageSchedule,
    ssl: SslConfig,
    lr_sched: LrSchedule,
    optim: OptimConfig,
    policy: AugmentPolicy,
    seed: int,
    align: bool,
) -> _ClientResult:
    local = broadcast.copy()
    branch = MomentumBranch.from_model(local)
    opt = OptimizerState(base_lr=optim.base_lr, weight_decay=optim.weight_decay)
    global_encoder = broadcast if align else None
    E = ssl.local_epochs
    metrics = None
    for e in range(E):
        metrics = local_ssl_epoch(
            local,
            branch,
            opt,
            data,
            ssl,
            lr_at(lr_sched, r * E + e),
            policy,
            derive_seed(seed, r, client, e),
            global_encoder=global_encoder,
            metrics=metrics,
            label=f"client {client}",
        )
    upload = {g: local.groups[g] for g in schedule.upload(r)}
    return _ClientResult(client, upload, metrics.mean_loss, metrics.batches, metrics.global_evals)


def participants_for_round(n_clients: int, fraction: float, seed: int, r: int) -> list[int]:
    if fraction >= 1:
        return list(range(n_clients))
    m = max(1, int(round(fraction * n_clients)))
    rng = np.random.default_rng(derive_seed(seed, r, 0xC11E))
    return sorted(int(i) for i in rng.permutation(n_clients)[:m])


def run_federation(
    spec: ModelSpec,
    fed: FedConfig,
    ssl: SslConfig,
    optim: OptimConfig,
    policy: AugmentPolicy,
    client_data: Sequence[np.ndarray],
    aux: np.ndarray | None = None,
    seed: int = 0,
    dtype=np.float32,
    workers: int = 1,
    on_round: Callable[[RoundRecord, ModelState], None] | None = None,
) -> tuple[ModelState, list[RoundRecord]]:
    """Run all rounds; returns the final global model and one record per round.

    The result depends only on the arguments other than ``workers``: client
    work is independent and aggregation sums in client-id order.
    """
    if len(client_data) != fed.clients:
        raise ConfigError(f"{len(client_data)} client datasets for {fed.clients} clients")
    schedule = StageSchedule.build(fed.strategy, spec.num_layers, fed.rounds, fed.allocation)
    lr_sched = make_lr_schedule(optim, ssl, schedule)
    dtype = np.dtype(dtype)
    client_data = [np.asarray(d, dtype=dtype) for d in client_data]
    aux = None if aux is None else np.asarray(aux, dtype=dtype)
    align = fed.strategy == "lw_fedssl" and ssl.align_weight > 0
    calib_epochs = fed.calibration_epochs if fed.strategy == "lw_fedssl" else 0
    if calib_epochs > 0 and (aux is None or len(aux) == 0):
        raise ConfigError("lw_fedssl with calibration_epochs > 0 needs auxiliary data")

    model = build_model(spec, seed, staged=schedule.staged, dtype=dtype)
    server_opt = OptimizerState(base_lr=optim.base_lr, weight_decay=optim.weight_decay)
    E = ssl.local_epochs
    records: list[RoundRecord] = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def calibrate(r: int):
        lr_for_epoch = lambda e: lr_at(lr_sched, r * E + min(e, E - 1))  # noqa: E731
        return server_calibrate(model, aux, calib_epochs, ssl, server_opt, lr_for_epoch, policy, derive_seed(seed, r, 0x5E))

    try:
        for r in range(schedule.rounds):
            t0 = time.perf_counter()
            s = schedule.stage(r)
            if schedule.staged and s > model.active_depth:
                advance_stage(model, s, fed.strategy, seed, fed.weight_transfer)
            calib = None
            if calib_epochs and not fed.calibrate_after_aggregation:
                try:
                    calib = calibrate(r)
                except NumericError as exc:
                    raise FederationAborted(r, f"server calibration: {exc}", records) from exc

            ids = participants_for_round(fed.clients, fed.client_fraction, seed, r)
            broadcast = model.copy()
            job = lambda c: _client_round(  # noqa: E731
                c, r, broadcast, client_data[c], schedule, ssl, lr_sched, optim, policy, seed, align
            )
            try:
                results = list(pool.map(job, ids)) if pool else [job(c) for c in ids]
            except NumericError as exc:
                raise FederationAborted(r, str(exc), records) from exc

            sizes = np.array([len(client_data[c]) for c in ids], dtype=np.float64)
            merged = aggregate([res.upload for res in results], sizes / sizes.sum())
            for g, grp in merged.items():
                model.groups[g] = grp
            if calib_epochs and fed.calibrate_after_aggregation:
                try:
                    calib = calibrate(r)
                except NumericError as exc:
                    raise FederationAborted(r, f"server calibration: {exc}", records) from exc

            entries = [
                client_entry(spec, schedule, r, c, len(client_data[c]), ssl.batch_size, E, align) for c in ids
            ]
            if calib_epochs:
                entries.append(server_entry(spec, schedule, r, len(aux), ssl.batch_size, calib_epochs))
            losses = [res.mean_loss for res in results if res.batches]
            record = RoundRecord(
                round=r,
                stage=s,
                clients=ids,
                mean_local_loss=float(np.mean(losses)) if losses else float("nan"),
                calibration_loss=None if calib is None else calib.mean_loss,
                resources=entries,
                wall_clock=time.perf_counter() - t0,
            )
            records.append(record)
            log.info("round %d stage %d loss %.4f", r, s, record.mean_local_loss)
            if on_round is not None:
                on_round(record, model)
    finally:
        if pool is not None:
            pool.shutdown()
    return model, records
