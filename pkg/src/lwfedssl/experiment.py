"""Assemble a run from a RunConfig and write its artifacts to disk."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import (
    Dataset,
    Partition,
    gen_synthetic,
    load_cifar10_bin,
    partition_dirichlet,
    partition_uniform,
    sample_auxiliary,
    stratified_split,
)
from .evaluation import EvalReport, extract_features, linear_probe
from .fed import FederationAborted, RoundRecord, participants_for_round, run_federation
from .model import ModelState, build_model, serialize_model
from .resource import ResourceLedger, plan_ledger
from .schedule import StageSchedule
from .ssl import derive_seed

log = logging.getLogger(__name__)

RUN_LOG = "run.jsonl"
LEDGER = "ledger.csv"
SUMMARY = "summary.json"
FINAL_CHECKPOINT = "final.lwfs"
CHECKPOINT_DIR = "checkpoints"
EVAL_REPORT = "eval.json"

# Seed offsets keep the eval and auxiliary draws independent of the client pool.
_EVAL_TAG = 0xE7A1
_AUX_TAG = 0xA0C5


@dataclass
class RunData:
    pool: Dataset
    eval: Dataset
    aux: Dataset | None


def load_run_data(cfg: RunConfig) -> RunData:
    """Client pool, labeled evaluation set and the server's auxiliary set."""
    d, seed = cfg.data, cfg.seed
    if d.source == "synthetic":
        pool = gen_synthetic(d.n, d.classes, d.dim, d.cluster_sep, seed)
        ev = gen_synthetic(d.eval_n, d.classes, d.dim, d.cluster_sep, derive_seed(seed, _EVAL_TAG), center_seed=seed)
    else:
        full = load_cifar10_bin(d.path)
        if d.eval_path:
            pool = full.subset(np.arange(min(d.n, len(full))))
            ev = load_cifar10_bin(d.eval_path)
            ev = ev.subset(np.arange(min(d.eval_n, len(ev))))
        else:
            train, test = stratified_split(full.labels, d.eval_n / len(full), seed)
            pool = full.subset(train[: d.n])
            ev = full.subset(test)
    aux = None
    if d.aux_source == "synthetic":
        # a distinct domain: same task shape, shifted cluster centers
        n_aux_pool = d.aux_n or d.n
        aux_seed = derive_seed(seed, _AUX_TAG)
        aux_pool = gen_synthetic(n_aux_pool, d.classes, cfg.model.input_dim, d.cluster_sep, aux_seed)
        aux = sample_auxiliary(aux_pool, d.aux_ratio, seed)
    elif d.aux_source == "client_pool":
        aux = sample_auxiliary(pool, d.aux_ratio, seed)
    return RunData(pool, ev, aux)


def make_partition(cfg: RunConfig, pool: Dataset) -> Partition:
    d = cfg.data
    if d.partition_file:
        part = Partition.from_json(Path(d.partition_file).read_text())
        if len(part.clients) != cfg.fed.clients:
            raise ValueError(f"partition file has {len(part.clients)} clients, config has {cfg.fed.clients}")
        part.validate(len(pool))
        return part
    if d.partition == "dirichlet":
        return partition_dirichlet(pool, cfg.fed.clients, d.beta, cfg.seed, d.min_per_client)
    return partition_uniform(pool, cfg.fed.clients, cfg.seed)


def _schedule(cfg: RunConfig) -> StageSchedule:
    return StageSchedule.build(cfg.strategy, cfg.model.num_layers, cfg.fed.rounds, cfg.fed.allocation)


def _align_active(cfg: RunConfig) -> bool:
    return cfg.strategy == "lw_fedssl" and cfg.ssl.align_weight > 0


def _calibration_epochs(cfg: RunConfig) -> int:
    return cfg.fed.calibration_epochs if cfg.strategy == "lw_fedssl" else 0


def planned_ledger(cfg: RunConfig, client_sizes: list[int], n_aux: int) -> ResourceLedger:
    schedule = _schedule(cfg)
    participants = [
        participants_for_round(cfg.fed.clients, cfg.fed.client_fraction, cfg.seed, r) for r in range(schedule.rounds)
    ]
    return plan_ledger(
        cfg.model,
        schedule,
        client_sizes,
        cfg.ssl.batch_size,
        cfg.ssl.local_epochs,
        _align_active(cfg),
        n_aux,
        _calibration_epochs(cfg),
        participants,
    )


def cost_summary(ledger: ResourceLedger) -> dict:
    """Totals per single client (client 0), all clients and the server."""
    clients = [e for e in ledger.entries if e.actor.startswith("client:")]
    return {
        "client_0": ledger.totals("client:0"),
        "all_clients": ResourceLedger(clients).totals(),
        "server": ledger.totals("SERVER"),
        "peak_memory_model": max((e.mem_model for e in ledger.entries), default=0),
    }


def probe_encoder(encoder: ModelState, ev: Dataset, cfg: RunConfig, checkpoint: str = "") -> EvalReport:
    split = stratified_split(ev.labels, cfg.probe.test_fraction, cfg.probe.seed)
    report = linear_probe(extract_features(encoder, ev.features), ev.labels, cfg.probe, split)
    report.checkpoint = checkpoint
    return report


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _record_line(record: RoundRecord) -> str:
    return json.dumps(record.to_dict(), sort_keys=True)


@dataclass
class RunOutcome:
    status: str
    summary: dict
    model: ModelState | None = None


def execute_run(cfg: RunConfig, out_dir, workers: int = 1, dry_run: bool = False) -> RunOutcome:
    """Run (or, with ``dry_run``, only plan) an experiment and write its artifacts."""
    out = Path(out_dir)
    data = load_run_data(cfg)
    if cfg.model.input_dim != data.pool.dim:
        raise ValueError(f"data dim {data.pool.dim} != model input_dim {cfg.model.input_dim}")
    part = make_partition(cfg, data.pool)
    n_aux = 0 if data.aux is None else len(data.aux)
    schedule = _schedule(cfg)
    summary = {
        "config": cfg.to_dict(include_out_dir=False),
        "seed": cfg.seed,
        "client_sizes": part.sizes(),
        "n_aux": n_aux,
        "rounds_per_stage": list(schedule.rounds_per_stage),
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "partition.json").write_text(part.to_json() + "\n")

    if dry_run:
        ledger = planned_ledger(cfg, part.sizes(), n_aux)
        (out / LEDGER).write_text(ledger.to_csv())
        summary.update(status="planned", costs=cost_summary(ledger))
        _write_json(out / SUMMARY, summary)
        return RunOutcome("planned", summary)

    ckpt_dir = out / CHECKPOINT_DIR
    ckpt_dir.mkdir(exist_ok=True)
    stage_ends = {schedule.stage_start(s) + n - 1 for s, n in enumerate(schedule.rounds_per_stage, start=1)}
    ledger = ResourceLedger()
    log_file = (out / RUN_LOG).open("w")

    def on_round(record: RoundRecord, model: ModelState) -> None:
        log_file.write(_record_line(record) + "\n")
        log_file.flush()
        ledger.extend(record.resources)
        if record.round in stage_ends:
            (ckpt_dir / f"round_{record.round:04d}.lwfs").write_bytes(serialize_model(model))

    client_data = [data.pool.features[idx] for idx in part.clients]
    aux = None if data.aux is None else data.aux.features
    try:
        model, records = run_federation(
            cfg.model, cfg.fed, cfg.ssl, cfg.optim, cfg.augment, client_data, aux, cfg.seed, cfg.dtype, workers, on_round
        )
    except FederationAborted as exc:
        log_file.close()
        (out / LEDGER).write_text(ledger.to_csv())
        summary.update(status="aborted", failed_round=exc.round, error=str(exc), costs=cost_summary(ledger))
        _write_json(out / SUMMARY, summary)
        return RunOutcome("aborted", summary)
    log_file.close()

    blob = serialize_model(model)
    (out / FINAL_CHECKPOINT).write_bytes(blob)
    (out / LEDGER).write_text(ledger.to_csv())
    report = probe_encoder(model, data.eval, cfg, FINAL_CHECKPOINT)
    (out / EVAL_REPORT).write_text(report.to_json() + "\n")
    baseline = probe_encoder(build_model(cfg.model, cfg.seed, dtype=cfg.dtype), data.eval, cfg)
    summary.update(
        status="ok",
        final_checkpoint=FINAL_CHECKPOINT,
        final_checkpoint_sha256=hashlib.sha256(blob).hexdigest(),
        probe_accuracy=report.accuracy,
        probe_per_class_accuracy={str(k): v for k, v in report.per_class_accuracy.items()},
        probe_augmentation=report.augmentation,
        untrained_probe_accuracy=baseline.accuracy,
        final_local_loss=records[-1].mean_local_loss,
        costs=cost_summary(ledger),
    )
    _write_json(out / SUMMARY, summary)
    return RunOutcome("ok", summary, model)


__all__ = [
    "RunData",
    "RunOutcome",
    "load_run_data",
    "make_partition",
    "planned_ledger",
    "cost_summary",
    "probe_encoder",
    "execute_run",
]
