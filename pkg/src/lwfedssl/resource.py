"""Analytic FLOPs, communication and memory accounting.

All costs here are closed-form functions of the model shape and the
schedule, never measurements, so two runs with different seeds produce the
same ledger.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields
from functools import lru_cache

import numpy as np

from .model import ModelSpec, ModelState, group_numel, group_shapes, head_shapes, serialize_model
from .schedule import LAYERWISE, StageSchedule
from .tensor import FLOPS_PER_ELEMENT as PER_ELT

BYTES_PER_PARAM = 4
BACKWARD_MULTIPLIER = 2
SERVER = "SERVER"


# ---------------------------------------------------------------------------
# forward FLOPs for a single sample


def block_flops(spec: ModelSpec, index: int) -> int:
    d_in, hid, out = spec.block_dims(index)
    f = PER_ELT["batch_norm"] * d_in
    f += 2 * d_in * hid + PER_ELT["add_bias"] * hid + PER_ELT["gelu"] * hid
    f += 2 * hid * out + PER_ELT["add_bias"] * out
    if d_in == out:
        f += PER_ELT["add"] * out
    return f


def head_flops(spec: ModelSpec, head: str) -> int:
    shapes = head_shapes(spec, head)
    weights = [s for n, s in shapes.items() if n.endswith(".weight")]
    f = 0
    for i, (a, b) in enumerate(weights):
        f += 2 * a * b + PER_ELT["batch_norm"] * b
        if i < len(weights) - 1:
            f += PER_ELT["relu"] * b
    return f


def encoder_flops(spec: ModelSpec, depth: int) -> int:
    return sum(block_flops(spec, i) for i in range(depth))


@dataclass(frozen=True)
class SampleCost:
    """Per-sample forward/backward FLOPs of one SSL step (both views)."""

    forward: int
    backward: int
    global_forward: int


def sample_cost(spec: ModelSpec, depth: int, frozen: int, align: bool) -> SampleCost:
    enc = [block_flops(spec, i) for i in range(depth)]
    trainable = sum(enc[frozen:]) + head_flops(spec, "proj") + head_flops(spec, "pred")
    online = sum(enc) + head_flops(spec, "proj") + head_flops(spec, "pred")
    target = sum(enc) + head_flops(spec, "proj")
    glob = sum(enc) if align else 0
    views = 2
    return SampleCost(
        forward=views * (online + target + glob),
        backward=views * BACKWARD_MULTIPLIER * trainable,
        global_forward=views * glob,
    )


def samples_processed(n: int, batch_size: int, epochs: int) -> int:
    return epochs * (n // batch_size) * batch_size


def flops_local_round(
    spec: ModelSpec,
    strategy: str,
    stage: int,
    batch_size: int,
    epochs: int,
    align_active: bool,
    n_samples: int | None = None,
) -> tuple[int, int]:
    """(forward, backward) FLOPs of one client's local training in a round.

    With ``n_samples=None`` the single-sample cost is returned.
    """
    depth = spec.num_layers if strategy == "end_to_end" else stage
    frozen = stage - 1 if strategy in LAYERWISE else 0
    cost = sample_cost(spec, depth, frozen, align_active and strategy == "lw_fedssl")
    scale = 1 if n_samples is None else samples_processed(n_samples, batch_size, epochs)
    return cost.forward * scale, cost.backward * scale


# ---------------------------------------------------------------------------
# communication


def _zero_state(spec: ModelSpec, depth: int, frozen: int, groups: tuple[str, ...]) -> ModelState:
    arrays = {g: {n: np.zeros(s, dtype=np.float32) for n, s in group_shapes(spec, g).items()} for g in groups}
    return ModelState(spec, arrays, depth, frozen, np.dtype(np.float32))


@lru_cache(maxsize=4096)
def message_bytes(spec: ModelSpec, depth: int, frozen: int, groups: tuple[str, ...]) -> int:
    """Exact size of a checkpoint-format message carrying ``groups`` at 32-bit."""
    return len(serialize_model(_zero_state(spec, depth, frozen, groups)))


def payload_bytes(spec: ModelSpec, groups, encoder_only: bool = False) -> int:
    return BYTES_PER_PARAM * sum(group_numel(spec, g) for g in groups if not encoder_only or g.startswith("enc."))


@dataclass(frozen=True)
class CommCost:
    bytes_down: int
    bytes_up: int
    enc_bytes_down: int
    enc_bytes_up: int


def comm_round(spec: ModelSpec, schedule: StageSchedule, r: int) -> CommCost:
    depth, frozen = schedule.depth(r), schedule.frozen_prefix(r)
    down, up = tuple(schedule.download(r)), tuple(schedule.upload(r))
    return CommCost(
        bytes_down=message_bytes(spec, depth, frozen, down),
        bytes_up=message_bytes(spec, depth, frozen, up),
        enc_bytes_down=payload_bytes(spec, down, encoder_only=True),
        enc_bytes_up=payload_bytes(spec, up, encoder_only=True),
    )


# ---------------------------------------------------------------------------
# memory


def block_activations(spec: ModelSpec, index: int) -> int:
    d_in, hid, out = spec.block_dims(index)
    return 2 * d_in + 2 * hid + out


def head_activations(spec: ModelSpec, head: str) -> int:
    shapes = head_shapes(spec, head)
    weights = [s for n, s in shapes.items() if n.endswith(".weight")]
    return sum((3 if i < len(weights) - 1 else 2) * b for i, (_, b) in enumerate(weights))


def memory_breakdown(
    spec: ModelSpec, strategy: str, stage: int, batch_size: int, align_active: bool = False
) -> dict[str, int]:
    """Scalar counts of each memory term for one client at ``stage``."""
    depth = spec.num_layers if strategy == "end_to_end" else stage
    frozen = stage - 1 if strategy in LAYERWISE else 0
    enc = [f"enc.{i}" for i in range(depth)]
    trainable = enc[frozen:] + ["proj", "pred"]
    align = align_active and strategy == "lw_fedssl"
    n_train = sum(group_numel(spec, g, trainable_only=True) for g in trainable)
    acts = sum(block_activations(spec, i) for i in range(frozen, depth))
    acts += head_activations(spec, "proj") + head_activations(spec, "pred")
    return {
        "params": sum(group_numel(spec, g) for g in enc + ["proj", "pred"]),
        "global_params": sum(group_numel(spec, g) for g in enc) if align else 0,
        "momentum_params": sum(group_numel(spec, g) for g in enc + ["proj"]),
        "grads": n_train,
        "adam_moments": 2 * n_train,
        "activations": 2 * batch_size * acts,
        "boundary_activation": 2 * batch_size * spec.block_out_dim if frozen > 0 else 0,
    }


def memory_model(spec: ModelSpec, strategy: str, stage: int, batch_size: int, align_active: bool = False) -> int:
    return BYTES_PER_PARAM * sum(memory_breakdown(spec, strategy, stage, batch_size, align_active).values())


# ---------------------------------------------------------------------------
# ledger


@dataclass(frozen=True)
class ResourceEntry:
    round: int
    actor: str
    stage: int
    flops_fwd: int
    flops_bwd: int
    bytes_down: int
    bytes_up: int
    mem_model: int
    enc_bytes_down: int = 0
    enc_bytes_up: int = 0


CSV_COLUMNS = [f.name for f in fields(ResourceEntry)]


def client_entry(
    spec: ModelSpec,
    schedule: StageSchedule,
    r: int,
    client: int,
    n_samples: int,
    batch_size: int,
    epochs: int,
    align_active: bool,
) -> ResourceEntry:
    s = schedule.stage(r) if schedule.staged else spec.num_layers
    fwd, bwd = flops_local_round(spec, schedule.strategy, s, batch_size, epochs, align_active, n_samples)
    comm = comm_round(spec, schedule, r)
    return ResourceEntry(
        round=r,
        actor=f"client:{client}",
        stage=schedule.stage(r),
        flops_fwd=fwd,
        flops_bwd=bwd,
        bytes_down=comm.bytes_down,
        bytes_up=comm.bytes_up,
        mem_model=memory_model(spec, schedule.strategy, s, batch_size, align_active),
        enc_bytes_down=comm.enc_bytes_down,
        enc_bytes_up=comm.enc_bytes_up,
    )


def server_entry(
    spec: ModelSpec, schedule: StageSchedule, r: int, n_aux: int, batch_size: int, epochs: int
) -> ResourceEntry:
    """Calibration cost: every present layer trained, no alignment."""
    s = schedule.stage(r)
    fwd, bwd = flops_local_round(spec, "progressive", s, batch_size, epochs, False, n_aux)
    return ResourceEntry(
        round=r,
        actor=SERVER,
        stage=s,
        flops_fwd=fwd,
        flops_bwd=bwd,
        bytes_down=0,
        bytes_up=0,
        mem_model=memory_model(spec, "progressive", s, batch_size) if epochs > 0 else 0,
    )


class ResourceLedger:
    def __init__(self, entries=()):
        self.entries: list[ResourceEntry] = list(entries)

    def extend(self, entries) -> None:
        self.entries.extend(entries)
        self.entries.sort(key=lambda e: (e.round, e.actor == SERVER, _actor_key(e.actor)))

    def for_actor(self, actor: str) -> list[ResourceEntry]:
        return [e for e in self.entries if e.actor == actor]

    def totals(self, actor: str | None = None) -> dict[str, int]:
        rows = self.entries if actor is None else self.for_actor(actor)
        keys = ["flops_fwd", "flops_bwd", "bytes_down", "bytes_up", "enc_bytes_down", "enc_bytes_up"]
        out = {k: sum(getattr(e, k) for e in rows) for k in keys}
        out["mem_model_peak"] = max((e.mem_model for e in rows), default=0)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for e in self.entries:
            w.writerow(asdict(e))
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ResourceLedger":
        rows = csv.DictReader(io.StringIO(text))
        return cls(
            ResourceEntry(**{k: (v if k == "actor" else int(v)) for k, v in row.items()}) for row in rows
        )


def _actor_key(actor: str) -> int:
    return int(actor.split(":")[1]) if actor.startswith("client:") else -1


def plan_ledger(
    spec: ModelSpec,
    schedule: StageSchedule,
    client_sizes: list[int],
    batch_size: int,
    epochs: int,
    align_active: bool,
    n_aux: int = 0,
    calibration_epochs: int = 0,
    participants=None,
) -> ResourceLedger:
    """Full-run ledger computed without training.

    ``participants`` maps round -> client ids (default: everyone every round).
    """
    ledger = ResourceLedger()
    for r in range(schedule.rounds):
        ids = range(len(client_sizes)) if participants is None else participants[r]
        rows = [client_entry(spec, schedule, r, c, client_sizes[c], batch_size, epochs, align_active) for c in ids]
        if schedule.strategy == "lw_fedssl" and calibration_epochs > 0:
            rows.append(server_entry(spec, schedule, r, n_aux, batch_size, calibration_epochs))
        ledger.extend(rows)
    return ledger


__all__ = [
    "BYTES_PER_PARAM",
    "BACKWARD_MULTIPLIER",
    "CommCost",
    "ResourceEntry",
    "ResourceLedger",
    "block_flops",
    "head_flops",
    "encoder_flops",
    "flops_local_round",
    "comm_round",
    "memory_breakdown",
    "memory_model",
    "message_bytes",
    "payload_bytes",
    "plan_ledger",
]
