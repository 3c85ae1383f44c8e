"""Encoder/head parameter state, forward passes, AdamW and learning-rate schedules.

A ``ModelState`` is a plain ordered mapping of parameter groups. Each encoder
layer is one group (``enc.0`` .. ``enc.{S-1}``), the projection head is
``proj`` and the prediction head is ``pred``. Groups hold numpy arrays; batch
norm running statistics live next to the affine parameters under names
containing ``running_`` and are never trained by the optimizer.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .tensor import ContractError, NumericError, Tensor

MAGIC = b"LWFS"
FORMAT_VERSION = 1

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int = 256
    num_layers: int = 3
    block_hidden_dim: int = 64
    block_out_dim: int = 32
    proj_hidden: int = 128
    proj_out: int = 32
    pred_hidden: int = 128

    def __post_init__(self):
        for name, value in vars(self).items():
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"ModelSpec.{name} must be a positive int, got {value!r}")

    def block_dims(self, index: int) -> tuple[int, int, int]:
        """(in, hidden, out) of encoder block ``index`` (0-based)."""
        d_in = self.input_dim if index == 0 else self.block_out_dim
        return d_in, self.block_hidden_dim, self.block_out_dim


def layer_name(index: int) -> str:
    return f"enc.{index}"


def is_buffer(name: str) -> bool:
    return "running_" in name


# ---------------------------------------------------------------------------
# shapes and initialization


def layer_shapes(spec: ModelSpec, index: int) -> dict[str, tuple[int, ...]]:
    d_in, hid, out = spec.block_dims(index)
    return {
        "bn.gamma": (d_in,),
        "bn.beta": (d_in,),
        "bn.running_mean": (d_in,),
        "bn.running_var": (d_in,),
        "fc1.weight": (d_in, hid),
        "fc1.bias": (hid,),
        "fc2.weight": (hid, out),
        "fc2.bias": (out,),
    }


def _mlp_shapes(dims: list[int]) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        shapes[f"l{i}.weight"] = (a, b)
        shapes[f"l{i}.bn.gamma"] = (b,)
        shapes[f"l{i}.bn.beta"] = (b,)
        shapes[f"l{i}.bn.running_mean"] = (b,)
        shapes[f"l{i}.bn.running_var"] = (b,)
    return shapes


def head_shapes(spec: ModelSpec, head: str) -> dict[str, tuple[int, ...]]:
    if head == "proj":
        return _mlp_shapes([spec.block_out_dim, spec.proj_hidden, spec.proj_hidden, spec.proj_out])
    if head == "pred":
        return _mlp_shapes([spec.proj_out, spec.pred_hidden, spec.proj_out])
    raise KeyError(head)


def group_shapes(spec: ModelSpec, group: str) -> dict[str, tuple[int, ...]]:
    if group.startswith("enc."):
        return layer_shapes(spec, int(group.split(".")[1]))
    return head_shapes(spec, group)


def group_numel(spec: ModelSpec, group: str, trainable_only: bool = False) -> int:
    return sum(
        math.prod(s) for n, s in group_shapes(spec, group).items() if not (trainable_only and is_buffer(n))
    )


def _init_group(shapes: Mapping[str, tuple[int, ...]], rng: np.random.Generator, dtype) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in shapes.items():
        if name.endswith("weight"):
            fan_in, fan_out = shape
            a = math.sqrt(6.0 / (fan_in + fan_out))
            out[name] = rng.uniform(-a, a, size=shape).astype(dtype)
        elif name.endswith("gamma") or name.endswith("running_var"):
            out[name] = np.ones(shape, dtype=dtype)
        else:
            out[name] = np.zeros(shape, dtype=dtype)
    return out


def _group_rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0x4C57, tag]))


def init_layer(spec: ModelSpec, index: int, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh Xavier-uniform init of encoder block ``index``; depends only on (spec, index, seed)."""
    return _init_group(layer_shapes(spec, index), _group_rng(seed, index), dtype)


def init_head(spec: ModelSpec, head: str, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    tag = {"proj": 10_000, "pred": 10_001}[head]
    return _init_group(head_shapes(spec, head), _group_rng(seed, tag), dtype)


@dataclass
class ModelState:
    spec: ModelSpec
    groups: dict[str, dict[str, np.ndarray]]
    active_depth: int = 0
    frozen_prefix: int = 0
    dtype: np.dtype = field(default_factory=lambda: np.dtype(np.float32))

    def __post_init__(self):
        if not 0 <= self.frozen_prefix <= self.active_depth <= self.spec.num_layers:
            raise ContractError(
                f"need 0 <= frozen_prefix ({self.frozen_prefix}) <= active_depth "
                f"({self.active_depth}) <= S ({self.spec.num_layers})"
            )

    @property
    def encoder_groups(self) -> list[str]:
        return [layer_name(i) for i in range(self.active_depth)]

    def copy(self) -> "ModelState":
        return ModelState(
            self.spec,
            {g: {n: a.copy() for n, a in grp.items()} for g, grp in self.groups.items()},
            self.active_depth,
            self.frozen_prefix,
            self.dtype,
        )

    def numel(self, groups: Iterable[str] | None = None) -> int:
        names = self.groups if groups is None else groups
        return sum(a.size for g in names for a in self.groups[g].values())

    def equals(self, other: "ModelState") -> bool:
        """Bitwise equality of structure and every array."""
        if (self.active_depth, self.frozen_prefix, self.dtype) != (
            other.active_depth,
            other.frozen_prefix,
            other.dtype,
        ) or list(self.groups) != list(other.groups):
            return False
        for g, grp in self.groups.items():
            if list(grp) != list(other.groups[g]):
                return False
            for n, a in grp.items():
                b = other.groups[g][n]
                if a.shape != b.shape or a.tobytes() != b.tobytes():
                    return False
        return True


def build_model(spec: ModelSpec, seed: int, staged: bool = False, dtype=np.float32) -> ModelState:
    """Seeded model. ``staged`` models start with no encoder layers (depth 0)."""
    dtype = np.dtype(dtype)
    depth = 0 if staged else spec.num_layers
    groups: dict[str, dict[str, np.ndarray]] = {}
    for i in range(depth):
        groups[layer_name(i)] = init_layer(spec, i, seed, dtype)
    groups["proj"] = init_head(spec, "proj", seed, dtype)
    groups["pred"] = init_head(spec, "pred", seed, dtype)
    return ModelState(spec, groups, depth, 0, dtype)


def ordered_groups(state: ModelState) -> list[str]:
    return state.encoder_groups + ["proj", "pred"]


def param_count(spec: ModelSpec, groups: Iterable[str], trainable_only: bool = False) -> int:
    return sum(group_numel(spec, g, trainable_only) for g in groups)


# ---------------------------------------------------------------------------
# forward passes


class Params:
    """Tensor views of a model's arrays for one forward/backward pass.

    Groups listed in ``trainable`` get gradient-tracking leaves for their
    non-buffer arrays; everything else is a constant.
    """

    def __init__(self, state: ModelState, trainable: Iterable[str] = ()):
        self.state = state
        self.trainable = set(trainable)
        self.leaves: dict[tuple[str, str], Tensor] = {}
        for g in self.trainable:
            for n, a in state.groups[g].items():
                if not is_buffer(n):
                    self.leaves[(g, n)] = Tensor(a, requires_grad=True)

    def get(self, group: str, name: str):
        leaf = self.leaves.get((group, name))
        return leaf if leaf is not None else Tensor(self.state.groups[group][name])

    def raw(self, group: str, name: str) -> np.ndarray:
        return self.state.groups[group][name]

    def keys(self) -> list[tuple[str, str]]:
        return list(self.leaves)

    def tensors(self) -> list[Tensor]:
        return list(self.leaves.values())


def _bn(x: Tensor, p: Params, group: str, prefix: str, train: bool, stats: dict | None) -> Tensor:
    gamma = p.get(group, prefix + "gamma")
    beta = p.get(group, prefix + "beta")
    if train:
        if stats is not None:
            stats.setdefault((group, prefix), []).append(T.batch_stats(x.data))
        return T.batch_norm_train(x, gamma, beta)
    return T.batch_norm_eval(x, gamma, beta, p.raw(group, prefix + "running_mean"), p.raw(group, prefix + "running_var"))


def block_forward(x: Tensor, p: Params, index: int, train: bool, stats: dict | None = None) -> Tensor:
    """BN pre-norm -> Linear -> GELU -> Linear, plus residual when in == out."""
    g = layer_name(index)
    h = _bn(x, p, g, "bn.", train, stats)
    h = T.gelu(T.add_bias(T.matmul(h, p.get(g, "fc1.weight")), p.get(g, "fc1.bias")))
    y = T.add_bias(T.matmul(h, p.get(g, "fc2.weight")), p.get(g, "fc2.bias"))
    if x.shape[1] == y.shape[1]:
        y = T.add(y, x)
    return y


def head_forward(x: Tensor, p: Params, head: str, train: bool, stats: dict | None = None) -> Tensor:
    """Linear(no bias) + BN (+ ReLU except after the last layer)."""
    grp = p.state.groups[head]
    n_layers = sum(1 for n in grp if n.endswith(".weight"))
    for i in range(n_layers):
        x = T.matmul(x, p.get(head, f"l{i}.weight"))
        x = _bn(x, p, head, f"l{i}.bn.", train, stats)
        if i < n_layers - 1:
            x = T.relu(x)
    return x


def forward_encoder(
    state: ModelState,
    x,
    depth: int | None = None,
    train: bool = False,
    params: Params | None = None,
    stats: dict | None = None,
) -> Tensor:
    """Compose encoder blocks 1..depth.

    Frozen blocks (index < frozen_prefix) always run in inference mode with
    constant parameters, so they add no gradient-tracking nodes.
    """
    depth = state.active_depth if depth is None else depth
    if not 1 <= depth <= state.active_depth:
        raise ContractError(f"depth {depth} outside [1, {state.active_depth}]")
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=state.dtype))
    if x.shape[1] != state.spec.input_dim:
        raise ContractError(f"input dim {x.shape[1]} != model input_dim {state.spec.input_dim}")
    const = Params(state)
    p = params if params is not None else const
    for i in range(depth):
        if i < state.frozen_prefix:
            x = block_forward(x, const, i, False)
        else:
            x = block_forward(x, p, i, train, stats)
    return x


def apply_running_stats(state: ModelState, stats: Mapping, momentum: float = T.BN_MOMENTUM) -> None:
    """Fold recorded batch statistics into the running estimates, in call order."""
    m = state.dtype.type(momentum)
    for (group, prefix), seq in stats.items():
        grp = state.groups[group]
        rm, rv = grp[prefix + "running_mean"], grp[prefix + "running_var"]
        for mean, var in seq:
            rm = m * rm + (1 - m) * mean.astype(state.dtype)
            rv = m * rv + (1 - m) * var.astype(state.dtype)
        grp[prefix + "running_mean"] = rm
        grp[prefix + "running_var"] = rv


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """AdamW moments keyed by (group, name)."""

    base_lr: float = 1.5e-4
    weight_decay: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)
    v: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)


def adamw_step(
    groups: dict[str, dict[str, np.ndarray]],
    keys: list[tuple[str, str]],
    grads: list[np.ndarray],
    opt: OptimizerState,
    lr: float,
) -> None:
    """Decoupled-weight-decay Adam update of the arrays in ``groups`` named by ``keys``.

    Moments are created lazily, so they exist only for parameters that were
    ever trained. Arrays are replaced, not mutated, so copies taken earlier
    stay valid.
    """
    for k, g in zip(keys, grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k[0]}/{k[1]}")
    opt.step += 1
    b1, b2 = opt.betas
    bc1 = 1 - b1**opt.step
    bc2 = 1 - b2**opt.step
    for k, g in zip(keys, grads):
        group, name = k
        p0 = groups[group][name]
        m = opt.m.get(k)
        v = opt.v.get(k)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        opt.m[k], opt.v[k] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        p = p0 * (1 - lr * opt.weight_decay) - lr * update
        groups[group][name] = p.astype(p0.dtype, copy=False)


# ---------------------------------------------------------------------------
# learning-rate schedules


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "cosine"
    base_lr: float = 1.5e-4
    batch_size: int = 256
    total_steps: int = 1
    per_stage_steps: tuple[int, ...] = ()
    warmup_steps: int = 0

    def __post_init__(self):
        if self.kind not in ("fixed", "cosine", "cyclic"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "cyclic" and sum(self.per_stage_steps) != self.total_steps:
            raise ValueError("cyclic per_stage_steps must sum to total_steps")

    @property
    def peak(self) -> float:
        return self.base_lr * self.batch_size / 256


def _cosine(t: int, horizon: int) -> float:
    return 0.5 * (1 + math.cos(math.pi * t / horizon))


def lr_at(sch: LrSchedule, step: int) -> float:
    """Learning rate at ``step`` (one step per local epoch in this package)."""
    if not 0 <= step < sch.total_steps:
        raise ContractError(f"step {step} outside [0, {sch.total_steps})")
    peak = sch.peak
    if step < sch.warmup_steps:
        return peak * (step + 1) / sch.warmup_steps
    if sch.kind == "fixed":
        return peak
    if sch.kind == "cosine":
        return peak * _cosine(step - sch.warmup_steps, sch.total_steps - sch.warmup_steps)
    start = 0
    for length in sch.per_stage_steps:
        if step < start + length:
            return peak * _cosine(step - start, length)
        start += length
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# checkpoint format


class CheckpointError(ValueError):
    pass


class VersionError(CheckpointError):
    pass


class TruncationError(CheckpointError):
    pass


class ShapeError(CheckpointError):
    pass


def serialize_model(state: ModelState, groups: Iterable[str] | None = None) -> bytes:
    """Encode ``state`` (or a subset of its groups) in the LWFS checkpoint format."""
    names = list(state.groups if groups is None else groups)
    entries = []
    payload = []
    for g in names:
        for n, a in state.groups[g].items():
            entries.append({"name": f"{g}/{n}", "shape": list(a.shape)})
            payload.append(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes())
    header = {
        "dtype": _DTYPE_NAMES[state.dtype],
        "active_depth": state.active_depth,
        "frozen_prefix": state.frozen_prefix,
        "spec": {k: int(v) for k, v in vars(state.spec).items()},
        "tensors": entries,
    }
    hbytes = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<HI", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(payload)


def header_size(data: bytes) -> int:
    return 10 + struct.unpack_from("<I", data, 6)[0]


def deserialize_model(data: bytes) -> ModelState:
    if len(data) < 10 or data[:4] != MAGIC:
        raise TruncationError("missing LWFS magic or preamble")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    if len(data) < 10 + hlen:
        raise TruncationError("header truncated")
    header = json.loads(data[10 : 10 + hlen].decode("utf-8"))
    dtype = np.dtype(DTYPES[header["dtype"]]).newbyteorder("<")
    spec = ModelSpec(**header["spec"])
    groups: dict[str, dict[str, np.ndarray]] = {}
    offset = 10 + hlen
    for entry in header["tensors"]:
        g, n = entry["name"].split("/", 1)
        shape = tuple(entry["shape"])
        expected = group_shapes(spec, g).get(n)
        if expected != shape:
            raise ShapeError(f"{entry['name']}: shape {shape} does not match spec {expected}")
        nbytes = math.prod(shape) * dtype.itemsize
        if offset + nbytes > len(data):
            raise TruncationError(f"payload truncated at {entry['name']}")
        arr = np.frombuffer(data, dtype=dtype, count=math.prod(shape), offset=offset).reshape(shape)
        groups.setdefault(g, {})[n] = arr.astype(dtype.newbyteorder("="))
        offset += nbytes
    if offset != len(data):
        raise ShapeError(f"{len(data) - offset} trailing bytes after payload")
    return ModelState(spec, groups, header["active_depth"], header["frozen_prefix"], np.dtype(DTYPES[header["dtype"]]))
