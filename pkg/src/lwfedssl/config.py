"""TOML run configuration: defaults, unknown-key rejection, cross-field checks."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .evaluation import ProbeConfig
from .fed import FedConfig, OptimConfig
from .model import DTYPES, ModelSpec
from .schedule import ConfigError
from .ssl import AugmentPolicy, SslConfig, image_side

# Stable exit codes, shared with the CLI.
EXIT_MISSING = 2
EXIT_SYNTAX = 3
EXIT_UNKNOWN_KEY = 4
EXIT_INVALID = 5


class ConfigFileError(ConfigError):
    """Configuration problem carrying the process exit code to report."""

    def __init__(self, message: str, exit_code: int = EXIT_INVALID):
        super().__init__(message)
        self.exit_code = exit_code


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    n: int = 512
    eval_n: int = 1000
    classes: int = 2
    dim: int = 256
    cluster_sep: float = 6.0
    path: str = ""
    eval_path: str = ""
    partition: str = "uniform"
    beta: float = 0.5
    min_per_client: int = 2
    partition_file: str = ""
    aux_source: str = "synthetic"
    aux_n: int = 0
    aux_ratio: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    precision: str = "f32"
    out_dir: str = "runs/default"
    model: ModelSpec = field(default_factory=ModelSpec)
    fed: FedConfig = field(default_factory=FedConfig)
    ssl: SslConfig = field(default_factory=SslConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    data: DataConfig = field(default_factory=DataConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    @property
    def strategy(self) -> str:
        return self.fed.strategy

    @property
    def dtype(self):
        return DTYPES[self.precision]

    def replace(self, **changes) -> "RunConfig":
        cfg = dataclasses.replace(self, **changes)
        validate(cfg)
        return cfg

    def to_dict(self, include_out_dir: bool = True) -> dict:
        d = {"strategy": self.strategy, "seed": self.seed, "precision": self.precision}
        if include_out_dir:
            d["out_dir"] = self.out_dir
        for name in SECTIONS:
            section = dataclasses.asdict(getattr(self, name))
            if name == "fed":
                section.pop("strategy")
            d[name] = section
        return d


SECTIONS = {
    "model": ModelSpec,
    "fed": FedConfig,
    "ssl": SslConfig,
    "optim": OptimConfig,
    "augment": AugmentPolicy,
    "data": DataConfig,
    "probe": ProbeConfig,
}
TOP_LEVEL = ("strategy", "seed", "precision", "out_dir")


def _coerce(value: Any, default: Any, where: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigFileError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigFileError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigFileError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigFileError(f"{where}: expected a string, got {value!r}")
    return value


def _build_section(name: str, raw: dict, extra: dict | None = None) -> Any:
    cls = SECTIONS[name]
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known or (name == "fed" and key == "strategy"):
            raise ConfigFileError(f"unknown key {name}.{key}", EXIT_UNKNOWN_KEY)
    defaults = cls()
    kwargs = {k: _coerce(v, getattr(defaults, k), f"{name}.{k}") for k, v in raw.items()}
    kwargs.update(extra or {})
    try:
        return cls(**kwargs)
    except (ConfigError, ValueError) as exc:
        raise ConfigFileError(f"[{name}] {exc}") from exc


def from_dict(doc: dict) -> RunConfig:
    """Build and validate a RunConfig from a parsed TOML document."""
    for key, value in doc.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigFileError(f"[{key}] must be a table")
        elif key not in TOP_LEVEL:
            raise ConfigFileError(f"unknown key {key}", EXIT_UNKNOWN_KEY)
    top = RunConfig()
    strategy = _coerce(doc.get("strategy", FedConfig().strategy), "", "strategy")
    data = _build_section("data", doc.get("data", {}))
    model_raw = dict(doc.get("model", {}))
    model_raw.setdefault("input_dim", data.dim)
    cfg = RunConfig(
        seed=_coerce(doc.get("seed", top.seed), top.seed, "seed"),
        precision=_coerce(doc.get("precision", top.precision), top.precision, "precision"),
        out_dir=_coerce(doc.get("out_dir", top.out_dir), top.out_dir, "out_dir"),
        model=_build_section("model", model_raw),
        fed=_build_section("fed", doc.get("fed", {}), {"strategy": strategy}),
        ssl=_build_section("ssl", doc.get("ssl", {})),
        optim=_build_section("optim", doc.get("optim", {})),
        augment=_build_section("augment", doc.get("augment", {})),
        data=data,
        probe=_build_section("probe", doc.get("probe", {})),
    )
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Cross-field checks; raises ConfigFileError (exit code 5)."""
    problems = []
    m, f, d = cfg.model, cfg.fed, cfg.data
    if cfg.precision not in DTYPES:
        problems.append(f"precision must be one of {sorted(DTYPES)}, got {cfg.precision!r}")
    if f.strategy != "end_to_end" and f.rounds < m.num_layers:
        problems.append(f"R < S: {f.rounds} rounds cannot cover {m.num_layers} stages")
    if cfg.ssl.batch_size < 2:
        problems.append("batch_size must be >= 2")
    if d.source not in ("synthetic", "cifar10"):
        problems.append(f"data.source must be synthetic or cifar10, got {d.source!r}")
    if d.source == "cifar10":
        if not d.path:
            problems.append("data.path is required for cifar10")
        if m.input_dim != 3072:
            problems.append("cifar10 needs model.input_dim = 3072")
    elif m.input_dim != d.dim:
        problems.append(f"model.input_dim {m.input_dim} != data.dim {d.dim}")
    if d.n < f.clients or d.n < d.classes:
        problems.append(f"data.n={d.n} is too small for {f.clients} clients / {d.classes} classes")
    if d.eval_n < 2 * d.classes:
        problems.append("data.eval_n must hold at least two samples per class")
    if d.partition not in ("uniform", "dirichlet"):
        problems.append(f"data.partition must be uniform or dirichlet, got {d.partition!r}")
    if d.partition == "dirichlet" and d.beta <= 0:
        problems.append("data.beta must be > 0")
    if d.aux_source not in ("synthetic", "client_pool", "none"):
        problems.append(f"data.aux_source must be synthetic, client_pool or none, got {d.aux_source!r}")
    if not 0 < d.aux_ratio <= 1:
        problems.append("data.aux_ratio must be in (0, 1]")
    if f.strategy == "lw_fedssl" and f.calibration_epochs > 0 and d.aux_source == "none":
        problems.append("lw_fedssl with calibration_epochs > 0 needs auxiliary data (aux_source)")
    if cfg.augment.needs_image and image_side(m.input_dim) is None:
        problems.append(f"crop/flip/cutout need a square feature dim, got {m.input_dim}")
    if cfg.probe.epochs < 1:
        problems.append("probe.epochs must be >= 1")
    if problems:
        raise ConfigFileError("; ".join(problems), EXIT_INVALID)


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigFileError(f"config file not found: {path}", EXIT_MISSING) from None
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc}", EXIT_MISSING) from exc
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigFileError(f"{path}: TOML syntax error: {exc}", EXIT_SYNTAX) from exc
    return from_dict(doc)


def to_toml(cfg: RunConfig) -> str:
    """Render a config back to TOML (flat tables, scalars only)."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        return repr(v)

    d = cfg.to_dict()
    lines = [f"{k} = {fmt(d[k])}" for k in TOP_LEVEL if k in d]
    for name in SECTIONS:
        lines.append(f"\n[{name}]")
        lines.extend(f"{k} = {fmt(v)}" for k, v in d[name].items() if v is not None)
    return "\n".join(lines) + "\n"
