"""Run configuration: one TOML document with sections, validated as a whole.

Precedence is flag > config file > dataclass default. Validation collects
every violated field before raising, so one run reports all problems.
"""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any

from . import data
from .mining import SETTINGS, MiningConfig
from .pruning import METHODS
from .training import TrainConfig
from .unet import ArchConfig, ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CONFIG_VERSION = 1
BASELINES = ("random", "class-distribution", "demographic-distribution")
BUNDLED = {"desk": "desk.toml", "smoke": "smoke.toml"}


class ConfigValidationError(ConfigError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


@dataclass
class DatasetConfig:
    """Exactly one of ``path`` (a corpus directory) or ``generate`` (a GenSpec)."""

    path: str | None = None
    generate: data.GenSpec | None = None
    split: tuple[float, float, float] = (0.6, 0.1, 0.3)
    split_seed: int = 0


@dataclass
class ReportConfig:
    drop_ratios: tuple[float, ...] = (0.25, 0.5, 0.75)
    ablation_ratio: float = 0.7
    ablation_methods: tuple[str, ...] = METHODS


@dataclass
class RunConfig:
    dataset: DatasetConfig
    arch: ArchConfig = field(default_factory=ArchConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    report: ReportConfig = field(default_factory=ReportConfig)
    setting: str = "supervised"
    baselines: tuple[str, ...] = ("random",)
    seeds: tuple[int, ...] = (10, 20, 30)
    output_dir: str = "runs"
    version: int = CONFIG_VERSION

    def validate(self, check_paths: bool = True) -> list[str]:
        errors = []
        if self.version != CONFIG_VERSION:
            errors.append(f"version must be {CONFIG_VERSION}")
        ds = self.dataset
        if (ds.path is None) == (ds.generate is None):
            errors.append("dataset: exactly one of dataset.path or [dataset.generate] is required")
        if ds.path is not None and check_paths and not Path(ds.path).is_dir():
            errors.append(f"dataset.path {ds.path!r} does not exist")
        if ds.generate is not None:
            errors += ds.generate.validate()
        if len(ds.split) != 3 or any(f < 0 for f in ds.split) or abs(sum(ds.split) - 1) > 1e-9:
            errors.append("dataset.split must be three nonnegative fractions summing to 1")
        errors += self.arch.validate()
        errors += self.training.validate()
        errors += self.mining.validate()
        if self.setting not in SETTINGS:
            errors.append(f"setting must be one of {SETTINGS}")
        for b in self.baselines:
            if b not in BASELINES:
                errors.append(f"baselines: unknown sampler {b!r} (choose from {BASELINES})")
        if not self.seeds:
            errors.append("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            errors.append("seeds must be distinct")
        for p in self.report.drop_ratios:
            if not 0 <= p < 1:
                errors.append(f"report.drop_ratios: {p} outside [0, 1)")
        if not 0 <= self.report.ablation_ratio < 1:
            errors.append("report.ablation_ratio must lie in [0, 1)")
        for m in self.report.ablation_methods:
            if m not in METHODS:
                errors.append(f"report.ablation_methods: unknown method {m!r}")
        return errors

    def check(self, check_paths: bool = True) -> "RunConfig":
        errors = self.validate(check_paths)
        if errors:
            raise ConfigValidationError(errors)
        return self


def _coerce(cls, section: dict, where: str, errors: list[str]):
    """Build dataclass ``cls`` from a table, recording unknown or mistyped keys."""
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in section.items():
        if key not in known:
            errors.append(f"{where}.{key}: unknown field")
            continue
        default = getattr(cls(), key) if cls is not DatasetConfig else None
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                errors.append(f"{where}.{key}: expected a boolean")
                continue
        elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif default is not None and not isinstance(default, tuple) and not isinstance(value, type(default)):
            errors.append(f"{where}.{key}: expected {type(default).__name__}, got {type(value).__name__}")
            continue
        kwargs[key] = value
    return cls(**kwargs)


_GEN_SCALARS = ("n_samples", "image_size", "seed", "channels", "background", "noise_std", "class_rule", "size_split")


def _gen_spec(table: dict, errors: list[str]) -> data.GenSpec:
    table = dict(table)
    preset = table.pop("preset", "desk" if "subgroups" not in table else None)
    subtle_share = table.pop("subtle_share", 0.2)
    unknown = set(table) - set(_GEN_SCALARS) - {"subgroups"}
    for k in sorted(unknown):
        errors.append(f"dataset.generate.{k}: unknown field")
    scalars = {k: table[k] for k in _GEN_SCALARS if k in table}
    if "subgroups" in table:
        try:
            return data.spec_from_dict({"n_samples": scalars.pop("n_samples", 400), "subgroups": table["subgroups"],
                                        **scalars})
        except TypeError as exc:
            errors.append(f"dataset.generate.subgroups: {exc}")
            return data.desk_spec()
    if preset != "desk":
        errors.append(f"dataset.generate.preset: unknown preset {preset!r}")
    spec = data.desk_spec(int(scalars.pop("n_samples", 400)), int(scalars.pop("seed", 0)), float(subtle_share))
    return replace(spec, **scalars)


def _build(doc: dict) -> tuple[RunConfig, list[str]]:
    """Best-effort config plus structural errors (unknown or mistyped keys); bad keys keep defaults."""
    errors: list[str] = []
    doc = dict(doc)
    top = {f.name for f in fields(RunConfig)}
    for key in sorted(set(doc) - top):
        errors.append(f"{key}: unknown field")
    ds_table = dict(doc.get("dataset", {}))
    gen = ds_table.pop("generate", None)
    ds = _coerce(DatasetConfig, {k: v for k, v in ds_table.items()}, "dataset", errors)
    if isinstance(ds.split, list):
        ds.split = tuple(ds.split)
    if gen is not None:
        ds.generate = _gen_spec(gen, errors)
    cfg = RunConfig(
        dataset=ds,
        arch=_coerce(ArchConfig, doc.get("arch", {}), "arch", errors),
        training=_coerce(TrainConfig, doc.get("training", {}), "training", errors),
        mining=_coerce(MiningConfig, doc.get("mining", {}), "mining", errors),
        report=_coerce(ReportConfig, doc.get("report", {}), "report", errors),
    )
    for key in ("setting", "output_dir"):
        if key in doc:
            if isinstance(doc[key], str):
                setattr(cfg, key, doc[key])
            else:
                errors.append(f"{key}: expected a string")
    for key in ("baselines", "seeds"):
        if key in doc:
            if isinstance(doc[key], list):
                setattr(cfg, key, tuple(doc[key]))
            else:
                errors.append(f"{key}: expected a list")
    if "version" in doc:
        cfg.version = doc["version"]
    else:
        errors.append("version: missing (required)")
    return cfg, errors


def from_dict(doc: dict, check_paths: bool | None = None) -> RunConfig:
    """Structural errors and, when ``check_paths`` is given, value errors are raised together."""
    cfg, errors = _build(doc)
    if check_paths is not None:
        errors += [e for e in cfg.validate(check_paths) if e not in errors]
    if errors:
        raise ConfigValidationError(errors)
    return cfg


def bundled_text(name: str) -> str:
    return resources.files("htlprune.configs").joinpath(BUNDLED[name]).read_text()


def load_document(path_or_name: str) -> dict:
    """Parse a TOML file, or a bundled config by name (``desk``, ``smoke``)."""
    if path_or_name in BUNDLED:
        return tomllib.loads(bundled_text(path_or_name))
    with open(path_or_name, "rb") as fh:
        return tomllib.load(fh)


def set_dotted(doc: dict, dotted: str, value: Any) -> None:
    node = doc
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def load_config(path_or_name: str, overrides: dict[str, Any] | None = None, check_paths: bool = True) -> RunConfig:
    """Load, apply dotted-key flag overrides, then validate everything at once."""
    doc = load_document(path_or_name)
    for k, v in (overrides or {}).items():
        if v is not None:
            set_dotted(doc, k, v)
    return from_dict(doc, check_paths)


def to_dict(cfg: RunConfig) -> dict:
    """JSON-ready mirror of the config (tuples become lists)."""
    def clean(v):
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        return v
    return clean(asdict(cfg))
