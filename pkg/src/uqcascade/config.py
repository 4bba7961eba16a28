"""Run configuration: one flat key = value file drives every stage.

The file fully determines every artifact byte for byte (given the same
build): data generation, model init, training, calibration and the MC
evaluation streams all draw from the seeds recorded here.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

from .data import GeneratorConfig, SplitSpec
from .mae import MaeConfig


class ConfigError(ValueError):
    """Unknown key, bad value, or unreadable config file."""


@dataclass(frozen=True)
class HeadConfig:
    hidden_dim: int = 64
    dropout_rate: float = 0.3


@dataclass(frozen=True)
class TrainConfig:
    mae_epochs: int = 30
    mae_batch_size: int = 256
    mae_lr: float = 1e-3
    head_epochs: int = 40
    head_batch_size: int = 256
    head_lr: float = 1e-3


@dataclass(frozen=True)
class DetectorConfig:
    quantile: float = 0.99
    kmeans_k: int = 0  # 0 means auto: 4 x number of in-scope classes
    kmeans_max_iter: int = 100
    kmeans_restarts: int = 1
    mc_passes: int = 100


@dataclass(frozen=True)
class Seeds:
    data: int = 11
    init: int = 12
    training: int = 13
    mc: int = 14


@dataclass(frozen=True)
class Paths:
    out_dir: str = "runs"
    data_csv: str = ""  # when set, ingest this CSV instead of generating


@dataclass(frozen=True)
class RunConfig:
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    split: SplitSpec = field(default_factory=lambda: SplitSpec(held_out_class=5, held_out_subject=7))
    mae: MaeConfig = field(default_factory=MaeConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    seed: Seeds = field(default_factory=Seeds)
    paths: Paths = field(default_factory=Paths)

    def kmeans_k(self) -> int:
        if self.detector.kmeans_k > 0:
            return self.detector.kmeans_k
        in_scope = self.data.n_classes - (0 if self.split.held_out_class is None else 1)
        return 4 * in_scope


_SECTIONS = {
    "data": GeneratorConfig,
    "split": SplitSpec,
    "mae": MaeConfig,
    "head": HeadConfig,
    "train": TrainConfig,
    "detector": DetectorConfig,
    "seed": Seeds,
    "paths": Paths,
}


def _format_groups(groups) -> str:
    parts = []
    for name, chans in groups:
        chans = sorted(chans)
        if len(chans) > 1 and chans == list(range(chans[0], chans[-1] + 1)):
            parts.append(f"{name}:{chans[0]}-{chans[-1]}")
        else:
            parts.append(f"{name}:" + "+".join(str(c) for c in chans))
    return ",".join(parts)


def _parse_groups(text: str):
    groups = []
    for part in text.split(","):
        part = part.strip()
        if not part or ":" not in part:
            raise ConfigError(f"bad sensor group spec {part!r}")
        name, spec = part.split(":", 1)
        if "-" in spec:
            lo, hi = spec.split("-", 1)
            chans = tuple(range(int(lo), int(hi) + 1))
        else:
            chans = tuple(int(c) for c in spec.split("+"))
        groups.append((name.strip(), chans))
    return tuple(groups)


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return _format_groups(value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(section: str, name: str, ftype, raw: str):
    raw = raw.strip()
    if name == "sensor_groups":
        return _parse_groups(raw)
    if raw.lower() == "none":
        return None
    if ftype is bool or ftype == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{section}.{name}: expected a boolean, got {raw!r}")
    try:
        if ftype is int or "int" in str(ftype):
            return int(raw)
        if ftype is float or "float" in str(ftype):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{section}.{name}: bad value {raw!r}")
    return raw


def to_flat(config: RunConfig) -> dict[str, str]:
    """Dotted-key view of the config, serialization-ready."""
    flat: dict[str, str] = {}
    for section, _ in _SECTIONS.items():
        obj = getattr(config, section)
        for f in dataclasses.fields(obj):
            flat[f"{section}.{f.name}"] = _format_value(getattr(obj, f.name))
    return flat


def from_flat(flat: dict[str, str]) -> RunConfig:
    kwargs: dict[str, dict] = {s: {} for s in _SECTIONS}
    for key, raw in flat.items():
        if "." not in key:
            raise ConfigError(f"unknown key {key!r}")
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section {section!r} in key {key!r}")
        cls = _SECTIONS[section]
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        if name not in types:
            raise ConfigError(f"unknown key {key!r}")
        kwargs[section][name] = _parse_value(section, name, types[name], raw)
    try:
        return RunConfig(**{s: cls(**kwargs[s]) for s, cls in _SECTIONS.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))


def to_text(config: RunConfig) -> str:
    """Canonical key = value listing (stable order, no comments)."""
    return "".join(f"{k} = {v}\n" for k, v in to_flat(config).items())


def from_text(text: str) -> RunConfig:
    flat: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {line_no}: expected key = value, got {line!r}")
        key, raw = body.split("=", 1)
        flat[key.strip()] = raw.strip()
    return from_flat(flat)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return from_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}")


def save_config(config: RunConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_text(config))


def config_checksum(config: RunConfig) -> str:
    return hashlib.sha256(to_text(config).encode("utf-8")).hexdigest()


_SECTION_NOTES = {
    "data": "synthetic generator (classes are waveform families; domains apply channel transforms)",
    "split": "held-out class/subject and the train fraction of the source domain",
    "mae": "masked autoencoder architecture and mask ratio",
    "head": "classifier head over frozen encoder latents",
    "train": "optimizer schedule for both training phases",
    "detector": "quantile level, clustering and stochastic-pass counts (kmeans_k 0 = 4 x in-scope classes)",
    "seed": "independent streams: data generation, init, training, MC evaluation",
    "paths": "output directory (overridable with UQCASCADE_OUT_DIR) and optional CSV data source",
}


def default_config_text() -> str:
    """Default config with one comment block per section."""
    config = RunConfig()
    lines = []
    current = None
    for key, value in to_flat(config).items():
        section = key.split(".", 1)[0]
        if section != current:
            if current is not None:
                lines.append("")
            lines.append(f"# {_SECTION_NOTES[section]}")
            current = section
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
