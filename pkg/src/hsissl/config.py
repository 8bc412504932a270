"""Experiment configuration: nested dataclasses backed by a YAML file.

Validation errors carry ``file:line`` positions taken from the YAML node
marks, and dotted-key overrides (``dhp.alpha_max=0.3``) are applied on top of
file values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError


@dataclass
class SceneSection:
    height: int = 64
    width: int = 64
    bands: int = 16
    num_classes: int = 5
    region_granularity: float = 800.0
    signature_separation: float = 0.15
    noise_sigma: float = 0.15
    seed: int = 0


@dataclass
class DataSection:
    cube: str | None = None
    labels: str | None = None


@dataclass
class EaslpSection:
    eps: float = 50.0
    compactness: float = 10.0
    slic_iters: int = 10
    per_class: int = 200


@dataclass
class DhpSection:
    l_min: int = 50
    l_max: int = 300
    alpha_min: float = 0.1
    alpha_max: float = 0.4
    t0: float | None = None   # default: 10% of the epochs


@dataclass
class AtscSection:
    tau_conf: float = 0.9
    tau_gap: float | None = None   # default: l_min / 4
    momentum: float = 0.99
    fixed_threshold: float = 0.95


@dataclass
class ModelSection:
    hidden: int = 64
    lr: float = 1e-3
    temperature: float = 0.5
    lambda_max: float = 0.5
    sigma_s: float = 0.05
    patch_size: int = 24
    batch_size: int = 64


@dataclass
class AblationSection:
    easlp: bool = True
    dhp: bool = True
    atsc: bool = True
    unlabeled: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    repeats: int = 1
    epochs: int = 200
    labels_per_class: int = 10
    scene: SceneSection = field(default_factory=SceneSection)
    data: DataSection = field(default_factory=DataSection)
    easlp: EaslpSection = field(default_factory=EaslpSection)
    dhp: DhpSection = field(default_factory=DhpSection)
    atsc: AtscSection = field(default_factory=AtscSection)
    model: ModelSection = field(default_factory=ModelSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        cfg = cls()
        _apply_mapping(cfg, data, prefix="", marks={}, source="<dict>")
        validate(cfg, "<dict>")
        return cfg

    def with_overrides(self, overrides: dict[str, Any]) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, **{
            f.name: dataclasses.replace(getattr(self, f.name))
            for f in dataclasses.fields(self) if dataclasses.is_dataclass(getattr(self, f.name))
        })
        for key, value in overrides.items():
            _set_path(cfg, key, value, source="override", line=None)
        validate(cfg, "override")
        return cfg

    @property
    def t0(self) -> float:
        return self.dhp.t0 if self.dhp.t0 is not None else 0.1 * self.epochs

    @property
    def tau_gap(self) -> float:
        return self.atsc.tau_gap if self.atsc.tau_gap is not None else self.dhp.l_min / 4.0


ABLATIONS = {
    "full": {},
    "no-easlp": {"ablation.easlp": False},
    "no-dhp": {"ablation.dhp": False},
    "no-atsc": {"ablation.atsc": False},
    "supervised": {"ablation.unlabeled": False},
}

SWEEPS = {
    "alpha-max": "dhp.alpha_max",
    "alpha-min": "dhp.alpha_min",
    "l-max": "dhp.l_max",
    "l-min": "dhp.l_min",
    "labels-per-class": "labels_per_class",
    "eps": "easlp.eps",
}


def _loc(source: str, line: int | None) -> str:
    return f"{source}:{line}" if line is not None else source


def _coerce(value: Any, annotation: str, where: str, key: str):
    ann = annotation.replace(" ", "")
    optional = "None" in ann
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{where}: '{key}' may not be null")
    base = ann.replace("|None", "")
    if base == "bool":
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: '{key}' expects true/false, got {value!r}")
    if base == "int":
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError(f"{where}: '{key}' expects an integer, got {value!r}")
    if base == "float":
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{where}: '{key}' expects a number, got {value!r}")
    if base == "str":
        if isinstance(value, str):
            return value
        raise ConfigError(f"{where}: '{key}' expects a string, got {value!r}")
    raise ConfigError(f"{where}: unsupported field type {annotation} for '{key}'")


def _set_path(cfg, dotted: str, value, source: str, line: int | None):
    parts = dotted.split(".")
    obj = cfg
    for p in parts[:-1]:
        if not hasattr(obj, p) or not dataclasses.is_dataclass(getattr(obj, p)):
            raise ConfigError(f"{_loc(source, line)}: unknown section '{p}' in '{dotted}'")
        obj = getattr(obj, p)
    name = parts[-1]
    fmap = {f.name: f for f in dataclasses.fields(obj)}
    if name not in fmap:
        raise ConfigError(f"{_loc(source, line)}: unknown key '{dotted}'")
    if dataclasses.is_dataclass(getattr(obj, name)):
        raise ConfigError(f"{_loc(source, line)}: '{dotted}' is a section, not a value")
    setattr(obj, name, _coerce(value, str(fmap[name].type), _loc(source, line), dotted))


def _apply_mapping(cfg, data: dict, prefix: str, marks: dict, source: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{_loc(source, marks.get(prefix.rstrip('.')))}: expected a mapping")
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        line = marks.get(dotted)
        target = getattr(cfg, key, None) if not prefix else None
        if not prefix and dataclasses.is_dataclass(target):
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"{_loc(source, line)}: section '{key}' must be a mapping")
            for sub, subval in value.items():
                _set_path(cfg, f"{key}.{sub}", subval, source, marks.get(f"{key}.{sub}"))
        else:
            _set_path(cfg, dotted, value, source, line)


def _key_lines(node, prefix="") -> dict[str, int]:
    out = {}
    if isinstance(node, yaml.MappingNode):
        for knode, vnode in node.value:
            dotted = f"{prefix}{knode.value}"
            out[dotted] = knode.start_mark.line + 1
            out.update(_key_lines(vnode, dotted + "."))
    return out


# cross-field constraints, each reported at the line of the named key
_CHECKS = [
    ("repeats", lambda c: c.repeats >= 1, "must be >= 1"),
    ("epochs", lambda c: c.epochs >= 1, "must be >= 1"),
    ("labels_per_class", lambda c: c.labels_per_class >= 1, "must be >= 1"),
    ("easlp.eps", lambda c: c.easlp.eps >= 1, "must be >= 1"),
    ("easlp.per_class", lambda c: c.easlp.per_class >= 1, "must be >= 1"),
    ("easlp.slic_iters", lambda c: c.easlp.slic_iters >= 1, "must be >= 1"),
    ("dhp.l_min", lambda c: 1 <= c.dhp.l_min <= c.dhp.l_max, "needs 1 <= l_min <= l_max"),
    ("dhp.alpha_max", lambda c: 0 <= c.dhp.alpha_min <= c.dhp.alpha_max <= 1,
     "needs 0 <= alpha_min <= alpha_max <= 1"),
    ("dhp.t0", lambda c: 0 <= c.t0 < c.epochs, "needs 0 <= t0 < epochs"),
    ("atsc.tau_conf", lambda c: 0 <= c.atsc.tau_conf <= 1, "must lie in [0, 1]"),
    ("atsc.tau_gap", lambda c: c.tau_gap >= 0, "must be >= 0"),
    ("atsc.momentum", lambda c: 0 <= c.atsc.momentum <= 1, "must lie in [0, 1]"),
    ("model.hidden", lambda c: c.model.hidden >= 1, "must be >= 1"),
    ("model.lr", lambda c: c.model.lr > 0, "must be > 0"),
    ("model.temperature", lambda c: c.model.temperature > 0, "must be > 0"),
    ("model.sigma_s", lambda c: c.model.sigma_s >= 0, "must be >= 0"),
    ("model.patch_size", lambda c: c.model.patch_size >= 1, "must be >= 1"),
    ("model.batch_size", lambda c: c.model.batch_size >= 1, "must be >= 1"),
    ("scene.num_classes", lambda c: c.scene.num_classes >= 2, "must be >= 2"),
    ("scene.noise_sigma", lambda c: c.scene.noise_sigma >= 0, "must be >= 0"),
    ("scene.signature_separation", lambda c: c.scene.signature_separation > 0, "must be > 0"),
    ("data.labels", lambda c: (c.data.cube is None) == (c.data.labels is None),
     "data.cube and data.labels must be given together"),
]


def validate(cfg: ExperimentConfig, source: str = "config", marks: dict | None = None) -> None:
    marks = marks or {}
    for key, check, msg in _CHECKS:
        if not check(cfg):
            raise ConfigError(f"{_loc(source, marks.get(key))}: '{key}' {msg}")


def load_config(path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Read a YAML config; ``overrides`` (dotted keys) win over file values."""
    path = Path(path)
    text = path.read_text()
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    marks = _key_lines(node) if node is not None else {}
    if isinstance(data, dict) and isinstance(data.get("config"), dict):
        # a run.json written by the CLI: the resolved config sits under "config"
        data = data["config"]
        marks = {k[len("config."):]: v for k, v in marks.items() if k.startswith("config.")}
    cfg = ExperimentConfig()
    if data is not None:
        _apply_mapping(cfg, data, "", marks, str(path))
    validate(cfg, str(path), marks)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def parse_override(text: str) -> tuple[str, Any]:
    """``'dhp.alpha_max=0.3'`` -> ``('dhp.alpha_max', 0.3)`` (value parsed as YAML)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)
