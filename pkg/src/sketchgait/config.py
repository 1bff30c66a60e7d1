"""TOML run configuration. Every key has a default; unknown keys are rejected."""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

from .descriptor import DescriptorConfig
from .edges import ExternalHookConfig
from .errors import ParameterError
from .metric import TrainConfig
from .modality import DetectorSpec


@dataclass
class DetectorSection:
    kind: str = "sobel"  # sobel | canny | external | parsing-edge | precomputed
    sigma: float = 1.4
    low: float = 0.1
    high: float = 0.3
    hook_command: str = ""
    hook_timeout: float = 60.0
    hook_send: str = "rgb"
    parsing_edge_outer: bool = True


@dataclass
class ModalitySection:
    set: str = "sketch+parsing"
    height: int = 64
    width: int = 64


@dataclass
class DescriptorSection:
    stages: int = 2
    orientations: int = 8
    levels: list = field(default_factory=lambda: [1, 2, 4, 8])
    embed_dim: int = 32
    fusion: str = "add"
    branches: list = field(default_factory=list)


@dataclass
class TrainSection:
    P: int = 8
    K: int = 3
    margin: float = 0.2
    lr: float = 0.01
    milestones: list = field(default_factory=list)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    iterations: int = 300


@dataclass
class EvalSection:
    metric: str = "euclidean"
    exclusion: str = ""
    log_matches: bool = False


SECTIONS = {
    "detector": DetectorSection,
    "modality": ModalitySection,
    "descriptor": DescriptorSection,
    "train": TrainSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    detector: DetectorSection = field(default_factory=DetectorSection)
    modality: ModalitySection = field(default_factory=ModalitySection)
    descriptor: DescriptorSection = field(default_factory=DescriptorSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def detector_spec(self) -> DetectorSpec:
        d = self.detector
        if d.kind in ("parsing-edge", "precomputed"):
            return None
        hook = None
        if d.kind == "external":
            if not d.hook_command:
                raise ParameterError("detector.hook_command is required for the external detector")
            hook = ExternalHookConfig(d.hook_command, d.hook_timeout, d.hook_send)
        return DetectorSpec(d.kind, d.sigma, d.low, d.high, hook)

    def descriptor_config(self) -> DescriptorConfig:
        d = self.descriptor
        return DescriptorConfig(
            modality_set=self.modality.set,
            branches=tuple(d.branches) or None,
            stages=d.stages,
            orientations=d.orientations,
            levels=tuple(d.levels),
            embed_dim=d.embed_dim,
            fusion=d.fusion,
        )

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            P=t.P, K=t.K, margin=t.margin, lr=t.lr,
            milestones=tuple(t.milestones) or None,
            momentum=t.momentum, weight_decay=t.weight_decay,
            iterations=t.iterations, seed=self.seed, embed_dim=self.descriptor.embed_dim,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(section: str, name: str, default, value):
    where = f"{section}.{name}" if section else name
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ParameterError(f"{where} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ParameterError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ParameterError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ParameterError(f"{where} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ParameterError(f"{where} must be a list")
        return value
    return value


def from_dict(raw: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in raw.items():
        if key == "seed":
            cfg.seed = _coerce("", "seed", 0, value)
            continue
        if key not in SECTIONS:
            raise ParameterError(f"unknown config key {key!r}")
        if not isinstance(value, dict):
            raise ParameterError(f"[{key}] must be a table")
        section = getattr(cfg, key)
        known = {f.name for f in fields(section)}
        for name, v in value.items():
            if name not in known:
                raise ParameterError(f"unknown config key {key}.{name}")
            setattr(section, name, _coerce(key, name, getattr(section, name), v))
    # validate eagerly so bad values fail before any stage runs
    cfg.descriptor_config()
    cfg.train_config()
    if cfg.detector.kind not in ("parsing-edge", "precomputed"):
        cfg.detector_spec()
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = tomli.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ParameterError(f"config file {path} not found") from exc
    except tomli.TOMLDecodeError as exc:
        raise ParameterError(f"config file {path}: {exc}") from exc
    return from_dict(raw)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v)} to TOML")


def dump_config(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    lines = [f"seed = {d.pop('seed')}"]
    for section, values in d.items():
        lines.append(f"\n[{section}]")
        lines += [f"{k} = {_toml_value(v)}" for k, v in values.items()]
    return "\n".join(lines) + "\n"
