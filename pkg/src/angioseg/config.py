"""Pipeline configuration: one TOML file, one section per module.

Every key is optional. Unknown sections or keys are rejected so typos do
not silently fall back to defaults. :func:`dump_config` writes the fully
resolved configuration back as TOML; reading that echo gives the same
:class:`PipelineConfig`.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .labelgen import LabelConfig
from .morphology import MorphologyConfig
from .nnet import DESK, PAPER, UNetConfig
from .optflow import FlowConfig
from .synth import SynthConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


PRESETS = {"desk": DESK, "paper": PAPER}


@dataclass(frozen=True)
class DataSection:
    count: int = 17
    test: int = 5  # the last ``test`` sequences form the test split
    finetune: int = 4  # ground-truth-labelled sequences just before the test split

    def __post_init__(self):
        if min(self.count, self.test, self.finetune) < 0:
            raise ValueError("sequence counts must be >= 0")


@dataclass(frozen=True)
class NetSection:
    preset: str = "desk"
    input_size: int | None = None
    levels: int | None = None
    convs_per_level: int | None = None
    base_features: int | None = None

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")

    def unet(self, out_classes: int = 3) -> UNetConfig:
        base = PRESETS[self.preset]
        over = {k: getattr(self, k) for k in
                ("input_size", "levels", "convs_per_level", "base_features")
                if getattr(self, k) is not None}
        return dataclasses.replace(base, out_classes=out_classes, **over)


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 20
    siamese_epochs: int | None = None  # None -> epochs
    finetune_epochs: int = 2
    batch_size: int = 4
    learning_rate: float = 1e-3
    finetune_learning_rate: float = 1e-4
    lr_schedule: str = "cosine"
    dt_range: tuple[int, ...] = (1, 2, 3)
    max_pairs: int | None = None
    rotation_range: float = 45.0
    translation_range: int = 10
    augment_copies: int = 10
    warm_start: bool = True

    def __post_init__(self):
        if not self.dt_range or min(self.dt_range) < 1:
            raise ValueError("dt_range must hold positive frame offsets")

    def stage_config(self, stage: str, seed: int, augmentation: str = "none") -> TrainConfig:
        if stage == "siamese":
            epochs = self.siamese_epochs or self.epochs
        elif stage == "finetune":
            epochs = self.finetune_epochs
            if augmentation == "none":
                # same number of updates as an augmented run
                epochs *= self.augment_copies
        else:
            epochs = self.epochs
        lr = self.finetune_learning_rate if stage == "finetune" else self.learning_rate
        return TrainConfig(stage="multiclass" if stage == "finetune" else stage,
                           epochs=epochs, batch_size=self.batch_size, learning_rate=lr, seed=seed,
                           dt_range=tuple(self.dt_range), augmentation=augmentation,
                           rotation_range=self.rotation_range,
                           translation_range=self.translation_range,
                           augment_copies=self.augment_copies, warm_start=self.warm_start,
                           lr_schedule=self.lr_schedule)


@dataclass(frozen=True)
class LabelSection:
    reference: str = "second"
    auto_tolerance: float = 0.2
    halo: int = 3
    chain_flow: bool = False
    mask_source: str = "refined"

    def __post_init__(self):
        if self.reference not in ("second", "auto"):
            raise ValueError("reference must be 'second' or 'auto'")
        if self.mask_source not in ("refined", "raw"):
            raise ValueError("mask_source must be 'refined' or 'raw'")


@dataclass(frozen=True)
class EvalSection:
    variants: tuple[str, ...] = ()  # empty -> every variant with the artifacts it needs
    min_area: int | None = None
    connectivity: int = 8


@dataclass(frozen=True)
class BenchSection:
    frames: int = 32
    repetitions: int = 5
    warmup: int = 3
    threads: int = 0  # multi-thread run; 0 -> library default

    def __post_init__(self):
        if self.frames < 1 or self.repetitions < 1 or self.warmup < 0:
            raise ValueError("bench needs >= 1 frame and repetition")


SECTIONS = {
    "data": DataSection,
    "synth": SynthConfig,
    "morphology": MorphologyConfig,
    "flow": FlowConfig,
    "net": NetSection,
    "train": TrainSection,
    "labelgen": LabelSection,
    "eval": EvalSection,
    "bench": BenchSection,
}


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    deterministic: bool = False
    data: DataSection = field(default_factory=DataSection)
    synth: SynthConfig = field(default_factory=SynthConfig)
    morphology: MorphologyConfig = field(default_factory=MorphologyConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    net: NetSection = field(default_factory=NetSection)
    train: TrainSection = field(default_factory=TrainSection)
    labelgen: LabelSection = field(default_factory=LabelSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def label_config(self) -> LabelConfig:
        lg = self.labelgen
        return LabelConfig(reference=lg.reference, auto_tolerance=lg.auto_tolerance,
                           halo=lg.halo, chain_flow=lg.chain_flow, mask_source=lg.mask_source,
                           morphology=self.morphology, flow=self.flow)

    def with_(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)


def _coerce(cls, name, value):
    """Match TOML values to the declared field type (lists become tuples)."""
    ftype = {f.name: f.type for f in dataclasses.fields(cls)}[name]
    if isinstance(value, list):
        return tuple(value)
    if isinstance(value, int) and not isinstance(value, bool) and "float" in str(ftype) \
            and "int" not in str(ftype):
        return float(value)
    return value


def _build(cls, table: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    try:
        return cls(**{k: _coerce(cls, k, v) for k, v in table.items()})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{where}]: {e}") from None


def config_from_dict(doc: dict) -> PipelineConfig:
    top = {}
    sections = {}
    for key, value in doc.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            sections[key] = _build(SECTIONS[key], value, key)
        elif key in ("seed", "deterministic"):
            top[key] = value
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    if "seed" in top and (not isinstance(top["seed"], int) or top["seed"] < 0):
        raise ConfigError("seed must be a non-negative integer")
    return PipelineConfig(**top, **sections)


def parse_config(text: str) -> PipelineConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML: {e}") from None
    return config_from_dict(doc)


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return parse_config(Path(path).read_text())


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {v!r} as TOML")


def dump_config(cfg: PipelineConfig) -> str:
    """Resolved configuration as TOML. Unset optional keys appear as comments."""
    lines = [f"seed = {cfg.seed}", f"deterministic = {_toml_value(cfg.deterministic)}"]
    for name in SECTIONS:
        lines += ["", f"[{name}]"]
        section = getattr(cfg, name)
        for f in dataclasses.fields(section):
            v = getattr(section, f.name)
            lines.append(f"# {f.name} unset" if v is None else f"{f.name} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"
