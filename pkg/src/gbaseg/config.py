"""Pipeline configuration: one TOML file, validated against a JSON schema."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema

from .errors import ConfigError

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib


@dataclass
class PhantomStage:
    """Benchmark generation, used when ``paths.data`` does not exist yet."""

    n_source: int = 30
    n_target: int = 20
    n_val: int = 6
    n_test: int = 20
    frac_b: float = 0.5
    shape: list = field(default_factory=lambda: [56, 56, 20])
    spacing: list = field(default_factory=lambda: [1.0, 1.0, 2.0])
    fmt: str = "nifti"


@dataclass
class PreprocessStage:
    spacing: list = field(default_factory=lambda: [1.0, 1.0, 2.0])
    crop_xy: int = 48
    percentile: float = 75.0


@dataclass
class I2IStage:
    centers: str = "A"
    epochs: int = 30
    lr: float = 2e-4
    batch_size: int = 8
    mu_cyc: float = 10.0
    ngf: int = 16
    ndf: int = 16
    n_blocks: int = 2


@dataclass
class TranslateStage:
    deconvolve: bool = True
    psf_sigma_mm: list = field(default_factory=lambda: [1.0, 1.0, 2.5])
    iterations: int = 15
    relaxation: float = 1.0


@dataclass
class SinGANStage:
    steps_per_scale: int = 150
    nfc: int = 16
    lr: float = 5e-4
    min_size: int = 25
    r: float | None = None


@dataclass
class GBAStage:
    method: str = "gba"
    rules: str | None = None
    dilation_radius: int = 3
    sigma_xy: float = 2.0


@dataclass
class SelfTrainStage:
    max_iters: int = 3
    eps: float = 0.003
    failure_gate: float = 0.4
    folds: int = 2
    epochs: int = 6
    iter_epochs: int | None = None
    final_epochs: int | None = None
    iters_per_epoch: int = 25
    batch_size: int = 16
    lr: float = 1e-2
    base: int = 8
    dims: int = 2


@dataclass
class EvaluateStage:
    threshold: float = 0.5
    all_iterations: bool = True


@dataclass
class Paths:
    data: str = "data"
    out: str = "runs/default"


@dataclass
class PipelineConfig:
    seed: int = 0
    fmt: str = "nifti"
    paths: Paths = field(default_factory=Paths)
    phantom: PhantomStage = field(default_factory=PhantomStage)
    preprocess: PreprocessStage = field(default_factory=PreprocessStage)
    i2i: I2IStage = field(default_factory=I2IStage)
    translate: TranslateStage = field(default_factory=TranslateStage)
    singan: SinGANStage = field(default_factory=SinGANStage)
    gba: GBAStage = field(default_factory=GBAStage)
    selftrain: SelfTrainStage = field(default_factory=SelfTrainStage)
    evaluate: EvaluateStage = field(default_factory=EvaluateStage)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **sections) -> "PipelineConfig":
        """Copy with some section fields overridden: ``replace(gba={"method": "naive"})``."""
        d = self.to_dict()
        for name, value in sections.items():
            if isinstance(value, dict):
                d[name].update(value)
            else:
                d[name] = value
        return from_dict(d)


_SECTIONS = {
    "paths": Paths,
    "phantom": PhantomStage,
    "preprocess": PreprocessStage,
    "i2i": I2IStage,
    "translate": TranslateStage,
    "singan": SinGANStage,
    "gba": GBAStage,
    "selftrain": SelfTrainStage,
    "evaluate": EvaluateStage,
}

_num = {"type": "number"}
_int = {"type": "integer"}
_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}
_triple = {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 3, "maxItems": 3}
_opt_int = {"type": ["integer", "null"], "minimum": 0}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": _nonneg_int,
        "fmt": {"enum": ["nifti", "raw"]},
        "paths": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"data": {"type": "string"}, "out": {"type": "string"}},
        },
        "phantom": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_source": _pos_int,
                "n_target": _pos_int,
                "n_val": _nonneg_int,
                "n_test": _nonneg_int,
                "frac_b": {"type": "number", "minimum": 0, "maximum": 1},
                "shape": {"type": "array", "items": _pos_int, "minItems": 3, "maxItems": 3},
                "spacing": _triple,
                "fmt": {"enum": ["nifti", "raw"]},
            },
        },
        "preprocess": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "spacing": _triple,
                "crop_xy": {"type": "integer", "minimum": 8},
                "percentile": {"type": "number", "minimum": 0, "maximum": 100},
            },
        },
        "i2i": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "centers": {"enum": ["A", "B", "both"]},
                "epochs": _nonneg_int,
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": _pos_int,
                "mu_cyc": {"type": "number", "minimum": 0},
                "ngf": _pos_int,
                "ndf": _pos_int,
                "n_blocks": _nonneg_int,
            },
        },
        "translate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "deconvolve": {"type": "boolean"},
                "psf_sigma_mm": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3},
                "iterations": _nonneg_int,
                "relaxation": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "singan": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps_per_scale": _pos_int,
                "nfc": _pos_int,
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "min_size": {"type": "integer", "minimum": 4},
                "r": {"type": ["number", "null"], "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "gba": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "method": {"enum": ["none", "naive", "gba"]},
                "rules": {"type": ["string", "null"]},
                "dilation_radius": _nonneg_int,
                "sigma_xy": {"type": "number", "minimum": 0},
            },
        },
        "selftrain": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "max_iters": _nonneg_int,
                "eps": {"type": "number", "minimum": 0},
                "failure_gate": _num,
                "folds": _pos_int,
                "epochs": _nonneg_int,
                "iter_epochs": _opt_int,
                "final_epochs": _opt_int,
                "iters_per_epoch": _pos_int,
                "batch_size": _pos_int,
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "base": _pos_int,
                "dims": {"enum": [2, 3]},
            },
        },
        "evaluate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "all_iterations": {"type": "boolean"},
            },
        },
    },
}


def validate(d: dict) -> None:
    try:
        jsonschema.validate(d, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {e.message}") from None


def from_dict(d: dict) -> PipelineConfig:
    d = copy.deepcopy(d)
    validate(d)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in d:
            kwargs[name] = cls(**d.pop(name))
    return PipelineConfig(**kwargs, **d)


def load_config(path=None, seed: int | None = None, out: str | None = None, check_paths: bool = False) -> PipelineConfig:
    """Read and validate a TOML config; CLI flags override the file."""
    d = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            d = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from None
    cfg = from_dict(d)
    if seed is not None:
        cfg.seed = int(seed)
    if out is not None:
        cfg.paths.out = str(out)
    if cfg.gba.rules is not None and not Path(cfg.gba.rules).exists():
        raise ConfigError(f"rules file {cfg.gba.rules} does not exist")
    if check_paths and not Path(cfg.paths.data).exists():
        raise ConfigError(f"data directory {cfg.paths.data} does not exist")
    return cfg


def section_names() -> list[str]:
    return [f.name for f in fields(PipelineConfig)]
