"""Experiment configuration: one JSON/TOML document drives every command.

The config hash (sha256 of the canonical JSON, excluding the output
directory) is embedded in every artifact so stages can refuse mismatched
inputs. Dotted-key overrides permit ad-hoc variation without editing the
file.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .distill import DistillConfig
from .segment import DEFAULT_HU_THRESHOLDS


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleParams:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class TrainParams:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    widths: tuple = (32, 64, 128)
    corpus_patches: int = 256
    log_every: int = 10


@dataclass
class GenerateParams:
    steps: int = 250
    shape: tuple = (32, 32, 32)
    count: int = 2
    solver_order: int = 2


def _default_thresholds():
    return {lab.name: list(iv) for lab, iv in DEFAULT_HU_THRESHOLDS.items()}


@dataclass
class ExperimentConfig:
    out_dir: str = "runs/exp"
    seed: int = 0
    threads: int = 1

    # data
    volume_path: str = ""
    labels_path: str = ""
    phantom: dict = None

    # HU handling
    window: tuple = (-1024.0, 600.0)
    eight_bit: bool = False

    # patches & features
    patch_side: int = 32
    grid_stride: int = 16
    timesteps: tuple = (50, 100, 150, 200)
    extraction_mode: str = "forward"

    # clustering & refinement
    n_clusters: int = 5
    hu_thresholds: dict = field(default_factory=_default_thresholds)
    alpha_s: float = 2.0
    sobel_sigma: float = 1.5
    compat_margin: float = 25.0
    fusion: bool = True
    hu_filter: bool = True

    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    train: TrainParams = field(default_factory=TrainParams)
    distill: DistillConfig = field(default_factory=DistillConfig)
    generate: GenerateParams = field(default_factory=GenerateParams)

    # Derived sub-seeds, one namespace per consumer.
    @property
    def corpus_seed(self):
        return self.seed + 1000

    @property
    def gmm_seed(self):
        return self.seed + 2000

    @property
    def noise_seed(self):
        return self.seed + 3000

    @property
    def generate_seed(self):
        return self.seed + 4000


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)

    def listify(x):
        if isinstance(x, tuple):
            return [listify(v) for v in x]
        if isinstance(x, list):
            return [listify(v) for v in x]
        if isinstance(x, dict):
            return {k: listify(v) for k, v in x.items()}
        return x

    return listify(d)


def _build(dc_type, data: dict):
    known = {f.name: f for f in fields(dc_type)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r} for {dc_type.__name__}")
        kwargs[key] = value
    return dc_type(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    nested = {
        "schedule": ScheduleParams,
        "train": TrainParams,
        "distill": DistillConfig,
        "generate": GenerateParams,
    }
    for key, typ in nested.items():
        if key in data and isinstance(data[key], dict):
            data[key] = _build(typ, data[key])
    cfg = _build(ExperimentConfig, data)

    # Normalize list-typed fields back to tuples for hashing stability.
    cfg.window = tuple(cfg.window)
    cfg.timesteps = tuple(cfg.timesteps)
    cfg.train.widths = tuple(cfg.train.widths)
    cfg.generate.shape = tuple(cfg.generate.shape)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    text = path.read_text()
    if path.suffix in (".toml", ".tml"):
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        data = tomllib.loads(text)
    else:
        data = json.loads(text)
    return config_from_dict(data)


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Dotted-key overrides like train.steps=400 or fusion=false."""
    data = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config section {part!r} in {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return config_from_dict(data)


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of everything that affects results (out_dir excluded)."""
    d = config_to_dict(cfg)
    d.pop("out_dir", None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_config(cfg: ExperimentConfig, path):
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")
