"""Run configuration: named profiles, a JSON config file and flag overrides.

Resolution order is profile defaults, then the config file, then flags.
Unknown keys are rejected at every level.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from errors import ConfigError
from generator.synthetic import SyntheticSpec
from models import ModelConfig
from objective import LossConfig
from training import TrainConfig

logger = logging.getLogger(__name__)

DEFAULT_PROFILE = "standard"

PROFILES = {
    "tiny": {
        "model": {"d": 8, "K": 2, "n_heads": 2},
        "train": {"total_steps": 50, "batch_pairs": 4, "checkpoint_every": 25},
        "synthetic": {"d": 8, "n_pairs": 40, "prompt_len": [2, 4], "response_len": [4, 8]},
    },
    "smoke": {
        "model": {"d": 16, "K": 2},
        "train": {"total_steps": 100},
        "synthetic": {"d": 16, "n_pairs": 200},
    },
    "compact": {
        "model": {"K": 2},
        "loss": {"tau_bt": 1.2, "gamma": 0.5, "lam": 0.01, "eta": 0.7},
    },
    "standard": {
        "model": {"K": 3},
        "loss": {"tau_bt": 1.3, "gamma": 0.9, "lam": 0.01, "eta": 0.7},
    },
    "wide": {
        "model": {"K": 3},
        "loss": {"tau_bt": 1.2, "gamma": 0.7, "lam": 0.003, "eta": 0.65},
    },
    "benchmark": {
        "model": {"d": 32, "K": 2},
        "train": {"total_steps": 1500},
        "synthetic": {"d": 32, "n_pairs": 2500, "response_len": [16, 36], "noise_std": 1.0,
                      "prompt_signature": 2.0,
                      "regime_strength": {"terminal": 2.5, "distributed": 5.0, "sparse": 3.0}},
        "data": {"embeddings": "data/benchmark/embeddings.adje",
                 "train": "data/benchmark/train.jsonl",
                 "test": "data/benchmark/test.jsonl", "test_pairs": 500},
    },
}

# Keys owned by the top level or by another section.
EXCLUDED = {
    "train": {"loss", "model", "seed"},
    "synthetic": {"seed", "regime", "id_offset"},
}


@dataclass
class DataConfig:
    embeddings: str = None
    train: str = None
    test: str = None
    test_pairs: int = 0


@dataclass
class RunConfig:
    """Everything a command needs, fully resolved."""

    profile: str = DEFAULT_PROFILE
    seed: int = 0
    out: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def __post_init__(self):
        self.train.loss = self.loss
        self.train.model = self.model
        self.train.seed = self.seed
        self.synthetic.seed = self.seed

    def validate(self, require_data=False):
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        self.train.validate()
        self.synthetic.validate()
        if self.synthetic.d != self.model.d:
            raise ConfigError(f"synthetic.d={self.synthetic.d} does not match model.d={self.model.d}")
        if require_data:
            for name in ("embeddings", "train"):
                if not getattr(self.data, name):
                    raise ConfigError(f"data.{name} is not set")
            for name in ("embeddings", "train", "test"):
                value = getattr(self.data, name)
                if value and not Path(value).exists():
                    raise ConfigError(f"data.{name}: no such file {value}")
        return self

    def to_dict(self):
        def section(obj, name):
            return {k: v for k, v in asdict(obj).items() if k not in EXCLUDED.get(name, ())}

        return {"profile": self.profile, "seed": self.seed, "out": self.out,
                "model": section(self.model, "model"), "loss": section(self.loss, "loss"),
                "train": section(self.train, "train"), "data": section(self.data, "data"),
                "synthetic": section(self.synthetic, "synthetic")}


SECTIONS = {"model": ModelConfig, "loss": LossConfig, "train": TrainConfig,
            "data": DataConfig, "synthetic": SyntheticSpec}
TOP_LEVEL = {"profile", "seed", "out"} | set(SECTIONS)


def merge(base, override):
    """Recursive dict merge; values in `override` win."""

    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _section(name, values):
    cls = SECTIONS[name]
    if not isinstance(values, dict):
        raise ConfigError(f"{name} must be an object, got {type(values).__name__}")
    allowed = {f.name for f in fields(cls)} - EXCLUDED.get(name, set())
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(sorted(unknown))}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def from_dict(document):
    unknown = set(document) - TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    sections = {name: _section(name, document.get(name, {})) for name in SECTIONS}
    return RunConfig(profile=document.get("profile", DEFAULT_PROFILE),
                     seed=document.get("seed", 0),
                     out=document.get("out", RunConfig.out),
                     **sections)


def read_config_file(path):
    try:
        with open(path) as f:
            document = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return document


def resolve_config(path=None, overrides=None, profile=None, default_profile=DEFAULT_PROFILE):
    """Profile defaults, then the config file at `path`, then `overrides`.

    An explicit `profile` wins over one named in the file or the overrides.
    """

    document = read_config_file(path) if path else {}
    overrides = overrides or {}
    name = profile or overrides.get("profile") or document.get("profile") or default_profile
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; expected one of {', '.join(PROFILES)}")
    resolved = merge(merge(PROFILES[name], document), overrides)
    resolved["profile"] = name
    cfg = from_dict(resolved)
    logger.debug("resolved config: %s", cfg.to_dict())
    return cfg


def write_config(cfg, out_dir):
    """Store the resolved config as <out_dir>/config.json."""

    path = Path(out_dir) / "config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2)
        f.write("\n")
    return path
