"""Pipeline configuration stored as TOML."""

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomlkit

from .losses import LossWeights
from .validation import ContractError

SEED_ENV = "HANDLEFORGE_SEED"


@dataclass
class Paths:
    mesh: str = None
    rig: str = None
    predictor_checkpoint: str = "predictor.ckpt"
    diffusion_checkpoint: str = "diffusion.ckpt"
    output_dir: str = "out"


@dataclass
class ModelConfig:
    n_handles: int = 30
    T: int = 1000
    max_frames: int = 196
    schedule: str = "cosine"
    width: int = 128
    n_layers: int = 2
    hidden: int = 64


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    predictor_steps: int = 1000
    predictor_batch: int = 4
    pose_warmup: int = 0
    diffusion_steps: int = 5000
    finetune_steps: int = 200
    finetune_lr: float = 1e-3
    arap_steps: int = 300
    n_characters: int = 4
    n_sequences: int = 2
    n_frames: int = 16


@dataclass
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    @property
    def effective_seed(self):
        """``HANDLEFORGE_SEED`` when set, otherwise the configured seed."""
        raw = os.environ.get(SEED_ENV)
        if raw is None or raw == "":
            return self.seed
        try:
            return int(raw)
        except ValueError:
            raise ContractError(f"{SEED_ENV}={raw!r} is not an integer") from None

    def to_toml(self):
        doc = tomlkit.document()
        doc["seed"] = self.seed
        for name in ("paths", "model", "train", "losses"):
            table = tomlkit.table()
            for k, v in asdict(getattr(self, name)).items():
                if v is not None:  # TOML has no null; absent means default
                    table[k] = v
            doc[name] = table
        return tomlkit.dumps(doc)

    @classmethod
    def from_toml(cls, text):
        data = tomlkit.parse(text).unwrap()
        sections = {"paths": Paths, "model": ModelConfig, "train": TrainConfig,
                    "losses": LossWeights}
        unknown = set(data) - set(sections) - {"seed"}
        if unknown:
            raise ContractError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {"seed": int(data.get("seed", 0))}
        for name, kind in sections.items():
            values = data.get(name, {})
            allowed = {f.name: f.type for f in fields(kind)}
            bad = set(values) - set(allowed)
            if bad:
                raise ContractError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs[name] = kind(**values)
        return cls(**kwargs)

    def save(self, path):
        Path(path).write_text(self.to_toml())

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise ContractError(f"config file {path} does not exist")
        cfg = cls.from_toml(path.read_text())
        base = path.parent
        for f in fields(Paths):
            v = getattr(cfg.paths, f.name)
            if v is not None and not Path(v).is_absolute():
                setattr(cfg.paths, f.name, str(base / v))
        return cfg

    def require(self, *names):
        """Raise unless each named path is set and exists."""
        for name in names:
            v = getattr(self.paths, name)
            if v is None or not Path(v).exists():
                raise ContractError(f"paths.{name} = {v!r} does not exist")
