"""Run configuration: a strict, versioned key-value document.

Unknown keys are errors (fail-closed reproducibility) and every artifact is
stamped with the sha256 hash of the canonicalized document.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .chain import ChainConfig
from .errors import ConfigError
from .models import ModelConfig
from .world import VOCAB_SIZE, PartitionSpec, WorldConfig

SCHEMA_VERSION = 1


@dataclass
class ModelSection:
    hidden: int = 32
    spk_dim: int = 8
    patch: int = 4
    init_scale: float = 0.08
    init_scale_inner: float = 0.5
    stop_pos_weight: float = 5.0


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    precision: str = "float64"
    world: WorldConfig = field(default_factory=WorldConfig)
    partitions: PartitionSpec = field(default_factory=PartitionSpec)
    model: ModelSection = field(default_factory=ModelSection)
    chain: ChainConfig = field(default_factory=ChainConfig)

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(
                f"unsupported schema_version {self.schema_version}; this build reads {SCHEMA_VERSION}"
            )
        if self.precision != "float64":
            raise ConfigError("only precision='float64' is supported; acceptance runs are 64-bit")
        try:
            self.world.validate()
            self.chain.validate()
        except Exception as e:
            raise ConfigError(str(e)) from e
        if self.partitions.total_scenes() <= 0:
            raise ConfigError("partitions must request at least one scene")
        for f in ("paired", "unpaired", "speech_only", "image_only", "dev", "test"):
            if getattr(self.partitions, f) < 0:
                raise ConfigError(f"partition count {f} must be >= 0")
        if self.model.hidden < 1 or self.model.spk_dim < 1:
            raise ConfigError("model dims must be positive")
        if self.world.image_size % self.model.patch != 0:
            raise ConfigError("image_size must be divisible by model.patch")

    def canonical_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "precision": self.precision,
            "world": dataclasses.asdict(self.world),
            "partitions": dataclasses.asdict(self.partitions),
            "model": dataclasses.asdict(self.model),
            "chain": dataclasses.asdict(self.chain),
        }

    def config_hash(self) -> str:
        raw = json.dumps(self.canonical_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()[:16]

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            hidden=self.model.hidden,
            spk_dim=self.model.spk_dim,
            vocab=VOCAB_SIZE,
            frame_dim=self.world.frame_dim,
            image_size=self.world.image_size,
            image_channels=self.world.image_channels,
            patch=self.model.patch,
            max_text_len=self.world.max_text_len,
            max_frames=self.world.max_frames,
            beam=self.chain.beam,
            num_speakers=self.world.num_speakers,
            fused_loss_variant=self.chain.fused_loss_variant,
            stop_pos_weight=self.model.stop_pos_weight,
            init_scale=self.model.init_scale,
            init_scale_inner=self.model.init_scale_inner,
        )


_SECTION_TYPES = {
    "world": WorldConfig,
    "partitions": PartitionSpec,
    "model": ModelSection,
    "chain": ChainConfig,
}


def _build_section(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = dict(data)
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from e


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    known = {"schema_version", "seed", "precision", "world", "partitions", "model", "chain"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    cfg = RunConfig(
        schema_version=data.get("schema_version", SCHEMA_VERSION),
        seed=int(data.get("seed", 0)),
        precision=data.get("precision", "float64"),
    )
    for name, cls in _SECTION_TYPES.items():
        if name in data:
            setattr(cfg, name, _build_section(cls, data[name], name))
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return config_from_dict(data)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(
        json.dumps(cfg.canonical_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def toy_config(seed: int = 0) -> RunConfig:
    cfg = RunConfig(seed=seed)
    cfg.validate()
    return cfg


def paper_scale_config(seed: int = 0) -> RunConfig:
    """Partition counts and model surface matching the source experiment scale.

    Desk-scale acceptance does not run this preset; it exists so the data
    generator can emit the full-size partition manifest.
    """
    cfg = RunConfig(
        seed=seed,
        world=WorldConfig(
            num_classes=16,
            num_attrs=8,
            grid=8,
            image_size=128,
            image_channels=3,
            utterances_per_scene=5,
            captions_per_scene=5,
            max_frames=96,
        ),
        partitions=PartitionSpec(
            paired=800, unpaired=1500, speech_only=1850, image_only=1850, dev=1000, test=1000
        ),
        model=ModelSection(hidden=32, spk_dim=64, patch=16),
    )
    cfg.validate()
    return cfg
