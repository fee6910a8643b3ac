"""Configuration: one JSON file, documented defaults, dotted --set overrides.

Every stage (cpc / mmmae / finetune / joint) trains under a StageConfig view
of the root Config; its canonical hash is stored in checkpoints so evaluation
can refuse weights trained under a different configuration.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .seeding import derive_seed


class ConfigError(ValueError):
    """Bad configuration file or override (CLI exit code 2)."""


MODEL_PRESETS = {
    # dim must be divisible by heads and by 4 (positional table constraint)
    "vit-tiny-desk": dict(dim=64, depth=4, heads=4, mlp_ratio=4.0, patch_size=16,
                          decoder_dim=128, decoder_depth=2, decoder_heads=4),
    "vit-s": dict(dim=384, depth=12, heads=6, mlp_ratio=4.0, patch_size=16,
                  decoder_dim=512, decoder_depth=8, decoder_heads=16),
    "vit-b": dict(dim=768, depth=12, heads=12, mlp_ratio=4.0, patch_size=16,
                  decoder_dim=512, decoder_depth=8, decoder_heads=16),
}


@dataclass
class ModelConfig:
    preset: str = "vit-tiny-desk"
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    patch_size: int = 16
    decoder_dim: int = 128
    decoder_depth: int = 2
    decoder_heads: int = 4
    drop_path: float = 0.1      # fine-tuning only; pre-training runs at 0
    cpc_head: bool = False      # optional MLP head on contrastive features

    def validate(self):
        if self.dim % self.heads != 0:
            raise ConfigError(f"model.dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 4 != 0 or self.decoder_dim % 4 != 0:
            raise ConfigError("model dims must be divisible by 4 (positional table)")
        if self.decoder_dim % self.decoder_heads != 0:
            raise ConfigError("model.decoder_dim not divisible by decoder_heads")
        if self.patch_size <= 0:
            raise ConfigError("model.patch_size must be positive")


@dataclass
class SyntheticConfig:
    num_classes: int = 10
    canvas: int = 64            # square side in pixels; multiple of patch size
    shapes_min: int = 2
    shapes_max: int = 5
    seed: int = 0
    noise_std: float = 0.02

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("synthetic.num_classes must be >= 2")
        if not (1 <= self.shapes_min <= self.shapes_max):
            raise ConfigError("synthetic shape count range invalid")
        if self.noise_std < 0:
            raise ConfigError("synthetic.noise_std must be >= 0")


@dataclass
class AugmentConfig:
    # pre-training geometry (crop + flip); fine-tuning adds mixing/erasing
    crop_scale_min: float = 0.5
    crop_scale_max: float = 1.0
    flip_p: float = 0.5

    def validate(self):
        if not (0.0 < self.crop_scale_min <= self.crop_scale_max <= 1.0):
            raise ConfigError("augment crop scale range invalid")
        if not (0.0 <= self.flip_p <= 1.0):
            raise ConfigError("augment.flip_p must be in [0,1]")


@dataclass
class DataConfig:
    source: str = "synthetic"           # synthetic | manifest
    root: str = ""                      # manifest dir; COMAE_DATA_DIR wins if set
    resolution: int = 64                # model input side (224 for real data)
    train_count: int = 512
    test_count: int = 128
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self):
        if self.source not in ("synthetic", "manifest"):
            raise ConfigError(f"data.source must be synthetic|manifest, got {self.source!r}")
        if self.resolution <= 0:
            raise ConfigError("data.resolution must be positive")
        self.synthetic.validate()
        self.augment.validate()

    def resolved_root(self) -> str:
        return os.environ.get("COMAE_DATA_DIR", "") or self.root


@dataclass
class MaskConfig:
    ratio: float = 0.75
    strategy: str = "independent"       # independent | consistent

    def validate(self):
        if not (0.0 <= self.ratio < 1.0):
            raise ConfigError("mask.ratio must be in [0,1)")
        if self.strategy not in ("independent", "consistent"):
            raise ConfigError(f"mask.strategy must be independent|consistent, got {self.strategy!r}")


@dataclass
class CPCStageConfig:
    temperature: float = 0.07
    epochs: int = 75
    base_lr: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_epochs: int = 5
    min_lr: float = 1e-6
    checkpoint_every: int = 25

    def validate(self):
        if self.temperature <= 0:
            raise ConfigError("cpc.temperature must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("cpc epochs/batch_size must be >= 1")


@dataclass
class MMMAEStageConfig:
    epochs: int = 200                   # 1200 at full scale
    base_lr: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_epochs: int = 10
    min_lr: float = 1e-6
    norm_eps: float = 1e-6              # per-patch target normalization epsilon
    checkpoint_every: int = 50

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("mmmae epochs/batch_size must be >= 1")
        if self.norm_eps <= 0:
            raise ConfigError("mmmae.norm_eps must be > 0")


@dataclass
class FinetuneStageConfig:
    epochs: int = 100
    base_lr: float = 5e-4
    batch_size: int = 64                # 768 at full scale
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_epochs: int = 5
    min_lr: float = 1e-6
    layer_decay: float = 0.65
    modality: str = "both"              # both | rgb | depth (unimodal baselines)
    modality_drop_p: float = 0.5
    label_smoothing: float = 0.1        # applied only when mixing is disabled
    mixup_alpha: float = 0.8
    cutmix_alpha: float = 1.0
    erase_prob: float = 0.25
    checkpoint_every: int = 50

    def validate(self):
        if not (0.0 < self.layer_decay <= 1.0):
            raise ConfigError("finetune.layer_decay must be in (0,1]")
        if self.modality not in ("both", "rgb", "depth"):
            raise ConfigError("finetune.modality must be both|rgb|depth")
        if not (0.0 <= self.modality_drop_p <= 1.0):
            raise ConfigError("finetune.modality_drop_p must be in [0,1]")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ConfigError("finetune optimizer fields must be positive")


@dataclass
class Config:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    cpc: CPCStageConfig = field(default_factory=CPCStageConfig)
    mmmae: MMMAEStageConfig = field(default_factory=MMMAEStageConfig)
    finetune: FinetuneStageConfig = field(default_factory=FinetuneStageConfig)

    def validate(self) -> "Config":
        for section in (self.data, self.model, self.mask, self.cpc, self.mmmae, self.finetune):
            section.validate()
        if self.data.resolution % self.model.patch_size != 0:
            raise ConfigError(
                f"data.resolution {self.data.resolution} not divisible by "
                f"model.patch_size {self.model.patch_size}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)

    def stage_dict(self, stage: str) -> dict:
        """Canonical per-stage record; basis of the checkpoint config hash.

        Filesystem paths (data.root) are excluded so moving a dataset does not
        invalidate checkpoints trained on identical data.
        """
        if stage not in ("cpc", "mmmae", "finetune", "joint"):
            raise ConfigError(f"unknown stage {stage!r}")
        data = asdict(self.data)
        data.pop("root")
        record = {
            "stage": stage,
            "seed": self.seed,
            "data": data,
            "model": asdict(self.model),
            "mask": asdict(self.mask),
        }
        if stage in ("cpc", "joint"):
            record["cpc"] = asdict(self.cpc)
        if stage in ("mmmae", "joint"):
            record["mmmae"] = asdict(self.mmmae)
        if stage == "finetune":
            record["finetune"] = asdict(self.finetune)
        return record

    def stage_hash(self, stage: str) -> str:
        return hash_config(self.stage_dict(stage))


def hash_config(record: dict) -> str:
    return hashlib.sha256(canonical_json(record).encode("utf-8")).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _build_section(cls, raw: dict, path: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key {path}{key!r}")
        ftype = known[key].type
        if isinstance(value, dict):
            sub_cls = {"synthetic": SyntheticConfig, "augment": AugmentConfig,
                       "data": DataConfig, "model": ModelConfig, "mask": MaskConfig,
                       "cpc": CPCStageConfig, "mmmae": MMMAEStageConfig,
                       "finetune": FinetuneStageConfig}.get(key)
            if sub_cls is None:
                raise ConfigError(f"config key {path}{key!r} does not take a mapping")
            kwargs[key] = _build_section(sub_cls, value, f"{path}{key}.")
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(raw: dict) -> Config:
    raw = copy.deepcopy(raw)
    model_raw = raw.get("model", {})
    preset = model_raw.get("preset", ModelConfig.preset)
    if preset not in MODEL_PRESETS:
        raise ConfigError(f"unknown model.preset {preset!r}; choose from {sorted(MODEL_PRESETS)}")
    raw["model"] = {"preset": preset, **MODEL_PRESETS[preset], **{k: v for k, v in model_raw.items() if k != "preset"}}
    try:
        cfg = _build_section(Config, raw, "")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> Config:
    """Load config JSON (or defaults when path is None) and apply
    `key.path=value` overrides in order. Values parse as JSON, falling back
    to bare strings."""
    if path is None:
        raw: dict = {}
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key.path=value, got {item!r}")
        key, _, text = item.partition("=")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {key!r} crosses a non-mapping value")
        node[parts[-1]] = value
    return config_from_dict(raw)
