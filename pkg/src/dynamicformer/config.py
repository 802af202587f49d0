"""Model and training configuration plus the flat key=value config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

COMPOSITION_VARIANTS = ("baseline", "spatial_only", "sum", "unembed", "full")
INTERACTION_VARIANTS = ("none_ball", "none_trans", "erase", "full")
INTEGRATION_ORDERS = ("linear", "parallel", "hierarchical")


@dataclass
class ModelConfig:
    d_model: int = 256
    num_frames: int = 10
    raw_dim: int = 11
    num_joints: int = 17
    max_persons: int = 12
    max_objects: int = 1
    num_subgroups: int = 2
    dcm_layers: int = 3
    heads: int = 8
    ffn_dim: int = 1024
    dropout: float = 0.3
    integration_layers: int = 1
    num_group_classes: int = 8
    num_indiv_classes: int = 9
    # fixed input scaling of raw pixel channels before the first projection
    position_scale: float = 1e-2
    offset_scale: float = 1e-1
    velocity_scale: float = 1e-1
    composition: str = "full"
    interaction: str = "full"
    integration: str = "hierarchical"
    # "value": residual on the projected value; "input": conventional x + attn(x)
    residual: str = "value"
    layer_norm: bool = True
    reinject_embeddings: bool = True
    adjacency_tokens: str = "frame"

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.composition not in COMPOSITION_VARIANTS:
            raise ValueError(f"unknown composition variant {self.composition!r}")
        if self.interaction not in INTERACTION_VARIANTS:
            raise ValueError(f"unknown interaction variant {self.interaction!r}")
        if self.integration not in INTEGRATION_ORDERS:
            raise ValueError(f"unknown integration order {self.integration!r}")
        if self.residual not in ("value", "input"):
            raise ValueError(f"unknown residual mode {self.residual!r}")
        if self.adjacency_tokens not in ("frame", "row"):
            raise ValueError(f"unknown adjacency tokenization {self.adjacency_tokens!r}")
        if self.dcm_layers < 1 or self.integration_layers < 1:
            raise ValueError("layer counts must be >= 1")

    @classmethod
    def volleyball(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def collective(cls, **kw) -> "ModelConfig":
        kw = {"max_persons": 13, "max_objects": 0, "num_group_classes": 5,
              "num_indiv_classes": 0, "interaction": "none_ball", **kw}
        return cls(**kw)

    @classmethod
    def micro(cls, **kw) -> "ModelConfig":
        """Desk-scale preset used by the synthetic benchmark."""
        kw = {"d_model": 64, "heads": 4, "ffn_dim": 128, "dropout": 0.3,
              "max_persons": 6, "dcm_layers": 2, "num_group_classes": 3,
              "num_indiv_classes": 4, **kw}
        return cls(**kw)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    indiv_weight: float = 1.0
    precision: str = "float32"
    keep_epoch_checkpoints: bool = False
    # "cosine" anneals lr to zero over the run; "constant" keeps it fixed
    lr_schedule: str = "cosine"
    # max global gradient norm, 0 disables clipping
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be nonnegative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        """Full-scale regime: batch 384, 60 epochs, fixed lr, no clipping."""
        return cls(**{"batch_size": 384, "epochs": 60, "lr_schedule": "constant", "grad_clip": 0.0, **kw})

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def variant_overrides(name: str) -> dict:
    """Map a single variant name to the config field it sets.

    "full" and "hierarchical" are the defaults, so they map to the
    defaults of every axis.
    """
    if name in ("full", "hierarchical"):
        return {"composition": "full", "interaction": "full", "integration": "hierarchical"}
    if name in COMPOSITION_VARIANTS:
        return {"composition": name}
    if name in INTERACTION_VARIANTS:
        return {"interaction": name}
    if name in INTEGRATION_ORDERS:
        return {"integration": name}
    raise ValueError(f"unknown variant {name!r}")


def _coerce(value: str, typ):
    if typ in (bool, "bool"):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    return value.strip()


def parse_config_text(text: str) -> tuple[dict, dict]:
    """Split flat ``key = value`` lines into model and train overrides."""
    model_types = {f.name: f.type for f in fields(ModelConfig)}
    train_types = {f.name: f.type for f in fields(TrainConfig)}
    model_kw, train_kw = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in model_types:
            model_kw[key] = _coerce(value, model_types[key])
        elif key in train_types:
            train_kw[key] = _coerce(value, train_types[key])
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    return model_kw, train_kw


def load_config(path: str | Path | None, base: ModelConfig | None = None,
                **model_overrides) -> tuple[ModelConfig, TrainConfig]:
    model_kw, train_kw = ({}, {}) if path is None else parse_config_text(Path(path).read_text())
    base = base or ModelConfig.micro()
    model = dataclasses.replace(base, **{**model_kw, **model_overrides})
    return model, TrainConfig(**train_kw)


def config_text(model: ModelConfig, train: TrainConfig | None = None) -> str:
    lines = [f"{k} = {v}" for k, v in dataclasses.asdict(model).items()]
    if train is not None:
        lines += [f"{k} = {v}" for k, v in dataclasses.asdict(train).items()]
    return "\n".join(lines) + "\n"
