"""Configuration dataclasses shared by the model, trainer and checkpoints."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 48
    n_layers: int = 2
    n_heads: int = 3
    vocab_size: int = 24
    grid_side: int = 8
    patch_px: int = 4
    max_text_len: int = 8
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        for name in ("d_model", "n_layers", "n_heads", "vocab_size", "grid_side", "patch_px"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def n_patches(self) -> int:
        return self.grid_side**2

    @property
    def image_px(self) -> int:
        return self.grid_side * self.patch_px

    @property
    def context_len(self) -> int:
        return self.n_patches + self.max_text_len

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


LOSS_MODES = ("ntp", "ntp+lll")


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "ntp+lll"
    lam: float = 0.5
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    data: str = ""

    def __post_init__(self):
        if self.loss not in LOSS_MODES:
            raise ValueError(f"loss must be one of {LOSS_MODES}, got {self.loss!r}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d.get("model", {}))
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})
