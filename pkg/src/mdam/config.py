"""Model/run configuration: the variant spec and its serialization."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

VARIANTS = ("MDAM", "MulFusion", "FrameOnly", "CaptOnly", "EarlyFusion", "NoSelfAttn")


@dataclass
class VariantSpec:
    """Which pipeline variant to build, plus every tunable hyperparameter.

    Defaults are the full-scale reference configuration (story length 40,
    sentence length 60, 512-wide sentence encodings, 2048-wide frame
    features, 8 heads of width 64, batch 16, 160 epochs, two-phase learning
    rates 0.01 / 0.0001). Tests and the synthetic benchmark run reduced
    widths via :func:`desk_spec`.
    """

    variant: str = "MDAM"
    n_story: int = 40
    max_words: int = 60
    d_model: int = 512
    d_v: int = 2048
    heads: int = 8
    d_proj: int = 64
    l_attn: int = 2
    l_m: int = 1
    word_dim: int = 300
    dropout_attn: float = 0.1
    dropout_ffn: float = 0.1
    dropout_classifier: float = 0.3
    batch_size: int = 16
    epochs: int = 160
    phase1_lr: float = 0.01
    phase2_lr: float = 0.0001
    seed: int = 0
    grad_clip: float = 5.0
    freeze_embeddings: bool | None = None
    enable_phase2: bool = True
    fusion_bias: bool = False
    phase1_patience: int = 20

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.d_model % 4 != 0:
            raise ValueError(f"d_model must be divisible by 4 (got {self.d_model})")
        for name in ("n_story", "max_words", "d_model", "d_v", "heads", "d_proj",
                     "l_attn", "l_m", "word_dim", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1 (got {getattr(self, name)})")
        return self

    @property
    def conv_channels(self):
        """Channels per convolution window width; 4 widths make d_model."""
        return self.d_model // 4

    @property
    def word_feature_dim(self):
        return self.word_dim + 5

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown spec fields: {sorted(unknown)}")
        return cls(**d).validate()

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s):
        return cls.from_dict(json.loads(s))

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def desk_spec(**overrides):
    """Reduced-width configuration for tests and the synthetic benchmark."""
    spec = VariantSpec(
        n_story=8, max_words=12, d_model=32, d_v=64, heads=4, d_proj=8,
        l_attn=1, l_m=1, word_dim=16,
        dropout_attn=0.0, dropout_ffn=0.0, dropout_classifier=0.0,
        epochs=12, seed=0,
    )
    return spec.replace(**overrides).validate()
