"""Dual-attention late-fusion story QA: model, variants, training, data."""

from mdam.config import VariantSpec, desk_spec

__all__ = ["VariantSpec", "desk_spec", "MDAMClassifier"]
__version__ = "0.1.0"


def __getattr__(name):
    if name == "MDAMClassifier":
        from mdam.estimator import MDAMClassifier
        return MDAMClassifier
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
