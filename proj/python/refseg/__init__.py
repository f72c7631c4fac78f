"""Referring image segmentation by entity discovery (C++ core with Python bindings)."""

import json

from ._core import (
    ConfigError,
    DimensionError,
    DomainError,
    FormatError,
    GenerationError,
    NumericError,
    RefsegError,
    StateError,
    c3_loss,
    iou,
    predict_mask,
    read_feature_file,
    score_masks,
    write_feature_file,
)
from . import _core

__all__ = [
    "ConfigError", "DimensionError", "DomainError", "FormatError", "GenerationError", "NumericError",
    "RefsegError", "StateError", "c3_loss", "config", "evaluate_checkpoint", "generate_synthetic", "iou",
    "predict_mask", "read_feature_file", "score_masks", "train", "write_feature_file",
]


def config(base=None, **settings):
    """Synthetic preset (or `base`) with flat overrides, e.g. config(**{"train.epochs": 2})."""
    text = json.dumps(base) if base is not None else _core.preset_config()
    flat = {k: str(v).lower() if isinstance(v, bool) else str(v) for k, v in settings.items()}
    return json.loads(_core.apply_settings(text, flat))


def generate_synthetic(cfg=None):
    return _core.generate_synthetic(json.dumps(cfg) if cfg else "")


def train(cfg=None, checkpoint=""):
    return _core.train(json.dumps(cfg) if cfg else "", str(checkpoint))


def evaluate_checkpoint(path, tau=None, scheme=None):
    return _core.evaluate_checkpoint(str(path), tau, scheme)
