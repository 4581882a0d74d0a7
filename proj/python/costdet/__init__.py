"""Cost-sensitive two-stage lesion detector on synthetic slices."""

import json

from . import _core
from ._core import ConfigError, iou, lesion_loss, match_lesions, nms

__all__ = [
    "ConfigError",
    "dataset_digest",
    "evaluate",
    "generate",
    "iou",
    "lesion_loss",
    "match_lesions",
    "nms",
    "train",
]


def generate(out_dir, **config):
    """Writes a synthetic dataset to out_dir and returns split counts and its digest."""
    return json.loads(_core.generate(json.dumps(config), str(out_dir)))


def dataset_digest(data_dir):
    return _core.dataset_digest(str(data_dir))


def train(data_dir, checkpoint, **config):
    """Trains on the train split and writes a checkpoint. Returns per-epoch losses."""
    return json.loads(_core.train(str(data_dir), str(checkpoint), json.dumps(config)))


def evaluate(data_dir, checkpoint, split="test", threshold=0.7, max_det=6):
    return json.loads(_core.evaluate(str(data_dir), str(checkpoint), split, threshold, max_det))
