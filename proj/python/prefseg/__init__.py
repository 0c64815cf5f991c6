"""Python access to the prefseg core: metrics, losses, biased attention and
the synth/collect/train/eval pipeline."""

import json

from ._prefseg import (
    Error,
    aggregate_iou,
    biased_attention,
    boundary_band,
    boundary_iou,
    chair,
    gradcheck,
    iou,
    pearson,
    seg_improvement_loss,
    seg_preference_loss,
    text_dpo_loss,
    text_improvement_loss,
)
from . import _prefseg

__all__ = [
    "Error",
    "Run",
    "aggregate_iou",
    "biased_attention",
    "boundary_band",
    "boundary_iou",
    "chair",
    "default_config",
    "gradcheck",
    "iou",
    "pearson",
    "seg_improvement_loss",
    "seg_preference_loss",
    "text_dpo_loss",
    "text_improvement_loss",
]


def default_config():
    """The default run configuration as a nested dict."""
    return json.loads(_prefseg.default_config_json())


def _merge(base, override):
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


class Run:
    """One pipeline run rooted at out_dir. config entries override the
    defaults returned by default_config()."""

    def __init__(self, out_dir, config=None):
        self.out_dir = str(out_dir)
        self.config = _merge(default_config(), config or {})
        self._json = json.dumps(self.config)

    @property
    def config_hash(self):
        return _prefseg.config_hash(self._json)

    def synth(self):
        _prefseg.synth(self._json, self.out_dir)

    def collect(self, phase):
        return _prefseg.collect(self._json, self.out_dir, phase)

    def train(self, stage):
        return _prefseg.train(self._json, self.out_dir, stage)

    def evaluate(self, stage, ensemble=False, pearson=False):
        return _prefseg.evaluate(self._json, self.out_dir, stage, ensemble, pearson)

    def report(self):
        return json.loads(_prefseg.report(self._json, self.out_dir))
