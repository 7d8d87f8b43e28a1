"""Run configuration: one JSON document covering model, training, and rig knobs.

Unknown keys and out-of-range values are rejected with the offending field
path so typos fail loudly instead of silently training the wrong model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class RigConfig:
    spread: float = 0.25
    threshold: float = 0.5


# JSON key -> (attribute, type); "lambda" is a Python keyword so the
# TrainConfig attribute carries a trailing underscore.
_SECTIONS = {
    "model": (ModelConfig, {
        "d_en": ("d_en", int), "n_heads": ("n_heads", int), "n_layers": ("n_layers", int),
        "c": ("c", int), "v_count": ("v_count", int), "r": ("r", int),
        "mlp_widths": ("mlp_widths", tuple),
    }),
    "train": (TrainConfig, {
        "lambda": ("lambda_", float), "opacity_tau": ("opacity_tau", float),
        "opacity_beta": ("opacity_beta", float), "lr": ("lr", float),
        "epochs": ("epochs", int), "batch_size": ("batch_size", int),
        "seed": ("seed", int), "use_classification": ("use_classification", bool),
        "use_face_attention": ("use_face_attention", bool),
        "max_input_points": ("max_input_points", lambda v: None if v is None else int(v)),
        "loss_gt_points": ("loss_gt_points", lambda v: None if v is None else int(v)),
    }),
    "rig": (RigConfig, {
        "spread": ("spread", float), "threshold": ("threshold", float),
    }),
}


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    rig: RigConfig

    def validate(self):
        m, t, r = self.model, self.train, self.rig
        checks = (
            (m.d_en >= 1 and m.d_en % m.n_heads == 0,
             "model.d_en", "must be positive and divisible by n_heads"),
            (m.n_heads >= 1, "model.n_heads", "must be >= 1"),
            (m.n_layers >= 1, "model.n_layers", "must be >= 1"),
            (m.c >= 2, "model.c", "must be at least 2"),
            (m.v_count >= 1, "model.v_count", "must be >= 1"),
            (m.r >= 1, "model.r", "must be >= 1"),
            (all(w >= 1 for w in m.mlp_widths), "model.mlp_widths", "widths must be >= 1"),
            (0 <= t.lambda_ <= 1, "train.lambda", "must lie in [0, 1]"),
            (t.opacity_tau > 0, "train.opacity_tau", "must be positive"),
            (t.opacity_beta >= 0, "train.opacity_beta", "must be >= 0"),
            (t.lr > 0, "train.lr", "must be positive"),
            (t.epochs >= 0, "train.epochs", "must be >= 0"),
            (t.batch_size >= 1, "train.batch_size", "must be >= 1"),
            (t.max_input_points is None or t.max_input_points >= 1,
             "train.max_input_points", "must be >= 1 or null"),
            (t.loss_gt_points is None or t.loss_gt_points >= 1,
             "train.loss_gt_points", "must be >= 1 or null"),
            (0 < r.spread <= 1, "rig.spread", "must lie in (0, 1]"),
            (0 <= r.threshold <= 1, "rig.threshold", "must lie in [0, 1]"),
        )
        for ok, path, msg in checks:
            if not ok:
                raise ConfigError(f"{path}: {msg}")
        return self

    def to_dict(self):
        return {
            "model": {
                "d_en": self.model.d_en, "n_heads": self.model.n_heads,
                "n_layers": self.model.n_layers, "c": self.model.c,
                "v_count": self.model.v_count, "r": self.model.r,
                "mlp_widths": list(self.model.mlp_widths),
            },
            "train": {
                "lambda": self.train.lambda_, "opacity_tau": self.train.opacity_tau,
                "opacity_beta": self.train.opacity_beta, "lr": self.train.lr,
                "epochs": self.train.epochs, "batch_size": self.train.batch_size,
                "seed": self.train.seed,
                "use_classification": self.train.use_classification,
                "use_face_attention": self.train.use_face_attention,
                "max_input_points": self.train.max_input_points,
                "loss_gt_points": self.train.loss_gt_points,
            },
            "rig": {"spread": self.rig.spread, "threshold": self.rig.threshold},
        }


def default_run_config() -> RunConfig:
    return RunConfig(model=ModelConfig(), train=TrainConfig(), rig=RigConfig())


def run_config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = default_run_config()
    for section, content in doc.items():
        if section not in _SECTIONS:
            raise ConfigError(f"{section}: unknown section")
        if not isinstance(content, dict):
            raise ConfigError(f"{section}: must be an object")
        _, fields = _SECTIONS[section]
        target = getattr(cfg, section)
        for key, value in content.items():
            if key not in fields:
                raise ConfigError(f"{section}.{key}: unknown field")
            attr, conv = fields[key]
            try:
                setattr(target, attr, conv(value))
            except (TypeError, ValueError):
                raise ConfigError(f"{section}.{key}: cannot interpret {value!r}") from None
    return cfg.validate()


def load_run_config(path=None) -> RunConfig:
    """Read a JSON config file; a missing argument yields all defaults."""
    if path is None:
        return default_run_config().validate()
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return run_config_from_dict(doc)
