"""Flat ``key = value`` run configuration with dotted sections.

Example::

    experiment = brownian-1d
    seed = 3
    train.n_batches = 500     # comments run to end of line
    model.n = 1
    eval.y_final = -1.0
"""

from __future__ import annotations

from dataclasses import replace
from typing import Callable, Dict

from .experiments import EXPERIMENTS, ExperimentConfig, default_config

__all__ = ["ConfigError", "parse_config", "serialise_config", "load_config", "to_experiment_config",
           "from_experiment_config", "KNOWN_KEYS"]


class ConfigError(ValueError):
    def __init__(self, message, line=None, key=None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line
        self.key = key


def _optional(conv):
    def parse(text):
        return None if text.lower() in ("none", "") else conv(text)
    return parse


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _experiment(text):
    if text not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {text!r}")
    return text


# key -> (parser, attribute path in ExperimentConfig)
_SCHEMA: Dict[str, tuple] = {
    "experiment": (_experiment, None),
    "seed": (int, "seed"),
    "train.batch_size": (int, "train.batch_size"),
    "train.n_batches": (int, "train.n_batches"),
    "train.learning_rate": (float, "train.learning_rate"),
    "train.schedule": (str, "train.schedule"),
    "train.schedule_width": (_optional(float), "train.schedule_width"),
    "train.target_rule": (str, "train.target_rule"),
    "train.model": (str, "train.model"),
    "train.observation": (str, "train.observation"),
    "train.obs_indices": (_ints, "train.obs_indices"),
    "train.obs_sigma": (float, "train.obs_sigma"),
    "train.clip": (_optional(float), "train.clip"),
    "train.t_end": (float, "train.t_end"),
    "train.n_steps": (int, "train.n_steps"),
    "train.x0": (_floats, "train.x0"),
    "train.x0_spread": (float, "train.x0_spread"),
    "train.x0_bound": (_optional(float), "train.x0_bound"),
    "train.dtype": (str, "train.dtype"),
    "eval.n_paths": (int, "n_eval"),
    "eval.n_oracle": (int, "n_oracle"),
    "eval.steps": (int, "eval_steps"),
    "eval.control": (str, "control"),
    "eval.y_init": (_floats, "y_init"),
    "eval.y_final": (_floats, "y_final"),
    "eval.marginal_stride": (int, "marginal_stride"),
    "committor.nx": (int, "committor_nx"),
    "committor.nt": (int, "committor_nt"),
    "committor.r": (float, "committor_r"),
}
_MODEL_PARAMS = {"n": int, "v": float, "rate": float, "landmarks": int, "radius": float,
                 "kappa": float, "beta": float, "nugget": float}
KNOWN_KEYS = tuple(_SCHEMA) + tuple(f"model.{k}" for k in _MODEL_PARAMS)


def _parser_for(key) -> Callable:
    if key in _SCHEMA:
        return _SCHEMA[key][0]
    if key.startswith("model.") and key[6:] in _MODEL_PARAMS:
        return _MODEL_PARAMS[key[6:]]
    return None


def parse_config(text: str) -> dict:
    """Parse into ``{key: typed value}``; unknown or repeated keys are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        conv = _parser_for(key)
        if conv is None:
            raise ConfigError(f"unknown key {key!r}", lineno, key)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", lineno, key)
        try:
            out[key] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", lineno, key) from exc
    return out


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialise_config(cfg: dict) -> str:
    """Inverse of :func:`parse_config`, with keys in sorted order."""
    return "".join(f"{key} = {_format(cfg[key])}\n" for key in sorted(cfg))


def load_config(path) -> dict:
    with open(path) as fh:
        return parse_config(fh.read())


def to_experiment_config(cfg: dict) -> ExperimentConfig:
    """Resolve a parsed document against the experiment's defaults."""
    if "experiment" not in cfg:
        raise ConfigError("missing required key 'experiment'", key="experiment")
    exp = default_config(cfg["experiment"])
    train_kw, top_kw, model_kw = {}, {}, {}
    for key, value in cfg.items():
        if key.startswith("model."):
            model_kw[key[6:]] = value
            continue
        attr = _SCHEMA[key][1]
        if attr is None:
            continue
        if attr.startswith("train."):
            train_kw[attr[6:]] = value
        else:
            top_kw[attr] = value
    train_cfg = exp.train
    if "model" in train_kw and train_kw["model"] != train_cfg.model:
        train_cfg = replace(train_cfg, model_params={})
    params = dict(train_cfg.model_params)
    params.update(model_kw)
    try:
        train_cfg = replace(train_cfg, model_params=params, **train_kw)
        return replace(exp, train=train_cfg, **top_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def from_experiment_config(exp: ExperimentConfig) -> dict:
    """Fully resolved document for a run-directory snapshot."""
    out = {"experiment": exp.experiment}
    for key, (_, attr) in _SCHEMA.items():
        if attr is None:
            continue
        obj = exp.train if attr.startswith("train.") else exp
        out[key] = getattr(obj, attr.split(".", 1)[1] if attr.startswith("train.") else attr)
    for key, value in exp.train.model_params.items():
        if key in _MODEL_PARAMS:
            out[f"model.{key}"] = _MODEL_PARAMS[key](value)
    return out
