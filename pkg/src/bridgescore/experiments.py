"""Metrics and experiment runners for Brownian, double-well and shape bridges."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from .conditioning import ControlField, controlled_batch
from .network import DriftNet, save_checkpoint
from .oracles import brownian_bridge_score, double_well_bridge_score, double_well_committor
from .sde import PathBatch, TimeGrid, circle_landmarks, derive_seed, write_paths_csv
from .training import TrainConfig, train

__all__ = [
    "EXPERIMENTS",
    "dist_metric",
    "mv_metric",
    "shape_distance",
    "crossing_fraction",
    "MetricReport",
    "ExperimentConfig",
    "default_config",
    "build_control",
    "evaluate",
    "run_experiment",
]

EXPERIMENTS = ("brownian-1d", "brownian-10d", "doublewell-1d", "doublewell-10d", "shape-circle")


def _states(paths):
    return paths.states if isinstance(paths, PathBatch) else np.asarray(paths, dtype=float)


def _terminal(paths):
    arr = _states(paths)
    return arr[:, -1] if arr.ndim == 3 else arr


def dist_metric(paths, y_final) -> float:
    """Mean Euclidean distance between terminal states and ``y_final``."""
    xT = _terminal(paths)
    if xT.shape[0] == 0:
        raise ValueError("no paths")
    return float(np.mean(np.linalg.norm(xT - np.asarray(y_final, dtype=float), axis=-1)))


def _node_moments(states):
    return states.mean(axis=0), states.std(axis=0, ddof=1)


def mv_metric(paths, oracle_paths) -> float:
    """Root mean over nodes ``1..M`` of squared mean and standard-deviation gaps."""
    a, b = _states(paths), _states(oracle_paths)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("MV needs at least two paths per set")
    if a.shape[1:] != b.shape[1:]:
        raise ValueError("path sets are on different grids")
    ma, sa = _node_moments(a[:, 1:])
    mb, sb = _node_moments(b[:, 1:])
    per_node = ((ma - mb) ** 2).sum(-1) + ((sa - sb) ** 2).sum(-1)
    return float(np.sqrt(per_node.mean()))


def shape_distance(bridge_paths, target_shape) -> float:
    """``(1 / (M N)) sum_paths sum_landmarks |x_i - y_i|^2`` at the terminal time."""
    xT = _terminal(bridge_paths)
    target = np.asarray(target_shape, dtype=float).reshape(-1)
    if xT.shape[-1] != target.size:
        raise ValueError("landmark counts differ")
    n_landmarks = target.size // 2
    sq = ((xT - target) ** 2).sum(-1)
    return float(sq.sum() / (xT.shape[0] * n_landmarks))


def crossing_fraction(paths, centre=-1.0, tol=0.3, coord=0) -> float:
    return float(np.mean(np.abs(_terminal(paths)[:, coord] - centre) <= tol))


@dataclass
class MetricReport:
    experiment: str
    schedule: str
    control: str
    n_eval: int
    seed: int
    dist: Optional[float] = None
    mv: Optional[float] = None
    shape_distance: Optional[float] = None
    crossing_fraction: Optional[float] = None
    n_oracle: int = 0
    marginal_nodes: list = field(default_factory=list)
    marginal_mean: list = field(default_factory=list)
    marginal_std: list = field(default_factory=list)
    oracle_mean: list = field(default_factory=list)
    oracle_std: list = field(default_factory=list)
    train_batches: int = 0
    final_loss: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))

    def check(self):
        for key in ("dist", "mv", "shape_distance", "crossing_fraction"):
            val = getattr(self, key)
            if val is not None and not (np.isfinite(val) and val >= 0):
                raise ArithmeticError(f"metric {key} is not finite and non-negative: {val}")


@dataclass
class ExperimentConfig:
    experiment: str
    train: TrainConfig
    y_init: tuple
    y_final: tuple
    n_eval: int = 1000
    n_oracle: int = 1000
    eval_steps: int = 200
    control: str = "trained"  # trained | oracle | untrained
    seed: int = 0
    committor_nx: int = 801
    committor_nt: int = 2000
    committor_r: float = 0.1
    marginal_stride: int = 10

    def to_dict(self):
        return asdict(self)


def default_config(experiment: str, **overrides) -> ExperimentConfig:
    """Desk-scale defaults for a built-in experiment; ``overrides`` patch the result."""
    if experiment not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENTS)}")
    family, dim = experiment.split("-")
    if family == "shape":
        n_landmarks = 50
        train_cfg = TrainConfig(model="shape", model_params={"landmarks": n_landmarks, "kappa": 0.1,
                                                             "beta": 1.0, "nugget": 0.01},
                                x0=tuple(circle_landmarks(n_landmarks, 1.0).ravel()), n_steps=100,
                                batch_size=64, n_batches=500, dtype="float32")
        cfg = ExperimentConfig(experiment, train_cfg, train_cfg.x0,
                               tuple(circle_landmarks(n_landmarks, 1.5).ravel()), eval_steps=100,
                               n_eval=200, n_oracle=0)
    else:
        n = 1 if dim == "1d" else 10
        y_init = (1.0,) * n
        y_final = (-1.0,) + (1.0,) * (n - 1)
        if family == "brownian":
            train_cfg = TrainConfig(model="brownian", model_params={"n": n}, x0=(0.0,) * n,
                                    x0_spread=1.0, n_steps=50, n_batches=3000)
        else:
            train_cfg = TrainConfig(model="double_well", model_params={"n": n, "v": 5.0},
                                    schedule="first", x0=(0.0,) * n, x0_spread=0.5,
                                    x0_bound=2.0, n_steps=50, n_batches=2000)
        cfg = ExperimentConfig(experiment, train_cfg, y_init, y_final)
    train_over = {k[6:]: v for k, v in overrides.items() if k.startswith("train_")}
    rest = {k: v for k, v in overrides.items() if not k.startswith("train_")}
    if train_over:
        cfg = replace(cfg, train=replace(cfg.train, **train_over))
    return replace(cfg, **rest)


@lru_cache(maxsize=4)
def _committor(v, nx, nt, r):
    return double_well_committor(v=v, n_x=nx, n_t=nt, r=r)


def build_control(cfg: ExperimentConfig, kind: str, net: Optional[DriftNet] = None) -> Optional[ControlField]:
    """Control field for ``kind`` in {trained, oracle, untrained}."""
    model_kind = cfg.train.model
    T = cfg.train.t_end
    if kind == "untrained":
        return ControlField.zero()
    if kind == "trained":
        if net is None:
            raise ValueError("a trained network is required")
        return ControlField(net, "trained")
    if kind != "oracle":
        raise ValueError(f"unknown control kind {kind!r}")
    if model_kind == "brownian":
        return ControlField(lambda t, x, y: brownian_bridge_score(t, x, y, T), "oracle")
    if model_kind == "double_well":
        table = _committor(float(cfg.train.model_params.get("v", 5.0)), cfg.committor_nx,
                           cfg.committor_nt, cfg.committor_r)
        return ControlField(lambda t, x, y: double_well_bridge_score(table, t, x, y), "oracle")
    raise ValueError(f"no oracle control for model {model_kind!r}")


def _has_oracle(cfg):
    return cfg.train.model in ("brownian", "double_well")


def evaluate(cfg: ExperimentConfig, net: Optional[DriftNet] = None, out_dir=None,
             history=None) -> MetricReport:
    """Simulate held-out controlled paths from ``y_init`` towards ``y_final`` and score them."""
    model = cfg.train.build_model()
    grid = TimeGrid(0.0, cfg.train.t_end, cfg.eval_steps)
    control = build_control(cfg, cfg.control, net)
    y = np.asarray(cfg.y_final, dtype=float)[None]
    paths = controlled_batch(model, control, y, grid, cfg.y_init, cfg.n_eval,
                             derive_seed(cfg.seed, "evaluate"))
    stride = max(1, cfg.marginal_stride)
    nodes = list(range(0, grid.n_steps + 1, stride))
    mean, std = _node_moments(paths.states[:, nodes])
    report = MetricReport(cfg.experiment, cfg.train.alpha_schedule().describe(), cfg.control,
                          cfg.n_eval, cfg.seed, marginal_nodes=nodes,
                          marginal_mean=mean.tolist(), marginal_std=std.tolist())
    if history:
        report.train_batches = len(history)
        report.final_loss = float(history[-1])
    if cfg.train.model == "shape":
        report.shape_distance = shape_distance(paths, cfg.y_final)
    else:
        report.dist = dist_metric(paths, cfg.y_final)
    if cfg.train.model == "double_well":
        report.crossing_fraction = crossing_fraction(paths)
    oracle_paths = None
    if _has_oracle(cfg) and cfg.n_oracle >= 2:
        oracle_paths = controlled_batch(model, build_control(cfg, "oracle"), y, grid, cfg.y_init,
                                        cfg.n_oracle, derive_seed(cfg.seed, "oracle-paths"))
        report.mv = mv_metric(paths, oracle_paths)
        report.n_oracle = cfg.n_oracle
        om, os_ = _node_moments(oracle_paths.states[:, nodes])
        report.oracle_mean, report.oracle_std = om.tolist(), os_.tolist()
    report.check()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_paths_csv(paths, out / "eval_paths.csv", out / "eval_noise.csv", y=paths.observations)
        if oracle_paths is not None:
            write_paths_csv(oracle_paths, out / "oracle_paths.csv", y=oracle_paths.observations)
        (out / "report.json").write_text(report.to_json())
    return report


def run_experiment(cfg: ExperimentConfig, out_dir=None):
    """Train (for ``control = trained``), then evaluate. Returns ``(report, net)``.

    Wall-clock time goes to ``timing.json`` so the metric report itself
    depends only on the configuration.
    """
    start = time.perf_counter()
    net, history = None, None
    if cfg.control == "trained":
        net, history = train(replace(cfg.train, seed=cfg.seed))
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(net, Path(out_dir) / "checkpoint.txt", steps=len(history))
    trained_at = time.perf_counter()
    report = evaluate(cfg, net, out_dir, history)
    if out_dir is not None:
        timing = {"train_seconds": trained_at - start,
                  "evaluate_seconds": time.perf_counter() - trained_at}
        (Path(out_dir) / "timing.json").write_text(json.dumps(timing, sort_keys=True, indent=1) + "\n")
    return report, net
