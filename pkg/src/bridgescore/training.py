"""Least-squares regression of the control network on score targets."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .conditioning import ObservationOp, observe_batch
from .network import AdamState, DriftNet, adam_step
from .sde import PathBatch, SdeModel, TimeGrid, derive_seed, make_model, simulate_batch
from .targets import AlphaSchedule, ScoreTargetSet, compute_targets

__all__ = ["TrainConfig", "TrainingError", "build_inputs", "batch_loss_and_grad", "train"]

log = logging.getLogger(__name__)


class TrainingError(ArithmeticError):
    def __init__(self, message, path_index=None, step=None):
        super().__init__(message)
        self.path_index = path_index
        self.step = step


@dataclass
class TrainConfig:
    batch_size: int = 256
    n_batches: int = 2000
    learning_rate: float = 1e-3
    schedule: str = "average"
    schedule_width: Optional[float] = None  # first/last window, defaults to one step
    target_rule: str = "adjoint"  # adjoint | reparam | gaussian_step
    model: str = "brownian"
    model_params: dict = field(default_factory=dict)
    observation: str = "identity"
    obs_indices: tuple = ()
    obs_sigma: float = 0.0
    seed: int = 0
    clip: Optional[float] = None
    t_end: float = 1.0
    n_steps: int = 25
    x0: tuple = (0.0,)
    x0_spread: float = 0.0  # std of a Gaussian spread of the initial state
    x0_bound: Optional[float] = None  # clip the spread to x0 +- x0_bound
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n_batches < 0:
            raise ValueError("n_batches must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.clip is not None and not self.clip > 0:
            raise ValueError("clip must be positive")
        if self.x0_spread < 0:
            raise ValueError("x0_spread must be non-negative")
        if self.x0_bound is not None and not self.x0_bound > 0:
            raise ValueError("x0_bound must be positive")
        self.x0 = tuple(float(v) for v in np.atleast_1d(self.x0))
        self.obs_indices = tuple(int(i) for i in self.obs_indices)

    def build_model(self) -> SdeModel:
        return make_model(self.model, self.model_params)

    def initial_state(self, dim: int) -> np.ndarray:
        """``x0`` as a vector of length ``dim``; a single entry is repeated."""
        x0 = np.asarray(self.x0, dtype=float)
        if x0.size == 1:
            x0 = np.repeat(x0, dim)
        if x0.size != dim:
            raise ValueError(f"x0 has {x0.size} entries, model dimension is {dim}")
        return x0

    def grid(self) -> TimeGrid:
        return TimeGrid(0.0, self.t_end, self.n_steps)

    def alpha_schedule(self) -> AlphaSchedule:
        return AlphaSchedule(self.schedule, width=self.schedule_width, T=self.t_end)

    def observation_op(self) -> ObservationOp:
        return ObservationOp(self.observation, indices=self.obs_indices or None,
                             sigma_obs=self.obs_sigma)

    def to_dict(self) -> dict:
        return asdict(self)


def build_inputs(batch: PathBatch, observations) -> np.ndarray:
    """Rows ``(t_j, x_j, y)`` ordered path-major for ``j = 0..M-1``."""
    grid = batch.grid
    N, M = batch.n_paths, grid.n_steps
    y = np.asarray(observations, dtype=float).reshape(N, -1)
    t = np.broadcast_to(grid.nodes[:-1][None, :, None], (N, M, 1))
    x = batch.states[:, :-1]
    yy = np.broadcast_to(y[:, None, :], (N, M, y.shape[1]))
    return np.concatenate([t, x, yy], axis=-1).reshape(N * M, -1)


def batch_loss_and_grad(net: DriftNet, batch: PathBatch, targets: ScoreTargetSet, observations):
    """``sum_i sum_{j<M} |u(t_j, x^i_j, y^i) - S^i_j|^2`` and its parameter gradient."""
    N, M = batch.n_paths, batch.grid.n_steps
    if targets.targets.shape[:2] != (N, M):
        raise ValueError("targets not aligned with batch")
    inputs = build_inputs(batch, observations).astype(net.dtype)
    flat_targets = targets.targets.reshape(N * M, -1)
    loss, grad, resid = net.loss_and_grad(inputs, flat_targets)
    if not np.isfinite(loss):
        bad = int(np.flatnonzero(~np.isfinite(resid).all(axis=1))[0])
        raise TrainingError(f"non-finite loss at path {bad // M}, step {bad % M}",
                            path_index=bad // M, step=bad % M)
    return loss, grad


def _initial_states(config: TrainConfig, b: int, x0: np.ndarray):
    if config.x0_spread == 0:
        return x0
    rng = np.random.Generator(np.random.Philox(key=derive_seed(config.seed, "x0", b)))
    spread = config.x0_spread * rng.standard_normal((config.batch_size, x0.size))
    if config.x0_bound is not None:
        np.clip(spread, -config.x0_bound, config.x0_bound, out=spread)
    return x0 + spread


def train(config: TrainConfig, net: Optional[DriftNet] = None, callback=None):
    """Run the regression loop; returns ``(net, loss_history)``.

    Each batch: simulate reference paths, observe ``y = G(x_T)``, form
    targets, take one Adam step. Everything derives from ``config.seed``.
    """
    model = config.build_model()
    x0 = config.initial_state(model.dim)
    grid = config.grid()
    G = config.observation_op()
    obs_dim = G.out_dim(model.dim)
    if net is None:
        net = DriftNet(model.dim, obs_dim, seed=derive_seed(config.seed, "init"), dtype=config.dtype)
    schedule = config.alpha_schedule()
    state = AdamState.for_params(net.params, lr=config.learning_rate)
    history = []
    for b in range(config.n_batches):
        batch = simulate_batch(model, grid, _initial_states(config, b, x0), config.batch_size,
                               derive_seed(config.seed, "batch", b))
        y = observe_batch(G, batch)
        targets = compute_targets(model, batch, config.target_rule, schedule, config.clip)
        try:
            loss, grad = batch_loss_and_grad(net, batch, targets, y)
        except TrainingError:
            if config.clip is None:
                raise
            log.warning("skipping batch %d with non-finite loss", b)
            history.append(float("nan"))
            continue
        adam_step(state, net.params, grad)
        history.append(loss)
        if callback is not None:
            callback(b, loss)
    net.train_steps = state.step
    return net, history
