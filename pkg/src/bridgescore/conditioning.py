"""Observation operators and simulation under a control ``u(t, x, y)``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .sde import (PathBatch, PathSample, SdeModel, TimeGrid, _check_x0, _integrate,
                  batch_seeds, derive_seed, path_noise)

__all__ = [
    "ObservationOp",
    "observe",
    "observe_batch",
    "ControlField",
    "controlled_simulate",
    "controlled_batch",
]


@dataclass(frozen=True)
class ObservationOp:
    """``identity``, ``project`` (coordinate subset) or ``noise`` (additive Gaussian)."""

    kind: str = "identity"
    indices: Optional[tuple] = None
    sigma_obs: float = 0.0

    def __post_init__(self):
        kind = self.kind.lower()
        kind = {"coordproject": "project", "coord_project": "project",
                "additive_noise": "noise", "additivenoise": "noise"}.get(kind, kind)
        if kind not in ("identity", "project", "noise"):
            raise ValueError(f"unknown observation kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind == "project":
            idx = tuple(int(i) for i in (self.indices or ()))
            if not idx or len(set(idx)) != len(idx) or min(idx) < 0:
                raise ValueError("projection indices must be distinct and non-negative")
            object.__setattr__(self, "indices", idx)
        if kind == "noise" and not self.sigma_obs > 0:
            raise ValueError("observation noise level must be positive")

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def project(cls, indices: Sequence[int]):
        return cls("project", indices=tuple(indices))

    @classmethod
    def additive_noise(cls, sigma_obs: float):
        return cls("noise", sigma_obs=float(sigma_obs))

    def out_dim(self, n: int) -> int:
        if self.kind == "project":
            if max(self.indices) >= n:
                raise ValueError(f"projection index out of range for dimension {n}")
            return len(self.indices)
        return n


def observe(G: ObservationOp, x_T, rng=None) -> np.ndarray:
    """Apply ``G`` to one terminal state (or a stack of them).

    ``rng`` is a numpy Generator or an integer seed; only the noisy
    operator consumes it.
    """
    x_T = np.asarray(x_T, dtype=float)
    G.out_dim(x_T.shape[-1])
    if G.kind == "identity":
        return x_T.copy()
    if G.kind == "project":
        return x_T[..., list(G.indices)]
    if rng is None:
        raise ValueError("a random source is required for noisy observations")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.Philox(key=int(rng)))
    return x_T + G.sigma_obs * rng.standard_normal(x_T.shape)


def observe_batch(G: ObservationOp, batch: PathBatch) -> np.ndarray:
    """Observations for every path, noise drawn from each path's derived seed."""
    if G.kind != "noise":
        return observe(G, batch.terminal)
    rows = [observe(G, batch.terminal[k], derive_seed(int(s), "observation"))
            for k, s in enumerate(batch.seeds)]
    return np.stack(rows)


class ControlField:
    """Wraps a network (anything with ``forward(t, x, y)``) or a function ``u(t, x, y)``.

    Called with a stack of states ``x`` (rows) and either one ``y`` or one per row.
    """

    def __init__(self, fn: Callable, name: str = "control"):
        self.name = name
        self._fn = fn.forward if hasattr(fn, "forward") else fn

    @classmethod
    def zero(cls):
        return cls(lambda t, x, y: np.zeros_like(x), "zero")

    def __call__(self, t, x, y):
        out = np.asarray(self._fn(t, x, y), dtype=float)
        return out.reshape(np.shape(x))


def _as_control(control):
    if control is None or isinstance(control, ControlField):
        return control
    return ControlField(control)


def controlled_simulate(model: SdeModel, control, y, grid: TimeGrid, x0, seed: int,
                        noise=None) -> PathSample:
    """Euler-Maruyama for ``dX = (b + sigma sigma^T u) dt + sigma dB``.

    The control is evaluated at ``t_0..t_{M-1}`` only. With ``u = 0`` the
    states are bit-identical to :func:`simulate_path` for the same seed.
    """
    x0 = _check_x0(model, x0)
    if noise is None:
        noise = path_noise(seed, grid, model.dim)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    states = _integrate(model, grid, x0, np.asarray(noise, dtype=float)[None],
                        control=_as_control(control), y=y)[0]
    return PathSample(grid, states, np.asarray(noise, dtype=float), int(seed) & 0xFFFFFFFFFFFFFFFF)


def controlled_batch(model: SdeModel, control, y, grid: TimeGrid, x0, n_paths: int,
                     master_seed: int) -> PathBatch:
    """``n_paths`` controlled paths; ``y`` is one observation or one per path."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    x0 = _check_x0(model, x0)
    seeds = batch_seeds(master_seed, n_paths)
    noise = np.stack([path_noise(s, grid, model.dim) for s in seeds])
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape[0] not in (1, n_paths):
        raise ValueError("y must be one observation or one per path")
    states = _integrate(model, grid, x0, noise, control=_as_control(control), y=y)
    batch = PathBatch(grid, states, noise, seeds, master_seed, model.describe())
    batch.observations = np.broadcast_to(y, (n_paths, y.shape[1])).copy()
    return batch
