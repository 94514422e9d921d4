"""Diffusion models, Euler-Maruyama simulation and Jacobian-vector products.

All model methods are batched: ``x`` and vector arguments have shape
``(..., n)`` and are evaluated row-wise.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "SimulationError",
    "ModelError",
    "TimeGrid",
    "SdeModel",
    "BrownianModel",
    "OUModel",
    "DoubleWellModel",
    "ShapeModel",
    "PathSample",
    "PathBatch",
    "derive_seed",
    "path_noise",
    "simulate_path",
    "simulate_batch",
    "replay",
    "jacobian_full",
    "make_model",
    "circle_landmarks",
    "write_paths_csv",
]

_U64 = (1 << 64) - 1


class SimulationError(RuntimeError):
    """Raised when a simulated state stops being finite."""

    def __init__(self, message: str, step: int, path_index: Optional[int] = None):
        super().__init__(message)
        self.step = step
        self.path_index = path_index


class ModelError(ValueError):
    pass


def derive_seed(seed: int, *labels) -> int:
    """Deterministic 64-bit seed from a parent seed and a label tuple."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed) & _U64).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class TimeGrid:
    t_start: float = 0.0
    t_end: float = 1.0
    n_steps: int = 200

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise ValueError(f"n_steps must be an integer >= 2, got {self.n_steps}")
        if not self.t_end > self.t_start:
            raise ValueError("t_end must exceed t_start")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def T(self) -> float:
        return self.t_end

    def node(self, j: int) -> float:
        return self.t_start + j * self.dt

    @property
    def nodes(self) -> np.ndarray:
        return self.t_start + np.arange(self.n_steps + 1) * self.dt


class SdeModel:
    """Base class for ``dX = b(t, X) dt + sigma(t, X) dB``.

    Subclasses implement the drift, the volatility products and the
    transposed derivative products used by the adjoint recursion.
    """

    kind = "base"
    sigma_constant = True

    def __init__(self, dim: int):
        if dim < 1:
            raise ModelError("state dimension must be positive")
        self.dim = int(dim)

    # drift
    def drift(self, t, x):
        raise NotImplementedError

    def drift_grad_transpose_apply(self, t, x, v):
        """Return ``grad b(t, x)^T v``."""
        raise NotImplementedError

    # volatility, identity by default
    def sigma_apply(self, t, x, v):
        return np.array(v, dtype=float, copy=True)

    def sigma_transpose_apply(self, t, x, v):
        return np.array(v, dtype=float, copy=True)

    def sigma_inv_apply(self, t, x, v):
        return np.array(v, dtype=float, copy=True)

    def sigma_inv_transpose_apply(self, t, x, v):
        return np.array(v, dtype=float, copy=True)

    def sigma_grad_transpose_apply(self, t, x, v, db):
        """Transposed x-derivative of ``x -> sigma(t, x) db`` applied to ``v``."""
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(v)))

    def params(self) -> dict:
        return {}

    def describe(self) -> str:
        items = ",".join(f"{k}={v}" for k, v in self.params().items())
        return f"{self.kind}({items})" if items else self.kind

    def __repr__(self):
        return f"<SdeModel {self.describe()} dim={self.dim}>"


class BrownianModel(SdeModel):
    kind = "brownian"

    def drift(self, t, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def drift_grad_transpose_apply(self, t, x, v):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(v)))

    def params(self):
        return {"n": self.dim}


class OUModel(SdeModel):
    """Ornstein-Uhlenbeck drift ``-rate * x`` with unit volatility."""

    kind = "ou"

    def __init__(self, dim: int, rate: float = 0.5):
        super().__init__(dim)
        if not rate > 0:
            raise ModelError("OU rate must be positive")
        self.rate = float(rate)

    def drift(self, t, x):
        return -self.rate * np.asarray(x, dtype=float)

    def drift_grad_transpose_apply(self, t, x, v):
        return -self.rate * np.broadcast_to(np.asarray(v, dtype=float),
                                            np.broadcast_shapes(np.shape(x), np.shape(v))).copy()

    def params(self):
        return {"n": self.dim, "rate": self.rate}


class DoubleWellModel(SdeModel):
    """Coordinate-wise drift ``-U_v'(x)`` for ``U_v(x) = v (x^2 - 1)^2``."""

    kind = "double_well"

    def __init__(self, dim: int, v: float = 5.0):
        super().__init__(dim)
        if not v > 0:
            raise ModelError("double-well height v must be positive")
        self.v = float(v)

    def potential(self, x):
        x = np.asarray(x, dtype=float)
        return self.v * (x * x - 1.0) ** 2

    def drift(self, t, x):
        x = np.asarray(x, dtype=float)
        return -4.0 * self.v * x * (x * x - 1.0)

    def drift_grad_transpose_apply(self, t, x, v):
        x = np.asarray(x, dtype=float)
        return -4.0 * self.v * (3.0 * x * x - 1.0) * v

    def params(self):
        return {"n": self.dim, "v": self.v}


class ShapeModel(SdeModel):
    """Landmark shape process driven by Gaussian-kernel noise fields.

    State: ``N`` landmarks in the plane flattened as ``(x_1, y_1, x_2, ...)``.
    Noise: one planar Brownian motion per noise-grid point, so ``sigma(x)
    = K(x) (kron) I_2`` with ``K[i, j] = kappa * exp(-|x_i - g_j|^2 / beta)``.
    The grid must have as many points as there are landmarks. ``nugget``
    adds ``nugget * I`` to ``K`` to keep ``sigma`` invertible in floating
    point when the kernel is wide compared with the landmark spacing.
    """

    kind = "shape"
    sigma_constant = False

    def __init__(self, kappa: float, beta: float, noise_grid, nugget: float = 0.0):
        grid = np.asarray(noise_grid, dtype=float)
        if grid.ndim != 2 or grid.shape[1] != 2:
            raise ModelError("noise grid must have shape (M, 2)")
        if not (kappa > 0 and beta > 0):
            raise ModelError("kappa and beta must be positive")
        if nugget < 0:
            raise ModelError("nugget must be non-negative")
        d2 = ((grid[:, None, :] - grid[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        if grid.shape[0] > 1 and d2.min() <= 0:
            raise ModelError("noise grid points must be distinct")
        super().__init__(2 * grid.shape[0])
        self.kappa = float(kappa)
        self.beta = float(beta)
        self.noise_grid = grid
        self.n_landmarks = grid.shape[0]
        self.nugget = float(nugget)

    def _split(self, a):
        a = np.asarray(a, dtype=float)
        return a.reshape(a.shape[:-1] + (self.n_landmarks, 2))

    def _kernel(self, x):
        # K[..., i, j] = k(x_i, g_j); diff[..., i, j, :] = x_i - g_j
        p = self._split(x)
        diff = p[..., :, None, :] - self.noise_grid
        k = self.kappa * np.exp(-(diff * diff).sum(-1) / self.beta)
        if self.nugget:
            return k + self.nugget * np.eye(self.n_landmarks), diff
        return k, diff

    def kernel_matrix(self, x):
        return self._kernel(x)[0]

    def drift(self, t, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def drift_grad_transpose_apply(self, t, x, v):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(v)))

    def sigma_apply(self, t, x, v):
        k, _ = self._kernel(x)
        out = k @ self._split(v)
        return out.reshape(out.shape[:-2] + (-1,))

    def sigma_transpose_apply(self, t, x, v):
        k, _ = self._kernel(x)
        out = np.swapaxes(k, -1, -2) @ self._split(v)
        return out.reshape(out.shape[:-2] + (-1,))

    def sigma_inv_apply(self, t, x, v):
        k, _ = self._kernel(x)
        vv = np.broadcast_to(self._split(v), k.shape[:-1] + (2,))
        out = np.linalg.solve(k, vv)
        return out.reshape(out.shape[:-2] + (-1,))

    def sigma_inv_transpose_apply(self, t, x, v):
        k, _ = self._kernel(x)
        vv = np.broadcast_to(self._split(v), k.shape[:-1] + (2,))
        out = np.linalg.solve(np.swapaxes(k, -1, -2), vv)
        return out.reshape(out.shape[:-2] + (-1,))

    def sigma_grad_transpose_apply(self, t, x, v, db):
        # f_i(x) = sum_j k(x_i, g_j) db_j depends on x_i only, and
        # grad_{x_i} k(x_i, g_j) = -2 k (x_i - g_j) / beta.
        k, diff = self._kernel(x)
        vi = self._split(v)
        dbj = self._split(db)
        inner = vi @ np.swapaxes(dbj, -1, -2)  # (..., i, j): v_i . db_j
        if self.nugget:
            k = k - self.nugget * np.eye(self.n_landmarks)
        w = inner * k * (-2.0 / self.beta)
        out = (w[..., None] * diff).sum(-2)
        return out.reshape(out.shape[:-2] + (-1,))

    def params(self):
        return {"kappa": self.kappa, "beta": self.beta, "landmarks": self.n_landmarks,
                "nugget": self.nugget}


def circle_landmarks(count: int, radius: float = 1.0) -> np.ndarray:
    theta = 2.0 * np.pi * np.arange(count) / count
    return radius * np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def make_model(kind: str, params: Optional[dict] = None) -> SdeModel:
    """Build a built-in model: ``brownian``, ``ou``, ``double_well`` or ``shape``."""
    params = dict(params or {})
    kind = kind.replace("-", "_").lower()
    try:
        if kind == "brownian":
            return BrownianModel(int(params.get("n", 1)))
        if kind == "ou":
            return OUModel(int(params.get("n", 1)), float(params.get("rate", 0.5)))
        if kind in ("double_well", "doublewell"):
            return DoubleWellModel(int(params.get("n", 1)), float(params.get("v", 5.0)))
        if kind in ("shape", "shape_sde"):
            grid = params.get("noise_grid")
            if grid is None:
                grid = circle_landmarks(int(params.get("landmarks", 50)),
                                        float(params.get("radius", 1.0)))
            return ShapeModel(float(params.get("kappa", 0.1)), float(params.get("beta", 1.0)), grid,
                              float(params.get("nugget", 0.0)))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ModelError):
            raise
        raise ModelError(f"invalid parameters for model {kind!r}: {exc}") from exc
    raise ModelError(f"unknown model kind {kind!r}")


@dataclass
class PathSample:
    grid: TimeGrid
    states: np.ndarray  # (M + 1, n)
    noise: np.ndarray   # (M, n)
    seed: int = 0

    def __post_init__(self):
        M = self.grid.n_steps
        if self.states.shape[0] != M + 1 or self.noise.shape[0] != M:
            raise ValueError("states must have M+1 rows and noise M rows")


@dataclass
class PathBatch:
    """Paths stacked along the first axis: states ``(N, M+1, n)``, noise ``(N, M, n)``."""

    grid: TimeGrid
    states: np.ndarray
    noise: np.ndarray
    seeds: np.ndarray
    master_seed: Optional[int] = None
    model_id: str = ""
    observations: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    def __len__(self):
        return self.n_paths

    def __getitem__(self, k) -> PathSample:
        return PathSample(self.grid, self.states[k], self.noise[k], int(self.seeds[k]))

    @property
    def paths(self):
        return [self[k] for k in range(self.n_paths)]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[:, -1, :]

    @classmethod
    def from_sample(cls, path: PathSample) -> "PathBatch":
        return cls(path.grid, path.states[None], path.noise[None],
                   np.array([path.seed], dtype=np.uint64))


def as_batch(path) -> PathBatch:
    return path if isinstance(path, PathBatch) else PathBatch.from_sample(path)


def path_noise(seed: int, grid: TimeGrid, dim: int) -> np.ndarray:
    """Brownian increments for one path from a counter-based (Philox) stream."""
    gen = np.random.Generator(np.random.Philox(key=int(seed) & _U64))
    return gen.standard_normal((grid.n_steps, dim)) * np.sqrt(grid.dt)


def _integrate(model: SdeModel, grid: TimeGrid, x0: np.ndarray, noise: np.ndarray,
               control=None, y=None) -> np.ndarray:
    """Euler-Maruyama over a batch; ``control(t, x, y)`` adds ``sigma sigma^T u``."""
    n_paths, M, _ = noise.shape
    states = np.empty((n_paths, M + 1, model.dim))
    states[:, 0] = x0
    dt = grid.dt
    x = states[:, 0]
    for j in range(M):
        t = grid.node(j)
        # overflow is reported below as a SimulationError
        with np.errstate(over="ignore", invalid="ignore"):
            step = dt * model.drift(t, x)
            if control is not None:
                u = control(t, x, y)
                step = step + dt * model.sigma_apply(t, x, model.sigma_transpose_apply(t, x, u))
            x = x + step + model.sigma_apply(t, x, noise[:, j])
        if not np.all(np.isfinite(x)):
            bad = np.flatnonzero(~np.isfinite(x).all(axis=-1))
            raise SimulationError(f"non-finite state at step {j + 1}", step=j + 1,
                                  path_index=int(bad[0]))
        states[:, j + 1] = x
    return states


def _check_x0(model, x0):
    x0 = np.asarray(x0, dtype=float)
    if x0.shape[-1:] != (model.dim,):
        raise ValueError(f"x0 must have length {model.dim}")
    return x0


def simulate_path(model: SdeModel, grid: TimeGrid, x0, seed: int,
                  noise: Optional[np.ndarray] = None) -> PathSample:
    """Simulate one path. ``noise`` overrides the seeded increments (test hook)."""
    x0 = _check_x0(model, x0)
    if noise is None:
        noise = path_noise(seed, grid, model.dim)
    noise = np.asarray(noise, dtype=float).reshape(grid.n_steps, model.dim)
    states = _integrate(model, grid, x0, noise[None])[0]
    return PathSample(grid, states, noise, int(seed) & _U64)


def batch_seeds(master_seed: int, n_paths: int) -> np.ndarray:
    return np.array([derive_seed(master_seed, "path", k) for k in range(n_paths)], dtype=np.uint64)


def simulate_batch(model: SdeModel, grid: TimeGrid, x0, n_paths: int, master_seed: int) -> PathBatch:
    """Simulate ``n_paths`` paths; path ``k`` uses ``derive_seed(master_seed, "path", k)``.

    ``x0`` may be a single state or one state per path.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    x0 = _check_x0(model, x0)
    seeds = batch_seeds(master_seed, n_paths)
    noise = np.stack([path_noise(s, grid, model.dim) for s in seeds])
    states = _integrate(model, grid, x0, noise)
    return PathBatch(grid, states, noise, seeds, master_seed, model.describe())


def replay(model: SdeModel, grid: TimeGrid, x0, noise) -> np.ndarray:
    """Re-integrate recorded noise; same batch shape gives bit-identical states."""
    noise = np.asarray(noise, dtype=float)
    single = noise.ndim == 2
    out = _integrate(model, grid, _check_x0(model, x0), noise[None] if single else noise)
    return out[0] if single else out


def dense_drift_jacobian(model: SdeModel, t, x) -> np.ndarray:
    """``grad b(t, x)`` as a dense ``n x n`` matrix, rows from transposed products."""
    eye = np.eye(model.dim)
    return np.stack([model.drift_grad_transpose_apply(t, x, e) for e in eye])


def dense_sigma_jacobian(model: SdeModel, t, x, db) -> np.ndarray:
    """x-derivative of ``x -> sigma(t, x) db`` as a dense matrix."""
    eye = np.eye(model.dim)
    return np.stack([model.sigma_grad_transpose_apply(t, x, e, db) for e in eye])


def jacobian_full(model: SdeModel, path: PathSample) -> np.ndarray:
    """Euler-Maruyama solution of the first variation, ``J[j] = J_{t_j | t_0}``.

    Dense ``(M+1, n, n)`` output; intended for small ``n`` test oracles.
    """
    grid = path.grid
    n = model.dim
    J = np.empty((grid.n_steps + 1, n, n))
    J[0] = np.eye(n)
    dt = grid.dt
    for j in range(grid.n_steps):
        t = grid.node(j)
        x = path.states[j]
        step = np.eye(n) + dt * dense_drift_jacobian(model, t, x)
        if not model.sigma_constant:
            step = step + dense_sigma_jacobian(model, t, x, path.noise[j])
        J[j + 1] = step @ J[j]
    return J


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_paths_csv(batch: PathBatch, path, noise_path=None, y: Optional[np.ndarray] = None):
    """Write states (``path_id,step,t,x_*[,y_*]``) and optionally noise (``path_id,step,db_*``)."""
    batch = as_batch(batch)
    n = batch.states.shape[-1]
    nodes = batch.grid.nodes
    yy = None
    if y is not None:
        yy = np.asarray(y, dtype=float)
        if yy.ndim == 1:
            yy = np.broadcast_to(yy, (batch.n_paths, yy.shape[0]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["path_id", "step", "t"] + [f"x_{i}" for i in range(n)]
        if yy is not None:
            header += [f"y_{i}" for i in range(yy.shape[1])]
        w.writerow(header)
        for k in range(batch.n_paths):
            tail = [_fmt(v) for v in yy[k]] if yy is not None else []
            for j, t in enumerate(nodes):
                w.writerow([k, j, _fmt(t)] + [_fmt(v) for v in batch.states[k, j]] + tail)
    if noise_path is not None:
        with open(noise_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "step"] + [f"db_{i}" for i in range(n)])
            for k in range(batch.n_paths):
                for j in range(batch.grid.n_steps):
                    w.writerow([k, j] + [_fmt(v) for v in batch.noise[k, j]])


def read_paths_csv(path) -> tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Read a path CSV back into ``(times, states, y)`` arrays."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    xcols = [i for i, h in enumerate(header) if h.startswith("x_")]
    ycols = [i for i, h in enumerate(header) if h.startswith("y_")]
    ids = np.array([int(r[0]) for r in body])
    n_paths = ids.max() + 1
    data = np.array([[float(r[i]) for i in xcols] for r in body]).reshape(n_paths, -1, len(xcols))
    times = np.array([float(r[2]) for r in body]).reshape(n_paths, -1)[0]
    y = None
    if ycols:
        y = np.array([[float(r[i]) for i in ycols] for r in body]).reshape(n_paths, -1, len(ycols))[:, 0]
    return times, data, y
