"""Malliavin regression targets for conditional scores.

The adjoint route propagates ``J^T (sigma^T)^{-1} dB`` backwards along a
recorded path using transposed Jacobian-vector products only. Alternative
target rules (reparametrised, one-step Gaussian, unconditional score) share
the same path data.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .sde import PathBatch, PathSample, SdeModel, TimeGrid, as_batch

__all__ = [
    "GOLDEN",
    "TargetError",
    "DegenerateScheduleError",
    "AlphaSchedule",
    "ScoreTargetSet",
    "backward_differences",
    "adjoint_score_targets",
    "reparam_score_targets",
    "gaussian_step_target",
    "gaussian_step_targets",
    "unconditional_score_targets",
    "tweedie_schedule",
    "complement_power_aprime",
    "compute_targets",
    "write_targets_csv",
]

GOLDEN = 0.5 * (1.0 + math.sqrt(5.0))

_KINDS = ("average", "first", "last", "optimal_bm", "custom")


class TargetError(ArithmeticError):
    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class DegenerateScheduleError(TargetError):
    pass


@dataclass(frozen=True)
class AlphaSchedule:
    """Scalar weighting ``alpha'`` of the noise increments.

    ``first`` and ``last`` use a window of ``width`` (one grid step when
    left as ``None``); ``first`` is measured from the query time. ``custom``
    holds ``alpha'`` sampled on the nodes of a uniform grid starting at
    ``t_start`` and ending at ``T``.
    """

    kind: str = "average"
    width: Optional[float] = None
    table: Optional[tuple] = None
    T: float = 1.0
    t_start: float = 0.0

    def __post_init__(self):
        kind = self.kind.lower().replace("-", "_")
        kind = {"optimal": "optimal_bm", "optimalbm": "optimal_bm"}.get(kind, kind)
        if kind not in _KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.width is not None and not self.width > 0:
            raise ValueError("schedule width must be positive")
        if kind == "custom":
            if self.table is None or len(self.table) < 2:
                raise ValueError("custom schedule needs a table of alpha' values")
            table = tuple(float(v) for v in self.table)
            if min(table) < 0:
                raise ValueError("alpha' values must be non-negative")
            object.__setattr__(self, "table", table)

    # constructors
    @classmethod
    def average(cls, T=1.0):
        return cls("average", T=T)

    @classmethod
    def first(cls, width=None, T=1.0):
        return cls("first", width=width, T=T)

    @classmethod
    def last(cls, width=None, T=1.0):
        return cls("last", width=width, T=T)

    @classmethod
    def optimal_bm(cls, T=1.0):
        return cls("optimal_bm", T=T)

    @classmethod
    def custom(cls, grid: TimeGrid, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (grid.n_steps + 1,):
            raise ValueError("custom table needs one alpha' value per grid node")
        return cls("custom", table=tuple(values), T=grid.t_end, t_start=grid.t_start)

    @classmethod
    def from_function(cls, grid: TimeGrid, fn: Callable):
        return cls.custom(grid, [fn(t) for t in grid.nodes])

    def describe(self) -> str:
        if self.kind in ("first", "last"):
            return f"{self.kind}({self.width if self.width is not None else 'dt'})"
        return self.kind

    def resolved(self, grid: TimeGrid) -> "AlphaSchedule":
        """Pin the window width and horizon to ``grid``."""
        sched = self
        if self.T != grid.t_end and self.kind != "custom":
            sched = replace(sched, T=grid.t_end)
        if self.kind in ("first", "last") and self.width is None:
            sched = replace(sched, width=grid.dt)
        return sched

    def _window(self):
        if self.width is None:
            raise ValueError("window width unresolved; call resolved(grid) first")
        return self.width

    def _custom_nodes(self):
        return np.linspace(self.t_start, self.T, len(self.table))

    def aprime(self, t, s: float = 0.0):
        """Pointwise ``alpha'(t)``; ``s`` is the query time (``first`` only)."""
        t = np.asarray(t, dtype=float)
        T = self.T
        if self.kind == "average":
            return np.ones_like(t)
        if self.kind == "first":
            w = self._window()
            return ((t >= s) & (t < s + w)).astype(float)
        if self.kind == "last":
            w = self._window()
            return ((t >= T - w) & (t < T)).astype(float)
        if self.kind == "optimal_bm":
            u = np.clip(1.0 - t / T, 0.0, None)
            return GOLDEN * u ** (GOLDEN - 1.0)
        return np.interp(t, self._custom_nodes(), self.table)

    def alpha(self, t, s: float = 0.0):
        """An antiderivative of ``alpha'`` (relative to ``s`` for ``first``)."""
        t = np.asarray(t, dtype=float)
        T = self.T
        if self.kind == "average":
            return t.copy()
        if self.kind == "first":
            return np.clip(t - s, 0.0, self._window())
        if self.kind == "last":
            return np.clip(t - (T - self._window()), 0.0, None)
        if self.kind == "optimal_bm":
            return T - T * np.clip(1.0 - t / T, 0.0, None) ** GOLDEN
        nodes = self._custom_nodes()
        vals = np.asarray(self.table)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(nodes) * (vals[1:] + vals[:-1]))])
        return np.interp(t, nodes, cum)

    def normaliser(self, s):
        """``A(s) = alpha_T - alpha_s``."""
        s = np.asarray(s, dtype=float)
        T = self.T
        if self.kind == "average":
            return T - s
        if self.kind == "first":
            return np.minimum(self._window(), T - s)
        if self.kind == "last":
            return np.minimum(self._window(), T - s)
        if self.kind == "optimal_bm":
            return T * np.clip(1.0 - s / T, 0.0, None) ** GOLDEN
        return self.alpha(T) - self.alpha(s)

    def cell_weights(self, grid: TimeGrid, s: float = 0.0) -> np.ndarray:
        """Cell averages of ``alpha'`` over the grid steps.

        Weighting increment ``k`` by ``(alpha(t_{k+1}) - alpha(t_k)) / dt``
        makes the discrete weights sum exactly to the normaliser.
        """
        a = self.alpha(grid.nodes, s)
        return np.diff(a) / grid.dt


def complement_power_aprime(t, T: float = 1.0):
    """``1 - (1 - t/T)^golden``: an alternative weighting exposed for comparison."""
    return 1.0 - np.clip(1.0 - np.asarray(t, dtype=float) / T, 0.0, None) ** GOLDEN


@dataclass
class ScoreTargetSet:
    grid: TimeGrid
    targets: np.ndarray  # (n_paths, M, n); node M is never a target
    schedule: str
    source: str  # adjoint | reparam | gaussian_step | unconditional

    @property
    def n_paths(self):
        return self.targets.shape[0]

    def for_path(self, k):
        return self.targets[k]


def _jac_T(model: SdeModel, t, x, db, w, dt):
    """``(Id + dt grad b + grad(sigma db))^T w``, the transposed Euler Jacobian step."""
    out = w + dt * model.drift_grad_transpose_apply(t, x, w)
    if not model.sigma_constant:
        out = out + model.sigma_grad_transpose_apply(t, x, w, db)
    return out


def _check_finite(arr, what, step):
    if not np.all(np.isfinite(arr)):
        raise TargetError(f"non-finite {what} at step {step}", step=step)


def backward_differences(model: SdeModel, path):
    """Adjoint recursion on a recorded path.

    Returns ``(D, S_tilde)`` with ``D[:, j]`` the difference terms and
    ``S_tilde[:, j] = sum_{k >= j} D[:, k]`` (``S_tilde[:, M] = 0``).
    Shapes ``(n_paths, M, n)`` and ``(n_paths, M + 1, n)``; a single
    PathSample gives a leading axis of one.
    """
    batch = as_batch(path)
    grid = batch.grid
    M, dt = grid.n_steps, grid.dt
    X, dB = batch.states, batch.noise
    D = np.empty_like(dB)
    S = np.zeros(X.shape)
    for j in range(M - 1, -1, -1):
        t = grid.node(j)
        x, db, s_next = X[:, j], dB[:, j], S[:, j + 1]
        grad_part = dt * model.drift_grad_transpose_apply(t, x, s_next)
        if not model.sigma_constant:
            grad_part = grad_part + model.sigma_grad_transpose_apply(t, x, s_next, db)
        d = grad_part + model.sigma_inv_transpose_apply(t, x, db)
        _check_finite(d, "difference term", j)
        D[:, j] = d
        S[:, j] = s_next + d
    return D, S


def _normalisers(schedule: AlphaSchedule, grid: TimeGrid) -> np.ndarray:
    A = np.asarray(schedule.normaliser(grid.nodes[:-1]), dtype=float)
    bad = np.flatnonzero(A < 1e-12)
    if bad.size:
        j = int(bad[0])
        raise DegenerateScheduleError(
            f"schedule normaliser vanishes at t_{j} = {grid.node(j)!r}", step=j)
    return A


def adjoint_score_targets(model: SdeModel, path, schedule: AlphaSchedule,
                          literal_sum: bool = False) -> ScoreTargetSet:
    """Score-process targets ``S_{t_j}`` for every node ``j < M``.

    Global schedules run one backward sweep of the weighted adjoint
    ``W_j = E_j^T W_{j+1} + c_j (sigma^T)^{-1} dB_j`` where ``E_j`` is the
    Euler step of the first variation and ``c_j`` the cell weight, so
    ``W_j = sum_k c_k J_{t_k|t_j}^T (sigma^T)^{-1} dB_k``. For the uniform
    weighting this equals the summed difference terms exactly.

    ``literal_sum=True`` instead forms ``sum_k c_k D_k`` from
    :func:`backward_differences`, which only represents the score
    process when the weights are constant.

    The ``first`` window weights each increment with the drift part of its
    own Euler step, ``(Id + dt grad b^T)``; with constant volatility this is
    the exact score of the one-step Gaussian transition.
    """
    batch = as_batch(path)
    grid = batch.grid
    sched = schedule.resolved(grid)
    A = _normalisers(sched, grid)
    if sched.kind == "first":
        out = _first_window_targets(model, batch, sched) / A[None, :, None]
    elif literal_sum:
        c = sched.cell_weights(grid)
        D, _ = backward_differences(model, batch)
        R = np.cumsum((c[None, :, None] * D)[:, ::-1], axis=1)[:, ::-1]
        out = R / A[None, :, None]
    else:
        out = _weighted_sweep(model, batch, sched.cell_weights(grid)) / A[None, :, None]
    _check_finite(out, "target", -1)
    return ScoreTargetSet(grid, out, sched.describe(), "adjoint")


def _weighted_sweep(model, batch: PathBatch, c: np.ndarray) -> np.ndarray:
    grid = batch.grid
    M, dt = grid.n_steps, grid.dt
    X, dB = batch.states, batch.noise
    out = np.empty_like(dB)
    W = np.zeros_like(dB[:, 0])
    for j in range(M - 1, -1, -1):
        t = grid.node(j)
        x, db = X[:, j], dB[:, j]
        W = _jac_T(model, t, x, db, W, dt) + c[j] * model.sigma_inv_transpose_apply(t, x, db)
        _check_finite(W, "adjoint state", j)
        out[:, j] = W
    return out


def _first_window_targets(model, batch: PathBatch, sched: AlphaSchedule) -> np.ndarray:
    grid = batch.grid
    M, dt = grid.n_steps, grid.dt
    m = int(round(sched.width / dt))
    if m < 1 or abs(m * dt - sched.width) > 1e-9 * max(1.0, sched.width):
        raise ValueError("first-window width must be a whole number of grid steps")
    X, dB = batch.states, batch.noise
    t_all = grid.nodes[:-1][:, None]
    x_all = X[:, :-1]
    v = model.sigma_inv_transpose_apply(t_all, x_all, dB)
    G = v + dt * model.drift_grad_transpose_apply(t_all, x_all, v)
    W = np.zeros_like(dB)
    for r in range(min(m, M) - 1, -1, -1):
        # windows starting at j = 0..M-1-r absorb increment k = j + r
        k = slice(r, M)
        j = slice(0, M - r)
        W[:, j] = _jac_T(model, t_all[k], X[:, k], dB[:, k], W[:, j], dt) + G[:, k]
    return W


def _scalar_m(grid: TimeGrid):
    span = grid.t_end - grid.t_start

    def m(t):
        return (grid.t_end - np.asarray(t, dtype=float)) / span

    def m_prime(t):
        return np.full_like(np.asarray(t, dtype=float), -1.0 / span)

    return m, m_prime


def reparam_score_targets(model: SdeModel, path, m_schedule=None, literal: bool = False) -> ScoreTargetSet:
    """Reparametrised targets with a scalar weight ``M_t Id``.

    ``m_schedule`` is a pair ``(m, m_prime)`` of callables with ``m`` equal
    to one at the grid start and zero at the end; the default is linear
    decay. Targets are left-normalised by ``1 / m(t_j)`` unless ``literal``.
    """
    batch = as_batch(path)
    grid = batch.grid
    m, m_prime = m_schedule if m_schedule is not None else _scalar_m(grid)
    M, dt = grid.n_steps, grid.dt
    X, dB = batch.states, batch.noise
    t_all = grid.nodes[:-1]
    mk = np.asarray(m(t_all), dtype=float)
    mpk = np.asarray(m_prime(t_all), dtype=float)
    v = model.sigma_inv_transpose_apply(t_all[:, None], X[:, :-1], dB)
    integrand = mk[None, :, None] * model.drift_grad_transpose_apply(t_all[:, None], X[:, :-1], v) \
        - mpk[None, :, None] * v
    R = np.cumsum(integrand[:, ::-1], axis=1)[:, ::-1]
    if not literal:
        tiny = np.flatnonzero(np.abs(mk) < 1e-12)
        if tiny.size:
            raise TargetError(f"reparametrisation weight singular at step {tiny[0]}", step=int(tiny[0]))
        R = R / mk[None, :, None]
    _check_finite(R, "target", -1)
    return ScoreTargetSet(grid, R, "reparam" + ("-literal" if literal else ""), "reparam")


def gaussian_step_target(model: SdeModel, path, j: int) -> np.ndarray:
    """Score in ``x_{t_j}`` of the Euler transition density to ``x_{t_{j+1}}``.

    ``(Id + dt grad b^T) a^{-1} (x_{j+1} - x_j - dt b) / dt`` with ``a``
    frozen at ``x_j``. Returns shape ``(n,)`` for a PathSample and
    ``(n_paths, n)`` for a batch.
    """
    single = isinstance(path, PathSample)
    batch = as_batch(path)
    grid = batch.grid
    if not 0 <= j < grid.n_steps:
        raise IndexError(f"step index {j} outside 0..{grid.n_steps - 1}")
    out = _gaussian_steps(model, batch, np.array([j]))[:, 0]
    return out[0] if single else out


def _gaussian_steps(model, batch: PathBatch, js: np.ndarray) -> np.ndarray:
    grid = batch.grid
    dt = grid.dt
    t = grid.nodes[js][:, None]
    x = batch.states[:, js]
    resid = batch.states[:, js + 1] - x - dt * model.drift(t, x)
    try:
        z = model.sigma_inv_transpose_apply(t, x, model.sigma_inv_apply(t, x, resid))
    except np.linalg.LinAlgError as exc:
        raise TargetError(f"singular diffusion matrix: {exc}") from exc
    out = (z + dt * model.drift_grad_transpose_apply(t, x, z)) / dt
    _check_finite(out, "gaussian-step target", int(js[0]))
    return out


def gaussian_step_targets(model: SdeModel, path) -> ScoreTargetSet:
    batch = as_batch(path)
    out = _gaussian_steps(model, batch, np.arange(batch.grid.n_steps))
    return ScoreTargetSet(batch.grid, out, "first(dt)", "gaussian_step")


def _jacobians(model: SdeModel, batch: PathBatch, upto: int) -> np.ndarray:
    """Batched dense ``J_{t_k | t_0}`` for ``k = 0..upto``: ``(n_paths, upto+1, n, n)``."""
    grid = batch.grid
    n = model.dim
    dt = grid.dt
    B = batch.n_paths
    J = np.empty((B, upto + 1, n, n))
    J[:, 0] = np.eye(n)
    eye = np.eye(n)
    for k in range(upto):
        t = grid.node(k)
        x = batch.states[:, k]
        # rows of the Euler step from transposed products on basis vectors
        rows = []
        for e in eye:
            e_b = np.broadcast_to(e, x.shape)
            rows.append(_jac_T(model, t, x, batch.noise[:, k], e_b, dt))
        E = np.stack(rows, axis=1)  # E[b, i, :] = E^T e_i = i-th row of E
        J[:, k + 1] = E @ J[:, k]
    return J


def unconditional_score_targets(model: SdeModel, path, schedule, t_index: int,
                                cond_limit: float = 1e12) -> np.ndarray:
    """Targets whose conditional mean given ``X_t`` is ``grad log p_t``.

    ``J_{t|0}^{-T} sum_{k < t_index} c_k J_{t_k|0}^T (sigma^T)^{-1} dB_k`` with
    the weights ``c_k`` rescaled so that ``sum_k c_k dt = 1`` on ``[t_0, t]``.
    ``schedule`` is an AlphaSchedule (cell-averaged) or a callable ``alpha'(s)``
    sampled at left endpoints. Requires constant volatility.
    """
    if not model.sigma_constant:
        raise ValueError("unconditional score targets require constant volatility")
    single = isinstance(path, PathSample)
    batch = as_batch(path)
    grid = batch.grid
    if not 1 <= t_index <= grid.n_steps:
        raise IndexError("t_index must lie in 1..M")
    if isinstance(schedule, AlphaSchedule):
        c = schedule.resolved(grid).cell_weights(grid)[:t_index]
    else:
        c = np.asarray([schedule(t) for t in grid.nodes[:t_index]], dtype=float)
    total = c.sum() * grid.dt
    if not total > 0:
        raise DegenerateScheduleError("unconditional weights integrate to zero")
    c = c / total
    J = _jacobians(model, batch, t_index)
    X, dB = batch.states, batch.noise
    acc = np.zeros((batch.n_paths, model.dim))
    for k in range(t_index):
        v = model.sigma_inv_transpose_apply(grid.node(k), X[:, k], dB[:, k])
        acc += c[k] * np.einsum("bji,bj->bi", J[:, k], v)
    Jt = J[:, t_index]
    cond = np.linalg.cond(Jt)
    if np.any(~np.isfinite(cond)) or np.any(cond > cond_limit):
        raise TargetError("Jacobian J_{t|0} numerically singular", step=t_index)
    out = np.linalg.solve(np.swapaxes(Jt, -1, -2), acc[..., None])[..., 0]
    return out[0] if single else out


def tweedie_schedule(grid: TimeGrid, t: float) -> AlphaSchedule:
    """Weights ``alpha'(s) = exp(s - t)`` on ``[t_start, t]`` (rescaled on use)."""
    return AlphaSchedule.custom(grid, np.exp(grid.nodes - t))


def compute_targets(model: SdeModel, path, rule: str, schedule: Optional[AlphaSchedule] = None,
                    clip: Optional[float] = None) -> ScoreTargetSet:
    """Dispatch by rule name: ``adjoint``, ``reparam`` or ``gaussian_step``."""
    rule = rule.lower()
    if rule == "adjoint":
        ts = adjoint_score_targets(model, path, schedule or AlphaSchedule.average())
    elif rule == "reparam":
        ts = reparam_score_targets(model, path)
    elif rule in ("gaussian_step", "gaussian"):
        ts = gaussian_step_targets(model, path)
    else:
        raise ValueError(f"unknown target rule {rule!r}")
    if clip is not None:
        norms = np.linalg.norm(ts.targets, axis=-1, keepdims=True)
        scale = np.minimum(1.0, clip / np.maximum(norms, 1e-300))
        ts = ScoreTargetSet(ts.grid, ts.targets * scale, ts.schedule, ts.source)
    return ts


def write_targets_csv(target_set: ScoreTargetSet, path):
    n = target_set.targets.shape[-1]
    nodes = target_set.grid.nodes
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "step", "t"] + [f"s_{i}" for i in range(n)])
        for k in range(target_set.n_paths):
            for j in range(target_set.grid.n_steps):
                w.writerow([k, j, format(nodes[j], ".17g")]
                           + [format(float(v), ".17g") for v in target_set.targets[k, j]])
