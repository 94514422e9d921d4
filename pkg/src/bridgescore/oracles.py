"""Reference solutions: closed-form bridge scores, Tweedie targets, the
double-well committor and the second moment of Brownian score estimators."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import integrate
from scipy.linalg import solve_banded
from scipy.special import ndtr

from .sde import TimeGrid, derive_seed
from .targets import GOLDEN, AlphaSchedule

__all__ = [
    "OracleError",
    "brownian_bridge_score",
    "ou_tweedie_score",
    "CommittorTable",
    "double_well_committor",
    "committor_score",
    "gaussian_ball_probability",
    "double_well_bridge_score",
    "SecondMomentFormula",
    "bel_second_moment_formula",
    "mc_second_moment",
    "exact_second_moment",
    "bridge_second_moment",
]


class OracleError(ArithmeticError):
    pass


def brownian_bridge_score(t, x, y, T: float = 1.0):
    """``(y - x) / (T - t)``."""
    t = np.asarray(t, dtype=float)
    if np.any(t >= T):
        raise ValueError("bridge score is undefined for t >= T")
    return (np.asarray(y, dtype=float) - np.asarray(x, dtype=float)) / (T - t)


def ou_tweedie_score(t, x, x0):
    """``(x - e^{-t/2} x0) / (1 - e^{-t})`` for the unit-volatility OU with rate 1/2."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("Tweedie target is undefined at t = 0")
    return (np.asarray(x, dtype=float) - np.exp(-t / 2) * np.asarray(x0, dtype=float)) / (-np.expm1(-t))


def gaussian_ball_probability(x, var, centre=-1.0, r=0.1, mollify=None):
    """``P(|x + N(0, var + mollify^2) - centre| <= r)``; the v = 0 committor."""
    s = r / 2 if mollify is None else mollify
    sd = np.sqrt(np.asarray(var, dtype=float) + s * s)
    x = np.asarray(x, dtype=float)
    return ndtr((centre + r - x) / sd) - ndtr((centre - r - x) / sd)


@dataclass
class CommittorTable:
    """``values[j, k]`` approximates ``f(t_j, x_k)`` on a uniform space-time grid."""

    x: np.ndarray
    t: np.ndarray
    values: np.ndarray
    r: float
    v: float
    target: float = -1.0

    @property
    def dx(self):
        return (self.x[-1] - self.x[0]) / (self.x.size - 1)

    @property
    def dt(self):
        return (self.t[-1] - self.t[0]) / (self.t.size - 1)

    def _locate(self, t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        if np.any(t < self.t[0]) or np.any(t > self.t[-1]):
            raise ValueError("time outside committor table")
        if np.any(x < self.x[0]) or np.any(x > self.x[-1]):
            raise ValueError("state outside committor table")
        ft = (t - self.t[0]) / self.dt
        fx = (x - self.x[0]) / self.dx
        jt = np.clip(np.floor(ft).astype(int), 0, self.t.size - 2)
        jx = np.clip(np.floor(fx).astype(int), 0, self.x.size - 2)
        return jt, ft - jt, jx, fx - jx

    @staticmethod
    def _bilinear(table, jt, wt, jx, wx):
        a = table[jt, jx] * (1 - wx) + table[jt, jx + 1] * wx
        b = table[jt + 1, jx] * (1 - wx) + table[jt + 1, jx + 1] * wx
        return a * (1 - wt) + b * wt

    def value(self, t, x):
        return self._bilinear(self.values, *self._locate(t, x))

    def log_gradient_table(self, floor: float = 1e-300) -> np.ndarray:
        cached = getattr(self, "_dlog", None)
        if cached is not None:
            return cached
        f = np.maximum(self.values, floor)
        g = np.gradient(f, self.dx, axis=1)  # centred inside, one-sided at the edges
        self._dlog = g / f
        return self._dlog

    def save(self, path):
        lines = [
            "# committor table v1",
            f"v {self.v!r}",
            f"r {self.r!r}",
            f"target {self.target!r}",
            f"x {float(self.x[0])!r} {float(self.x[-1])!r} {self.x.size}",
            f"t {float(self.t[0])!r} {float(self.t[-1])!r} {self.t.size}",
        ]
        lines.extend(" ".join(format(v, ".17g") for v in row) for row in self.values)
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "CommittorTable":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != "# committor table v1":
            raise ValueError(f"{path}: not a committor table")
        head = {}
        for line in lines[1:6]:
            key, *rest = line.split()
            head[key] = rest
        x = np.linspace(float(head["x"][0]), float(head["x"][1]), int(head["x"][2]))
        t = np.linspace(float(head["t"][0]), float(head["t"][1]), int(head["t"][2]))
        values = np.array([[float(v) for v in row.split()] for row in lines[6:6 + t.size]])
        if values.shape != (t.size, x.size):
            raise ValueError(f"{path}: table shape {values.shape} does not match header")
        return cls(x, t, values, float(head["r"][0]), float(head["v"][0]), float(head["target"][0]))


def _generator_bands(x, v, dx):
    """Banded form of ``L f = b f' + f''/2`` with reflecting ends."""
    b = -4.0 * v * x * (x * x - 1.0)
    diff = 0.5 / dx ** 2
    adv = b / (2 * dx)
    lower = diff - adv  # coefficient of f_{k-1}
    upper = diff + adv  # coefficient of f_{k+1}
    main = np.full(x.size, -2 * diff)
    # ghost nodes mirror the interior neighbour
    upper[0] = 2 * diff
    lower[-1] = 2 * diff
    return lower, main, upper


def double_well_committor(v: float = 5.0, x_min: float = -2.5, x_max: float = 2.5, n_x: int = 801,
                          n_t: int = 2000, r: float = 0.1, target: float = -1.0, T: float = 1.0,
                          startup_steps: int = 0) -> CommittorTable:
    """Backward Kolmogorov solve for ``f(t, x) = P(X_T near target | X_t = x)``.

    Crank-Nicolson in time on central differences in space with reflecting
    boundaries. The terminal indicator of ``[target - r, target + r]`` is
    mollified by a Gaussian of width ``r / 2``. The first ``startup_steps``
    half-steps are backward Euler to damp the stiff modes of the terminal
    data.
    """
    if n_x < 3 or n_t < 1:
        raise ValueError("committor grid too small")
    if v < 0 or r <= 0:
        raise ValueError("need v >= 0 and r > 0")
    x = np.linspace(x_min, x_max, n_x)
    t = np.linspace(0.0, T, n_t + 1)
    dx = x[1] - x[0]
    dt = T / n_t
    lower, main, upper = _generator_bands(x, v, dx)

    def apply_L(f):
        out = main * f
        out[1:] += lower[1:] * f[:-1]
        out[:-1] += upper[:-1] * f[1:]
        return out

    def implicit_matrix(theta_dt):
        ab = np.zeros((3, n_x))
        ab[0, 1:] = -theta_dt * upper[:-1]
        ab[1] = 1.0 - theta_dt * main
        ab[2, :-1] = -theta_dt * lower[1:]
        return ab

    # I - dt/2 L serves both the Crank-Nicolson step and a backward Euler half-step
    lhs = implicit_matrix(0.5 * dt)
    values = np.empty((n_t + 1, n_x))
    f = gaussian_ball_probability(x, 0.0, centre=target, r=r)
    values[n_t] = f
    half_left = startup_steps
    for j in range(n_t - 1, -1, -1):
        if half_left > 0:
            for _ in range(2):
                f = solve_banded((1, 1), lhs, f)
            half_left -= 2
        else:
            f = solve_banded((1, 1), lhs, f + 0.5 * dt * apply_L(f))
        if f.min() < -1e-6 or f.max() > 1 + 1e-6 or not np.all(np.isfinite(f)):
            raise OracleError(f"committor solve unstable at t = {t[j]!r}")
        values[j] = f
    # far-field terminal data underflows to zero; keep the table strictly positive
    np.maximum(values, np.finfo(float).tiny, out=values)
    return CommittorTable(x, t, values, float(r), float(v), float(target))


def committor_score(table: CommittorTable, t, x):
    """``d/dx log f`` by centred differences on the table and bilinear interpolation."""
    return table._bilinear(table.log_gradient_table(), *table._locate(t, x))


def double_well_bridge_score(table: CommittorTable, t, x, y):
    """Coordinatewise oracle score for a double-well bridge towards ``y`` in ``{-1, +1}^n``.

    ``table`` targets ``-1``; coordinates aiming at ``+1`` use the mirrored
    table, ``score(x | +1) = -score(-x | -1)``.
    """
    x = np.asarray(x, dtype=float)
    y = np.broadcast_to(np.asarray(y, dtype=float), x.shape)
    sign = np.where(y > 0, -1.0, 1.0)
    if table.target > 0:
        sign = -sign
    tt = np.broadcast_to(np.asarray(t, dtype=float), x.shape)
    xs = np.clip(sign * x, table.x[0], table.x[-1])
    tt = np.minimum(tt, table.t[-1])
    return sign * committor_score(table, tt, xs)


@dataclass
class SecondMomentFormula:
    value: float
    alpha_sq_integral: float
    tail_integral: float
    d_term: float
    boundary_ok: bool


def _unit_parts(schedule: AlphaSchedule, T=1.0):
    """Normalised ``alpha'`` and ``alpha_1 - alpha_t``, both as callables on ``[0, 1]``."""
    total = float(schedule.normaliser(0.0))
    if not total > 0:
        raise ValueError("schedule has zero total weight")

    def aprime(t):
        return float(schedule.aprime(t, 0.0)) / total

    def tail(t):
        return float(schedule.alpha(T, 0.0) - schedule.alpha(t, 0.0)) / total

    return aprime, tail


def bel_second_moment_formula(schedule: AlphaSchedule, d: float, grid: Optional[TimeGrid] = None) -> SecondMomentFormula:
    """``int (alpha')^2 + int (alpha_1 - alpha_t)^2 / (1 - t)^2 + d^2`` with ``alpha_1 - alpha_0 = 1``.

    Window schedules resolve their default width on ``grid`` (200 steps
    if omitted). Closed forms for average, optimal, first and last;
    adaptive quadrature for custom tables.
    """
    grid = grid or TimeGrid(0.0, 1.0, 200)
    if grid.t_start != 0.0 or grid.t_end != 1.0:
        raise ValueError("the second-moment formula is stated on [0, 1]")
    sched = schedule.resolved(grid)
    kind = sched.kind
    if kind == "average":
        i1, i2 = 1.0, 1.0
    elif kind == "optimal_bm":
        i1 = GOLDEN ** 2 / (2 * GOLDEN - 1)
        i2 = 1.0 / (2 * GOLDEN - 1)
    elif kind == "last":
        w = min(sched.width, 1.0)
        i1 = 1.0 / w
        i2 = (1.0 / w - 1.0) + 1.0 / w
    elif kind == "first":
        w = min(sched.width, 1.0)
        i1 = 1.0 / w
        # int_0^w (w - t)^2 / (w (1 - t))^2 dt
        i2 = integrate.quad(lambda t: ((w - t) / (w * (1 - t))) ** 2, 0.0, w)[0]
    else:
        aprime, tail = _unit_parts(sched)
        nodes = list(np.linspace(0.0, 1.0, len(sched.table)))
        i1 = integrate.quad(lambda t: aprime(t) ** 2, 0.0, 1.0, points=nodes[1:-1], limit=4 * len(nodes))[0]
        i2 = integrate.quad(lambda t: (tail(t) / (1 - t)) ** 2, 0.0, 1.0,
                            points=nodes[1:-1], limit=4 * len(nodes))[0]
    tail_fn = _unit_parts(sched)[1]
    # (alpha_1 - alpha_s) / sqrt(1 - s) must vanish as s -> 1
    ratios = [tail_fn(1.0 - h) / math.sqrt(h) for h in (1e-8, 1e-12)]
    boundary_ok = bool(ratios[1] <= ratios[0] and ratios[1] < 1e-2)
    return SecondMomentFormula(float(i1 + i2 + d * d), float(i1), float(i2), float(d * d), boundary_ok)


def _unit_cell_weights(schedule: AlphaSchedule, grid: TimeGrid) -> np.ndarray:
    c = schedule.resolved(grid).cell_weights(grid)
    return c / (c.sum() * grid.dt)


def mc_second_moment(schedule: AlphaSchedule, d: float, n_samples: int, seed: int,
                     n_steps: int = 500, chunk: int = 10000):
    """Monte Carlo ``E |sum_k alpha'_k dB_k|^2`` under the Brownian bridge from 0 to ``d``.

    Bridge increments come from ``B_t = W_t - t W_1 + t d``. Returns
    ``(estimate, standard_error)``.
    """
    grid = TimeGrid(0.0, 1.0, n_steps)
    c = _unit_cell_weights(schedule, grid)
    dt = grid.dt
    total = np.empty(n_samples)
    done = 0
    block = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        rng = np.random.Generator(np.random.Philox(key=derive_seed(seed, "second-moment", block)))
        dW = rng.standard_normal((m, n_steps)) * math.sqrt(dt)
        W1 = dW.sum(axis=1, keepdims=True)
        dB = dW - dt * W1 + dt * d
        total[done:done + m] = (dB @ c) ** 2
        done += m
        block += 1
    return float(total.mean()), float(total.std(ddof=1) / math.sqrt(n_samples))


def exact_second_moment(schedule: AlphaSchedule, d: float, n_steps: int = 500) -> float:
    """Exact discrete counterpart of :func:`mc_second_moment`.

    With weights ``c_k`` summing to one, ``sum c_k dW_k - W_1`` is centred
    Gaussian with variance ``dt sum c_k^2 - 1``.
    """
    grid = TimeGrid(0.0, 1.0, n_steps)
    c = _unit_cell_weights(schedule, grid)
    return float(grid.dt * np.sum(c * c) - (grid.dt * c.sum()) ** 2 + d * d)


def bridge_second_moment(schedule: AlphaSchedule, d: float, grid: Optional[TimeGrid] = None) -> float:
    """Continuous-time second moment of the ``s = 0`` estimator under the bridge.

    Writing the bridge increments as ``dW + (d - B_t) / (1 - t) dt`` gives
    ``d^2 + int (alpha'_t - (alpha_1 - alpha_t) / (1 - t))^2 dt``, which
    keeps the cross term that :func:`bel_second_moment_formula` omits.
    """
    grid = grid or TimeGrid(0.0, 1.0, 200)
    sched = schedule.resolved(grid)
    aprime, tail = _unit_parts(sched)
    points = [sched.width, 1.0 - sched.width] if sched.kind in ("first", "last") else None

    def integrand(t):
        return (aprime(t) - tail(t) / (1.0 - t)) ** 2

    value = integrate.quad(integrand, 0.0, 1.0, points=points, limit=400)[0]
    return float(value + d * d)
