"""Fully connected control network with mirror skips, hand-written backprop and Adam."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "HIDDEN_WIDTHS",
    "DriftNet",
    "AdamState",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

HIDDEN_WIDTHS = (256, 128, 64, 32, 64, 128, 256)
_GELU_C = math.sqrt(2.0 / math.pi)


class CheckpointError(ValueError):
    pass


def _gelu(z, with_grad=True):
    """Tanh-form GELU and, optionally, its derivative; in-place to limit temporaries."""
    c = z.dtype.type(_GELU_C)
    a = z.dtype.type(0.044715)
    th = z * z
    th *= a * c
    th += c
    th *= z
    np.tanh(th, out=th)
    s = th + 1
    s *= 0.5
    h = s * z
    if not with_grad:
        return h, None
    # d/dz = s + 0.5 z (1 - th^2) c (1 + 3 a z^2), and 0.5 z (1 - th^2) = h (1 - th)
    q = z * z
    q *= 3 * a * c
    q += c
    np.subtract(1, th, out=th)
    th *= h
    th *= q
    th += s
    return h, th


def _skip_pairs(widths):
    """Map layer index -> earlier layer index with the mirrored width.

    Hidden layers are numbered 1..L after the projection (layer 0); layer
    ``L + 1 - i`` receives the output of layer ``i`` for the first half.
    """
    L = len(widths)
    pairs = {}
    for i in range(1, L // 2 + 1):
        j = L + 1 - i
        if j > i and widths[i - 1] == widths[j - 1]:
            pairs[j] = i
    return pairs


class DriftNet:
    """``u(t, x, y)`` on the concatenated input ``(t, x, y)``.

    A projection to the first hidden width, the listed hidden layers and a
    linear read-out to ``state_dim``. GELU (tanh form) activations; layers
    with mirrored widths are joined by additive skips.
    """

    def __init__(self, state_dim: int, obs_dim: int, widths: Sequence[int] = HIDDEN_WIDTHS,
                 seed: int = 0, zero_output: bool = False, dtype="float64"):
        if state_dim < 1 or obs_dim < 0:
            raise ValueError("invalid network dimensions")
        self.state_dim = int(state_dim)
        self.obs_dim = int(obs_dim)
        self.widths = tuple(int(w) for w in widths)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.in_dim = 1 + self.state_dim + self.obs_dim
        sizes = [self.in_dim, self.widths[0], *self.widths, self.state_dim]
        self.shapes = list(zip(sizes[:-1], sizes[1:]))
        self.skips = _skip_pairs(self.widths)
        self.n_params = sum(a * b + b for a, b in self.shapes)
        self.params = np.zeros(self.n_params, dtype=self.dtype)
        self._init(zero_output)

    def _init(self, zero_output):
        rng = np.random.Generator(np.random.Philox(key=self.seed))
        for k, (W, _) in enumerate(self.layers()):
            last = k == len(self.shapes) - 1
            if last and zero_output:
                continue
            fan_in = W.shape[0]
            W[...] = rng.standard_normal(W.shape) / math.sqrt(fan_in)

    def layers(self, vec=None):
        """Weight/bias views into ``vec`` (defaults to the parameters)."""
        vec = self.params if vec is None else vec
        out, off = [], 0
        for a, b in self.shapes:
            W = vec[off:off + a * b].reshape(a, b)
            off += a * b
            out.append((W, vec[off:off + b]))
            off += b
        return out

    def describe(self) -> str:
        return (f"driftnet state_dim={self.state_dim} obs_dim={self.obs_dim} "
                f"widths={','.join(map(str, self.widths))} activation=gelu_tanh dtype={self.dtype.name}")

    def copy(self) -> "DriftNet":
        twin = DriftNet.__new__(DriftNet)
        twin.__dict__.update(self.__dict__)
        twin.params = self.params.copy()
        return twin

    def assemble(self, t, x, y) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        y = np.asarray(y, dtype=float).reshape(-1, self.obs_dim) if self.obs_dim else np.zeros((n, 0))
        if x.shape[1] != self.state_dim:
            raise ValueError(f"x must have {self.state_dim} columns, got {x.shape[1]}")
        if y.shape[0] not in (1, n):
            raise ValueError("y rows must be 1 or match x")
        t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1, 1), (n, 1))
        return np.concatenate([t, x, np.broadcast_to(y, (n, self.obs_dim))], axis=1).astype(self.dtype)

    def forward(self, t, x, y) -> np.ndarray:
        """Network output; a single state gives a vector, a stack gives rows."""
        single = np.ndim(x) == 1
        out, _ = self._run(self.assemble(t, x, y), keep=False)
        return out[0] if single else out

    __call__ = forward

    def _run(self, inp, keep=True):
        layers = self.layers()
        h = inp
        hs, dhs = [inp], []
        n_layers = len(layers)
        for k, (W, b) in enumerate(layers):
            z = h @ W + b
            if k == n_layers - 1:
                h = z
                break
            h, dh = _gelu(z, with_grad=keep)
            if k in self.skips:
                h += hs[self.skips[k] + 1]
            if keep:
                dhs.append(dh)
            hs.append(h)
        return h, (hs, dhs) if keep else None

    def _backward(self, cache, gout, want_input=False):
        hs, dhs = cache
        layers = self.layers()
        grad = np.zeros_like(self.params)
        glayers = self.layers(grad)
        n_layers = len(layers)
        pending = {}
        g = gout.astype(self.dtype, copy=False)
        for k in range(n_layers - 1, -1, -1):
            W, _ = layers[k]
            gW, gb = glayers[k]
            if k < n_layers - 1:
                if k in pending:
                    g = g + pending.pop(k)
                if k in self.skips:
                    src = self.skips[k]
                    pending[src] = pending.get(src, 0) + g
                g = g * dhs[k]
            gW[...] = hs[k].T @ g
            gb[...] = g.sum(axis=0)
            if k > 0 or want_input:
                g = g @ W.T
        return (grad, g) if want_input else grad

    def loss_and_grad(self, inputs, targets):
        """Sum of squared residuals over rows, and its parameter gradient."""
        out, cache = self._run(inputs)
        resid = out - targets.astype(self.dtype, copy=False)
        loss = float(np.sum(np.square(resid, dtype=np.float64)))
        return loss, self._backward(cache, 2.0 * resid), resid

    def input_jacobian(self, t, x, y) -> np.ndarray:
        """Jacobian of the output with respect to ``(t, x, y)``: ``(n, 1 + n + d)``."""
        inp = self.assemble(t, x, y)[:1]
        _, cache = self._run(inp)
        rows = []
        for i in range(self.state_dim):
            e = np.zeros((1, self.state_dim), dtype=self.dtype)
            e[0, i] = 1.0
            rows.append(self._backward(cache, e, want_input=True)[1][0])
        return np.stack(rows)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Optional[np.ndarray] = field(default=None, repr=False)
    v: Optional[np.ndarray] = field(default=None, repr=False)
    step: int = 0

    @classmethod
    def for_params(cls, params, lr=1e-3):
        return cls(lr=lr, m=np.zeros_like(params), v=np.zeros_like(params))


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Bias-corrected Adam; updates ``params`` and ``state`` in place and returns params."""
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * grad
    state.v *= b2
    state.v += (1 - b2) * grad * grad
    mhat = state.m / (1 - b1 ** state.step)
    vhat = state.v / (1 - b2 ** state.step)
    params -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(params.dtype, copy=False)
    return params


_MAGIC = "# bridgescore checkpoint v1"


def save_checkpoint(net: DriftNet, path, steps: int = 0, meta: Optional[dict] = None):
    lines = [_MAGIC, "arch " + net.describe(), f"seed {net.seed}", f"steps {int(steps)}"]
    for key in sorted(meta or {}):
        lines.append(f"meta {key} {meta[key]}")
    lines.append(f"n_params {net.n_params}")
    lines.extend(format(float(v), ".17g") for v in net.params)
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_arch(text):
    fields = dict(item.split("=", 1) for item in text.split()[1:])
    return (int(fields["state_dim"]), int(fields["obs_dim"]),
            tuple(int(w) for w in fields["widths"].split(",")), fields["dtype"])


def load_checkpoint(path):
    """Returns ``(net, steps, meta)``."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not lines or lines[0] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    header, meta, i = {}, {}, 1
    while i < len(lines) and not lines[i].startswith("n_params"):
        key, _, rest = lines[i].partition(" ")
        if key == "meta":
            mk, _, mv = rest.partition(" ")
            meta[mk] = mv
        else:
            header[key] = rest
        i += 1
    if i == len(lines):
        raise CheckpointError(f"{path}: missing parameter block")
    count = int(lines[i].split()[1])
    values = lines[i + 1:i + 1 + count]
    if len(values) != count:
        raise CheckpointError(f"{path}: expected {count} parameters, found {len(values)}")
    state_dim, obs_dim, widths, dtype = _parse_arch(header["arch"])
    net = DriftNet(state_dim, obs_dim, widths, seed=int(header.get("seed", 0)),
                   zero_output=True, dtype=dtype)
    net.params[:] = np.array([float(v) for v in values], dtype=np.float64).astype(net.dtype)
    return net, int(header.get("steps", 0)), meta
