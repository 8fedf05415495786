"""Bias-free 4-layer MLP with hand-written backprop, Adam, and a binary checkpoint format."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import INPUT_DIM

log = logging.getLogger(__name__)

HIDDEN = 128
MAGIC = b"NASGNET1"


class NonFiniteOutput(FloatingPointError):
    def __init__(self, rows):
        self.rows = np.asarray(rows)
        super().__init__(f"non-finite network output in batch rows {self.rows[:8].tolist()}")


def output_dim(n_components: int) -> int:
    return 8 * n_components + 1


@dataclass
class NetworkParameters:
    weights: list  # [W1 (64x128), W2, W3 (128x128), W4 (128xd)]

    @classmethod
    def init(cls, out_dim: int, rng: np.random.Generator, dtype=np.float32, out_scale: float = 0.1):
        """He-style uniform fan-in init; the output layer is scaled down so the
        initial raw outputs sit near zero."""
        dims = [INPUT_DIM, HIDDEN, HIDDEN, HIDDEN, out_dim]
        ws = []
        for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
            bound = np.sqrt(6.0 / fi)
            w = rng.uniform(-bound, bound, size=(fi, fo))
            if i == 3:
                w *= out_scale
            ws.append(w.astype(dtype))
        return cls(ws)

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def copy(self) -> "NetworkParameters":
        return NetworkParameters([w.copy() for w in self.weights])

    def snapshot(self) -> "NetworkParameters":
        """Read-only copy for inference; later training does not touch it."""
        ws = [w.copy() for w in self.weights]
        for w in ws:
            w.flags.writeable = False
        return NetworkParameters(ws)

    def astype(self, dtype) -> "NetworkParameters":
        return NetworkParameters([w.astype(dtype) for w in self.weights])

    def save(self, path, n_components: int) -> None:
        dims = [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", n_components, len(dims)))
            f.write(struct.pack(f"<{len(dims)}I", *dims))
            for w in self.weights:
                f.write(np.ascontiguousarray(w, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path):
        """Returns ``(params, n_components)``."""
        data = Path(path).read_bytes()
        if data[:8] != MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic")
        n_comp, n_dims = struct.unpack_from("<II", data, 8)
        dims = struct.unpack_from(f"<{n_dims}I", data, 16)
        off = 16 + 4 * n_dims
        ws = []
        for fi, fo in zip(dims[:-1], dims[1:]):
            cnt = fi * fo
            w = np.frombuffer(data, dtype="<f4", count=cnt, offset=off).reshape(fi, fo)
            ws.append(w.astype(np.float32))
            off += 4 * cnt
        if off != len(data):
            raise ValueError(f"{path}: trailing bytes in checkpoint")
        return cls(ws), n_comp


def forward(params: NetworkParameters, batch, keep_cache: bool = False):
    """Three rectified hidden layers and a linear output. Returns ``out`` or ``(out, cache)``."""
    h = np.asarray(batch, dtype=params.dtype)
    if h.ndim != 2 or h.shape[0] == 0:
        raise ValueError("batch must be a non-empty 2D array")
    acts = [h]
    # bad inputs are reported below by row, not as floating-point warnings
    with np.errstate(invalid="ignore", over="ignore"):
        for w in params.weights[:-1]:
            h = h @ w
            np.maximum(h, 0, out=h)
            acts.append(h)
        out = h @ params.weights[-1]
    bad = ~np.all(np.isfinite(out), axis=1)
    if np.any(bad):
        raise NonFiniteOutput(np.flatnonzero(bad))
    return (out, acts) if keep_cache else out


def backward(params: NetworkParameters, cache, output_gradients) -> list:
    """Gradients of sum(out * output_gradients) w.r.t. each weight matrix."""
    acts = cache
    g = np.asarray(output_gradients, dtype=params.dtype)
    grads = [None] * 4
    for i in range(3, -1, -1):
        grads[i] = acts[i].T @ g
        if i > 0:
            g = g @ params.weights[i].T
            g *= acts[i] > 0
    return grads


@dataclass
class AdamState:
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    skipped: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params: NetworkParameters, grads) -> NetworkParameters:
    """In-place bias-corrected Adam update; non-finite gradients skip the step."""
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        log.warning("skipping Adam step with non-finite gradients (%d so far)", state.skipped)
        return params
    if not state.m:
        state.m = [np.zeros_like(w) for w in params.weights]
        state.v = [np.zeros_like(w) for w in params.weights]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for w, g, m, v in zip(params.weights, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2) + state.eps
        with np.errstate(invalid="ignore", divide="ignore"):
            step = np.where(denom > 0, (m / c1) / np.where(denom > 0, denom, 1.0), 0.0)
        w -= (state.lr * step).astype(w.dtype)
    return params
