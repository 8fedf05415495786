"""Network input features: one-blob position code, raw outgoing direction and normal, constant pad."""
from __future__ import annotations

import numpy as np

BINS = 19
INPUT_DIM = 64
POS_DIM = 3 * BINS


def one_blob(x, k: int = BINS) -> np.ndarray:
    """Gaussian bumps of width 1/k centered on the k bin centers; last axis has length k."""
    x = np.asarray(x, dtype=np.float64)
    centers = (np.arange(k) + 0.5) / k
    sigma = 1.0 / k
    d = x[..., None] - centers
    return np.exp(-(d * d) / (2.0 * sigma * sigma))


def normalize_position(p, bounds_min, bounds_max):
    """Map positions into [0, 1]^3; returns (normalized, number of clamped coordinates)."""
    lo = np.asarray(bounds_min, dtype=np.float64)
    hi = np.asarray(bounds_max, dtype=np.float64)
    ext = hi - lo
    if np.any(ext <= 0):
        raise ValueError("degenerate scene bounds")
    t = (np.asarray(p, dtype=np.float64) - lo) / ext
    clamped = int(np.count_nonzero((t < 0.0) | (t > 1.0)))
    return np.clip(t, 0.0, 1.0), clamped


def encode_inputs(p, omega_o, n, bounds_min, bounds_max, dtype=np.float32, stats: dict | None = None):
    """Encode shading points into (..., 64) feature rows.

    Layout: [0, 57) one-blob of the normalized position (19 bins per axis),
    [57, 60) omega_o, [60, 63) normal, 63 = 1.0.
    """
    t, clamped = normalize_position(p, bounds_min, bounds_max)
    if stats is not None:
        stats["clamped"] = stats.get("clamped", 0) + clamped
    lead = t.shape[:-1]
    out = np.empty(lead + (INPUT_DIM,), dtype=dtype)
    out[..., :POS_DIM] = one_blob(t).reshape(lead + (POS_DIM,))
    out[..., POS_DIM : POS_DIM + 3] = omega_o
    out[..., POS_DIM + 3 : POS_DIM + 6] = n
    out[..., INPUT_DIM - 1] = 1.0
    return out
