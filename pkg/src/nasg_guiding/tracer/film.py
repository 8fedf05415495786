"""Progressive accumulation, the MAPE metric, and PFM/PNG image files."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np


def ramp_weight(iteration, M: int = 4, B: int = 64, enabled: bool = True):
    """Frame weight min(i+1, M*B) / (M*B); later frames count more until the ramp ends."""
    it = np.asarray(iteration, dtype=np.float64)
    if not enabled:
        return np.ones_like(it)
    cap = float(M * B)
    return np.minimum(it + 1.0, cap) / cap


class Accumulator:
    """Per-pixel weighted sums. Also tracks the moments needed for a standard error."""

    def __init__(self, height: int, width: int, M: int = 4, B: int = 64, ramp: bool = True):
        self.shape = (height, width)
        self.M, self.B, self.ramp = M, B, ramp
        n = height * width
        self.sum_w = np.zeros(n)
        self.sum_w2 = np.zeros(n)
        self.sum_wx = np.zeros((n, 3))
        self.sum_w2x = np.zeros((n, 3))
        self.sum_w2x2 = np.zeros((n, 3))
        self.count = np.zeros(n, dtype=np.int64)
        self.iterations = 0

    def add_frame(self, frame, iteration: int) -> None:
        """Add a full (H, W, 3) frame rendered at ``iteration``."""
        frame = np.asarray(frame, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(frame)):
            raise ValueError("frame contains non-finite values")
        pix = np.arange(len(frame))
        self.add_samples(pix, np.full(len(frame), iteration), frame)
        self.iterations = max(self.iterations, iteration + 1)

    def add_samples(self, pixel, iteration, values) -> None:
        w = ramp_weight(iteration, self.M, self.B, self.ramp)
        x = np.asarray(values, dtype=np.float64)
        n = len(self.sum_w)
        self.sum_w += np.bincount(pixel, w, minlength=n)
        self.sum_w2 += np.bincount(pixel, w * w, minlength=n)
        self.count += np.bincount(pixel, minlength=n)
        for ch in range(3):
            xc = x[:, ch]
            self.sum_wx[:, ch] += np.bincount(pixel, w * xc, minlength=n)
            self.sum_w2x[:, ch] += np.bincount(pixel, w * w * xc, minlength=n)
            self.sum_w2x2[:, ch] += np.bincount(pixel, w * w * xc * xc, minlength=n)

    def image(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            img = self.sum_wx / self.sum_w[:, None]
        return np.nan_to_num(img).reshape(self.shape + (3,))

    def standard_error(self) -> np.ndarray:
        """Standard error of the weighted mean per pixel/channel (samples treated as i.i.d.)."""
        mu = self.image().reshape(-1, 3)
        n = np.maximum(self.count, 2)[:, None]
        ss = self.sum_w2x2 - 2.0 * mu * self.sum_w2x + mu * mu * self.sum_w2[:, None]
        with np.errstate(invalid="ignore", divide="ignore"):
            var = np.maximum(ss, 0.0) / self.sum_w[:, None] ** 2 * n / (n - 1)
        return np.sqrt(np.nan_to_num(var)).reshape(self.shape + (3,))


def mape(image, reference, eps: float = 0.01, discard: float = 0.001) -> float:
    """Mean of per-pixel relative errors |img-ref|/(ref+eps), dropping the worst 0.1% of pixels."""
    img = np.asarray(image, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError(f"image shape {img.shape} does not match reference {ref.shape}")
    if img.ndim == 2:
        img, ref = img[..., None], ref[..., None]
    err = np.abs(img - ref) / (ref + eps)
    per_pixel = np.sort(err.reshape(-1, err.shape[-1]).mean(axis=1))
    drop = int(math.floor(per_pixel.size * discard))
    kept = per_pixel[: per_pixel.size - drop]
    return float(kept.mean())


def write_pfm(path, image) -> None:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        header = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"unsupported image shape {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n%d %d\n-1.0\n" % (w, h))
        f.write(np.ascontiguousarray(img[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    lines, pos = [], 0
    while len(lines) < 3:
        end = data.index(b"\n", pos)
        tok = data[pos:end].strip()
        pos = end + 1
        if tok:
            lines.append(tok)
    ident, dims, scale = lines
    if ident == b"PF":
        ch = 3
    elif ident == b"Pf":
        ch = 1
    else:
        raise ValueError(f"{path}: not a PFM file")
    w, h = (int(x) for x in dims.split())
    dtype = "<f4" if float(scale) < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dtype, count=w * h * ch, offset=pos).astype(np.float32)
    arr = arr.reshape((h, w, ch) if ch == 3 else (h, w))
    return arr[::-1].copy()


def tonemap(image, exposure: float = 0.0) -> np.ndarray:
    x = np.clip(np.asarray(image, dtype=np.float64) * 2.0**exposure, 0.0, 1.0)
    return np.round(x ** (1.0 / 2.2) * 255.0).astype(np.uint8)


def write_png(path, image, exposure: float = 0.0) -> None:
    from PIL import Image

    Image.fromarray(tonemap(image, exposure)).save(path)
