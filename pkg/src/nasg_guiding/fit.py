"""Density-model benchmark: fit one guiding mixture to an analytic or image target.

The fitted mixture has free raw parameters (no network, fixed shading point) and is
trained with the same one-sample KL gradient the renderer uses. Quality is the
quadrature KL(target || model) on an equal-area grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import sphdist
from .guider import make_model
from .tinynn import AdamState, adam_step

# ---------------------------------------------------------------------------
# quadrature grid


def sphere_grid(n_theta: int = 512, n_phi: int = 1024):
    """Midpoints of an equal-area (cos theta, phi) grid; returns (dirs (n, 3), cell solid angle)."""
    ct = -1.0 + (np.arange(n_theta) + 0.5) * (2.0 / n_theta)
    ph = (np.arange(n_phi) + 0.5) * (2.0 * math.pi / n_phi)
    CT, PH = np.meshgrid(ct, ph, indexing="ij")
    ST = np.sqrt(1.0 - CT * CT)
    dirs = np.stack([ST * np.cos(PH), ST * np.sin(PH), CT], axis=-1).reshape(-1, 3)
    return dirs, 4.0 * math.pi / (n_theta * n_phi)


def quadrature_kl(target_pdf, model_pdf, cell: float) -> float:
    """KL(p || q) from pdf values on grid cells; p is renormalized on the grid."""
    p = target_pdf / (np.sum(target_pdf) * cell)
    mask = p > 0
    q = np.maximum(model_pdf[mask], 1e-300)
    return float(np.sum(p[mask] * np.log(p[mask] / q)) * cell)


# ---------------------------------------------------------------------------
# targets


class Target:
    """A density on the sphere that can be sampled; ``pdf`` may be unnormalized."""

    def pdf(self, v):  # pragma: no cover - interface
        raise NotImplementedError

    def sample(self, n: int, rng: np.random.Generator):  # pragma: no cover - interface
        raise NotImplementedError


def _uniform_sphere(n, rng):
    z = rng.uniform(-1.0, 1.0, n)
    phi = rng.uniform(0.0, 2.0 * math.pi, n)
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


@dataclass
class BandTarget(Target):
    """Thin curved band: exp(-k_band (v.n)^2) * exp(k_center (v.m - 1)), m orthogonal to n."""

    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    center: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    k_band: float = 300.0
    k_center: float = 1.5

    def pdf(self, v):
        v = np.asarray(v)
        dn = v @ self.normal
        return np.exp(-self.k_band * dn * dn + self.k_center * (v @ self.center - 1.0))

    def sample(self, n, rng):
        out = []
        got = 0
        while got < n:
            cand = _uniform_sphere(max(4 * n, 1024) * 8, rng)
            acc = rng.random(len(cand)) < self.pdf(cand)
            out.append(cand[acc])
            got += int(acc.sum())
        return np.concatenate(out)[:n]


@dataclass
class VmfTarget(Target):
    mu: np.ndarray
    lam: float

    def pdf(self, v):
        return np.exp(sphdist.vmf_log_pdf(self.mu, self.lam, np.asarray(v)))

    def sample(self, n, rng):
        return sphdist.vmf_sample_directions(self.mu, self.lam, rng.random(n), rng.random(n))


@dataclass
class MixtureTarget(Target):
    mixture: sphdist.NasgMixture

    def pdf(self, v):
        params, axes, w = self.mixture.arrays()
        return sphdist.mixture_pdf_array(params, w, np.asarray(v), axes)

    def sample(self, n, rng):
        params, axes, w = self.mixture.arrays()
        u = rng.random((4, n))
        v, _ = sphdist.mixture_sample_array(params, np.broadcast_to(w, (n, len(w))), u[0], u[1], u[2], u[3],
                                            tuple(np.broadcast_to(a, (n,) + a.shape) for a in axes))
        return v


class EnvmapTarget(Target):
    """Latitude-longitude image (row 0 = +z pole); density proportional to luminance."""

    def __init__(self, image):
        img = np.asarray(image, dtype=np.float64)
        lum = img @ np.array([0.2126, 0.7152, 0.0722]) if img.ndim == 3 else img
        if not np.any(lum > 0):
            raise ValueError("environment target has no positive pixels")
        self.h, self.w = lum.shape
        th0 = np.arange(self.h) * math.pi / self.h
        th1 = th0 + math.pi / self.h
        self.dcos = np.cos(th0) - np.cos(th1)  # per-row band area / (2 pi)
        omega = self.dcos[:, None] * (2.0 * math.pi / self.w)
        mass = np.maximum(lum, 0.0) * omega
        self.total = mass.sum()
        self.density = np.maximum(lum, 0.0) / self.total
        self.cdf = np.cumsum(mass.ravel()) / self.total
        self.cos0 = np.cos(th0)

    def _pixel(self, v):
        ct = np.clip(v[:, 2], -1.0, 1.0)
        row = np.minimum((np.arccos(ct) / math.pi * self.h).astype(int), self.h - 1)
        phi = np.mod(np.arctan2(v[:, 1], v[:, 0]), 2.0 * math.pi)
        col = np.minimum((phi / (2.0 * math.pi) * self.w).astype(int), self.w - 1)
        return row, col

    def pdf(self, v):
        row, col = self._pixel(np.asarray(v))
        return self.density[row, col]

    def sample(self, n, rng):
        k = np.minimum(np.searchsorted(self.cdf, rng.random(n), side="right"), self.cdf.size - 1)
        row, col = np.divmod(k, self.w)
        ct = self.cos0[row] - rng.random(n) * self.dcos[row]
        phi = (col + rng.random(n)) * (2.0 * math.pi / self.w)
        st = np.sqrt(np.maximum(0.0, 1.0 - ct * ct))
        return np.stack([st * np.cos(phi), st * np.sin(phi), ct], axis=1)


def make_target(source: str, seed: int = 0) -> Target:
    """``band`` | ``vmf`` | ``nasg`` | path to a lat-long PFM image."""
    if source == "band":
        return BandTarget()
    if source == "vmf":
        mu = np.array([0.3, -0.4, 0.866])
        return VmfTarget(mu / np.linalg.norm(mu), 20.0)
    if source == "nasg":
        c = sphdist.NasgComponent.from_euler(0.4, 0.6, 0.8, 0.5, 0.866, 15.0, 40.0)
        return MixtureTarget(sphdist.NasgMixture([c], [1.0]))
    from .tracer.film import read_pfm

    return EnvmapTarget(read_pfm(source))


# ---------------------------------------------------------------------------
# fitting


@dataclass
class FitResult:
    kind: str
    n_components: int
    n_params: int
    history: list  # (step, kl)
    raw: np.ndarray

    @property
    def final_kl(self) -> float:
        return self.history[-1][1]


def fit_model(target: Target, kind: str, n_components: int, *, steps: int = 2000, batch: int = 256,
              lr: float = 0.01, seed: int = 0, checkpoints=(), grid=None) -> FitResult:
    model = make_model(kind, n_components)
    rng = np.random.default_rng([seed, 11])
    raw = rng.normal(0.0, 1.0, model.output_dim)
    n = model.n
    # start every lobe at lambda = a = 1 with equal weights
    if kind == "nasg":
        raw[5 * n : 8 * n] = 0.0
    else:
        raw[3 * n : 5 * n] = 0.0
    raw[-1] = 0.0
    adam = AdamState(lr=lr)
    dirs, cell = grid if grid is not None else sphere_grid()
    p_grid = target.pdf(dirs)
    history = []

    def kl_now():
        dec = model.decode(raw[None])
        chunks = [dirs[s : s + 65536] for s in range(0, len(dirs), 65536)]
        q = np.concatenate([model.pdf(_rows(dec, 1, len(c)), c) for c in chunks])
        return quadrature_kl(p_grid, q, cell)

    class _P:  # adam_step works on objects with a ``weights`` list
        weights = [raw]

    for step in range(1, steps + 1):
        v = target.sample(batch, rng)
        dec = model.decode(np.broadcast_to(raw, (batch, len(raw))))
        g, _ = model.grad_raw(dec, v)
        grad = -g.mean(axis=0)
        grad[-1] = 0.0
        adam_step(adam, _P, [grad])
        if step in checkpoints:
            history.append((step, kl_now()))
    if not history or history[-1][0] != steps:
        history.append((steps, kl_now()))
    return FitResult(kind, n_components, model.output_dim - 1, history, raw.copy())


def _rows(dec, n_src, n):
    """Broadcast a single decoded distribution to n rows (cheap views)."""
    from .guider import Decoded

    def rep(x):
        if isinstance(x, np.ndarray):
            return np.broadcast_to(x[0], (n,) + x.shape[1:]) if x.shape[:1] == (n_src,) else x
        if isinstance(x, tuple):
            vals = [rep(y) for y in x]
            return type(x)(*vals) if hasattr(x, "_fields") else tuple(vals)
        return x

    state = {k: rep(v) for k, v in dec.state.items() if not callable(v)}
    return Decoded(rep(dec.weights), rep(dec.c), rep(dec.dc_draw), state)


def run_fit(target: Target, *, nasg_components: int = 8, vmf_components: int = 14, steps: int = 2000,
            batch: int = 256, lr: float = 0.01, seed: int = 0, checkpoints=()) -> dict:
    """Fit NASG and the parameter-matched vMF baseline under identical Adam budgets."""
    grid = sphere_grid()
    p = target.pdf(grid[0])
    if not np.any(p > 0):
        raise ValueError("degenerate (all-zero) target")
    out = {}
    for kind, n in (("nasg", nasg_components), ("vmf", vmf_components)):
        out[kind] = fit_model(target, kind, n, steps=steps, batch=batch, lr=lr, seed=seed,
                              checkpoints=checkpoints, grid=grid)
    return out
