"""Closed-form spherical densities: NASG components/mixtures and the vMF (normalized SG) baseline.

Two layers live here. The array layer (``euler_axes``, ``log_eval``, ``log_norm``,
``sample_directions``, ``component_grad``, ``mixture_*``) works on numpy arrays with
arbitrary leading batch dimensions and is what the renderer and the trainer call.
The value layer (``Frame``, ``NasgComponent``, ``NasgMixture``, ``VmfComponent``)
wraps single components for direct use and testing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

LAMBDA_MIN = 1e-3
LAMBDA_MAX = 3e3
A_MAX = 3e3

# |v.z| above this uses the pole branch
POLE_EPS = 1e-9
U_MIN = 1e-12

PARAM_NAMES = ("cos_theta", "sin_phi", "cos_phi", "sin_tau", "cos_tau", "lambda", "a")


def _dot(a, b):
    return np.einsum("...i,...i->...", a, b)


def normalize_pair(s, c, tol: float = 1e-6):
    """Renormalize a (sin, cos) pair; degenerate pairs become the canonical (0, 1).

    Returns ``(s, c, degenerate)`` with ``degenerate`` a boolean array.
    """
    s = np.asarray(s, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    n = np.hypot(s, c)
    degenerate = n < tol
    safe = np.where(degenerate, 1.0, n)
    s_out = np.where(degenerate, 0.0, s / safe)
    c_out = np.where(degenerate, 1.0, c / safe)
    return s_out, c_out, degenerate


def euler_axes(cos_theta, sin_phi, cos_phi, sin_tau, cos_tau):
    """Lobe axis z and tangent axis x from Euler-angle trig values.

    No renormalization is applied, so the result is a smooth function of all
    five inputs (the gradient code relies on that).
    """
    ct = np.asarray(cos_theta, dtype=np.float64)
    sth = np.sqrt(np.maximum(1.0 - ct * ct, 0.0))
    z = np.stack([cos_phi * sth, sin_phi * sth, ct * np.ones_like(sth)], axis=-1)
    x = np.stack(
        [
            ct * cos_phi * cos_tau - sin_phi * sin_tau,
            ct * sin_phi * cos_tau + cos_phi * sin_tau,
            -sth * cos_tau,
        ],
        axis=-1,
    )
    return x, z


def log_norm(lam, a, eps=0.0):
    """log K = log(2 pi (1 - e^{-2 lam}) / (lam sqrt((1+eps)(1+eps+a))))."""
    lam = np.asarray(lam, dtype=np.float64)
    return (
        math.log(2.0 * math.pi)
        + np.log(-np.expm1(-2.0 * lam))
        - np.log(lam)
        - 0.5 * np.log((1.0 + eps) * (1.0 + eps + a))
    )


def log_eval(x, z, lam, a, eps, v):
    """Log of the unnormalized NASG lobe G at directions ``v``.

    Shapes broadcast: axes (..., 3), scalars (...), v (..., 3). Returns -inf at v = -z.
    """
    Z = _dot(v, z)
    X = _dot(v, x)
    lam = np.asarray(lam, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    den = 1.0 - Z * Z
    near = np.abs(Z) > 1.0 - POLE_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = a * X * X / np.where(near, 1.0, den)
        if np.any(near):
            Y = _dot(v, np.cross(z, x))
            rad = X * X + Y * Y
            beta_pole = np.where(rad > 0.0, a * X * X / np.where(rad > 0.0, rad, 1.0), 0.0)
            beta = np.where(near, np.clip(beta_pole, 0.0, a), beta)
        u = np.clip(0.5 * (Z + 1.0), U_MIN, 1.0)
        log_u = np.log(u)
        expo = 1.0 + eps + beta
        out = 2.0 * lam * np.expm1(expo * log_u) + (eps + beta) * log_u
    return np.where(Z < -1.0 + POLE_EPS, -np.inf, out)


def sample_directions(x, z, lam, a, eps, xi0, xi1, xi2):
    """Draw directions with density G/K via the east/west inverse maps.

    ``xi0`` sets the radial variable s in [e^{-2 lam}, 1], ``xi1`` sets rho in
    [-pi/2, pi/2], ``xi2 > 0.5`` selects the eastern half.
    """
    lam = np.asarray(lam, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    xi0 = np.asarray(xi0, dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_s = np.logaddexp(np.log(xi0), np.log1p(-xi0) - 2.0 * lam)
    rho = (np.asarray(xi1, dtype=np.float64) - 0.5) * math.pi
    cos_rho = np.cos(rho)
    expo = (1.0 + eps + a - a * cos_rho * cos_rho) / ((1.0 + eps) * (1.0 + eps + a))
    base = np.clip(log_s / (2.0 * lam), -1.0, 0.0)
    with np.errstate(divide="ignore"):
        one_minus_u = -np.expm1(expo * np.log1p(base))
    one_minus_u = np.clip(one_minus_u, 0.0, 1.0)
    u = 1.0 - one_minus_u
    cos_t = 1.0 - 2.0 * one_minus_u
    sin_t = 2.0 * np.sqrt(u * one_minus_u)
    # arctan2 keeps phi in rho's quadrant
    phi = np.arctan2(np.sqrt((1.0 + eps + a) / (1.0 + eps)) * np.sin(rho), cos_rho)
    phi = np.where(np.asarray(xi2) > 0.5, phi, phi + math.pi)
    y = np.cross(z, x)
    lx = (sin_t * np.cos(phi))[..., None]
    ly = (sin_t * np.sin(phi))[..., None]
    lz = cos_t[..., None]
    v = lx * x + ly * y + lz * z
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def component_grad(ct, sp, cp, st, ctau, lam, a, eps, v):
    """Gradient of log(G/K) w.r.t. the 7 decoded scalars, shape (..., 7).

    Also returns a boolean ``valid`` mask; entries within the pole band or with
    non-finite intermediates get zero gradient.
    """
    ct = np.asarray(ct, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    x, z = euler_axes(ct, sp, cp, st, ctau)
    Z = _dot(v, z)
    X = _dot(v, x)
    den = 1.0 - Z * Z
    valid = np.abs(Z) < 1.0 - 1e-6
    den = np.where(valid, den, 1.0)

    with np.errstate(all="ignore"):
        beta = a * X * X / den
        u = np.clip(0.5 * (Z + 1.0), U_MIN, 1.0)
        L = np.log(u)
        w = np.exp((1.0 + eps + beta) * L)

        dG_dlam = 2.0 * (w - 1.0)
        dG_dbeta = 2.0 * lam * w * L + L
        dG_du = (2.0 * lam * (1.0 + eps + beta) * w + (eps + beta)) / u
        dbeta_da = X * X / den
        dbeta_dX = 2.0 * a * X / den
        dbeta_dZ = 2.0 * a * X * X * Z / (den * den)
        dG_dZ = 0.5 * dG_du + dG_dbeta * dbeta_dZ
        dG_dX = dG_dbeta * dbeta_dX

        # d log K
        dK_dlam = 2.0 / np.expm1(2.0 * lam) - 1.0 / lam
        dK_da = -0.5 / (1.0 + eps + a)

        sth = np.sqrt(np.maximum(1.0 - ct * ct, 1e-300))
        dsth = -ct / sth
        vx, vy, vz = v[..., 0], v[..., 1], v[..., 2]
        # partials of Z = v.z and X = v.x
        dZ_dct = vx * cp * dsth + vy * sp * dsth + vz
        dZ_dsp = vy * sth
        dZ_dcp = vx * sth
        dX_dct = vx * cp * ctau + vy * sp * ctau - vz * dsth * ctau
        dX_dsp = -vx * st + vy * ct * ctau
        dX_dcp = vx * ct * ctau + vy * st
        dX_dst = -vx * sp + vy * cp
        dX_dctau = vx * ct * cp + vy * ct * sp - vz * sth

        g = np.stack(
            np.broadcast_arrays(
                dG_dZ * dZ_dct + dG_dX * dX_dct,
                dG_dZ * dZ_dsp + dG_dX * dX_dsp,
                dG_dZ * dZ_dcp + dG_dX * dX_dcp,
                dG_dX * dX_dst,
                dG_dX * dX_dctau,
                dG_dlam - dK_dlam,
                dG_dbeta * dbeta_da - dK_da,
            ),
            axis=-1,
        )
    finite = np.all(np.isfinite(g), axis=-1)
    valid = valid & finite
    g = np.where(valid[..., None], g, 0.0)
    return g, valid


class NasgParams(NamedTuple):
    """Struct-of-arrays view of NASG components; every field shares one shape."""

    cos_theta: np.ndarray
    sin_phi: np.ndarray
    cos_phi: np.ndarray
    sin_tau: np.ndarray
    cos_tau: np.ndarray
    lam: np.ndarray
    a: np.ndarray
    eps: np.ndarray

    def axes(self):
        return euler_axes(self.cos_theta, self.sin_phi, self.cos_phi, self.sin_tau, self.cos_tau)


def mixture_log_terms(params: NasgParams, log_weights, v, axes=None):
    """log(A_i G_i(v) / K_i) for params of shape (..., N) and v of shape (..., 3)."""
    x, z = params.axes() if axes is None else axes
    vb = np.asarray(v, dtype=np.float64)[..., None, :]
    lg = log_eval(x, z, params.lam, params.a, params.eps, vb)
    return log_weights + lg - log_norm(params.lam, params.a, params.eps)


def mixture_pdf_array(params: NasgParams, weights, v, axes=None):
    with np.errstate(divide="ignore"):
        lw = np.log(weights)
    terms = mixture_log_terms(params, lw, v, axes)
    return np.sum(np.exp(terms), axis=-1)


def mixture_grad(params: NasgParams, weights, v, axes=None):
    """Responsibilities (..., N), per-component grads of log pdf (..., N, 7), pdf (...).

    The full gradient of log(mixture pdf) w.r.t. component i's scalars is
    ``resp[..., i, None] * grads[..., i, :]``; w.r.t. the weight logits it is
    ``resp - weights``.
    """
    with np.errstate(divide="ignore"):
        lw = np.log(weights)
    terms = mixture_log_terms(params, lw, v, axes)
    m = np.max(terms, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(terms - m)
    tot = np.sum(e, axis=-1, keepdims=True)
    resp = np.where(tot > 0, e / np.where(tot > 0, tot, 1.0), 0.0)
    pdf = (tot * np.exp(m))[..., 0]
    vb = np.asarray(v, dtype=np.float64)[..., None, :]
    g, _ = component_grad(*params[:5], params.lam, params.a, params.eps, vb)
    return resp, g, pdf


def mixture_sample_array(params: NasgParams, weights, xi_select, xi0, xi1, xi2, axes=None):
    """Categorical component choice by inverse CDF, then a direct draw from that lobe."""
    weights = np.asarray(weights, dtype=np.float64)
    cdf = np.cumsum(weights, axis=-1)
    n = weights.shape[-1]
    xs = np.asarray(xi_select, dtype=np.float64)[..., None] * cdf[..., -1:]
    idx = np.minimum(np.sum(cdf <= xs, axis=-1), n - 1)
    # never land on a zero-weight component through round-off
    pick = np.take_along_axis(weights, idx[..., None], axis=-1)[..., 0]
    if np.any(pick <= 0):
        fallback = np.argmax(weights, axis=-1)
        idx = np.where(pick > 0, idx, fallback)
    x, z = params.axes() if axes is None else axes
    sel = idx[..., None]

    def take(arr):
        arr = np.broadcast_to(arr, weights.shape)
        return np.take_along_axis(arr, sel, axis=-1)[..., 0]

    xs_ax = np.take_along_axis(x, sel[..., None], axis=-2)[..., 0, :]
    zs_ax = np.take_along_axis(z, sel[..., None], axis=-2)[..., 0, :]
    v = sample_directions(xs_ax, zs_ax, take(params.lam), take(params.a), take(params.eps), xi0, xi1, xi2)
    return v, idx


# ---------------------------------------------------------------------------
# vMF / normalized SG


def orthonormal_basis(n):
    """Branchless tangent frame (t, b) around unit vectors n of shape (..., 3)."""
    n = np.asarray(n, dtype=np.float64)
    sign = np.where(n[..., 2] >= 0.0, 1.0, -1.0)
    aa = -1.0 / (sign + n[..., 2])
    bb = n[..., 0] * n[..., 1] * aa
    t = np.stack([1.0 + sign * n[..., 0] ** 2 * aa, sign * bb, -sign * n[..., 0]], axis=-1)
    b = np.stack([bb, sign + n[..., 1] ** 2 * aa, -n[..., 1]], axis=-1)
    return t, b


def vmf_log_pdf(mu, lam, v):
    lam = np.asarray(lam, dtype=np.float64)
    return lam * (_dot(mu, v) - 1.0) + np.log(lam) - math.log(2.0 * math.pi) - np.log(-np.expm1(-2.0 * lam))


def vmf_sample_directions(mu, lam, xi0, xi1):
    """Inverse-CDF draw: cos(theta) = 1 + ln(1 - xi0 (1 - e^{-2 lam})) / lam."""
    lam = np.asarray(lam, dtype=np.float64)
    cos_t = 1.0 + np.log1p(np.asarray(xi0) * np.expm1(-2.0 * lam)) / lam
    cos_t = np.clip(cos_t, -1.0, 1.0)
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
    phi = 2.0 * math.pi * np.asarray(xi1)
    t, b = orthonormal_basis(mu)
    v = (sin_t * np.cos(phi))[..., None] * t + (sin_t * np.sin(phi))[..., None] * b + cos_t[..., None] * mu
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# value layer


def _as_unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(3)
    n = np.linalg.norm(v)
    if abs(n - 1.0) > 1e-6:
        raise ValueError(f"expected a unit vector, got norm {n}")
    return v


@dataclass(frozen=True)
class Frame:
    x_axis: np.ndarray
    y_axis: np.ndarray
    z_axis: np.ndarray

    @classmethod
    def from_xz(cls, x_axis, z_axis) -> "Frame":
        x = np.asarray(x_axis, dtype=np.float64)
        z = np.asarray(z_axis, dtype=np.float64)
        return cls(x, np.cross(z, x), z)

    def matrix(self) -> np.ndarray:
        return np.stack([self.x_axis, self.y_axis, self.z_axis])


def frame_from_euler(cos_theta, sin_phi, cos_phi, sin_tau, cos_tau) -> Frame:
    """Orthonormal frame from Euler trig values; the (sin, cos) pairs are renormalized."""
    sp, cp, _ = normalize_pair(sin_phi, cos_phi)
    st, ctau, _ = normalize_pair(sin_tau, cos_tau)
    ct = float(np.clip(cos_theta, -1.0, 1.0))
    x, z = euler_axes(ct, float(sp), float(cp), float(st), float(ctau))
    return Frame.from_xz(x, z)


@dataclass(frozen=True, eq=False)
class NasgComponent:
    frame: Frame
    lam: float
    a: float = 0.0
    eps: float = 0.0
    # decoded Euler trig values, kept when built through from_euler
    euler: Optional[tuple] = field(default=None, compare=False)

    def __post_init__(self):
        if not (LAMBDA_MIN <= self.lam <= LAMBDA_MAX):
            raise ValueError(f"lambda {self.lam} outside [{LAMBDA_MIN}, {LAMBDA_MAX}]")
        if not (0.0 <= self.a <= A_MAX):
            raise ValueError(f"a {self.a} outside [0, {A_MAX}]")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")

    @classmethod
    def from_euler(cls, cos_theta, sin_phi, cos_phi, sin_tau, cos_tau, lam, a=0.0, eps=0.0):
        sp, cp, _ = normalize_pair(sin_phi, cos_phi)
        st, ctau, _ = normalize_pair(sin_tau, cos_tau)
        e = (float(cos_theta), float(sp), float(cp), float(st), float(ctau))
        return cls(frame_from_euler(*e), float(lam), float(a), float(eps), euler=e)

    def params(self) -> NasgParams:
        if self.euler is None:
            raise ValueError("component was not built from Euler parameters")
        vals = [*self.euler, self.lam, self.a, self.eps]
        return NasgParams(*[np.asarray(v, dtype=np.float64) for v in vals])


@dataclass(frozen=True)
class NasgMixture:
    components: Sequence[NasgComponent]
    weights: Sequence[float]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if len(self.components) < 1 or w.shape != (len(self.components),):
            raise ValueError("need one weight per component and at least one component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
            raise ValueError("weights must be non-negative and sum to 1")

    def arrays(self):
        """Stacked ``(NasgParams, axes, weights)`` for the array layer."""
        cs = self.components
        x = np.stack([c.frame.x_axis for c in cs])
        z = np.stack([c.frame.z_axis for c in cs])
        lam = np.array([c.lam for c in cs])
        a = np.array([c.a for c in cs])
        eps = np.array([c.eps for c in cs])
        if all(c.euler is not None for c in cs):
            e = np.array([c.euler for c in cs]).T
        else:
            e = np.full((5, len(cs)), np.nan)
        return NasgParams(*e, lam, a, eps), (x, z), np.asarray(self.weights, dtype=np.float64)


@dataclass(frozen=True)
class VmfComponent:
    mu: np.ndarray
    lam: float

    def __post_init__(self):
        _as_unit(self.mu)
        if not (LAMBDA_MIN <= self.lam <= LAMBDA_MAX):
            raise ValueError(f"lambda {self.lam} outside [{LAMBDA_MIN}, {LAMBDA_MAX}]")


@dataclass(frozen=True)
class ParamGradient:
    d_cos_theta: float
    d_sin_phi: float
    d_cos_phi: float
    d_sin_tau: float
    d_cos_tau: float
    d_lambda: float
    d_a: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.d_cos_theta, self.d_sin_phi, self.d_cos_phi, self.d_sin_tau, self.d_cos_tau, self.d_lambda, self.d_a]
        )


def nasg_log_eval(c: NasgComponent, v) -> float:
    v = _as_unit(v)
    return float(log_eval(c.frame.x_axis, c.frame.z_axis, c.lam, c.a, c.eps, v))


def nasg_norm_const(c: NasgComponent) -> float:
    return float(np.exp(log_norm(c.lam, c.a, c.eps)))


def mixture_pdf(m: NasgMixture, v) -> float:
    params, axes, w = m.arrays()
    return float(mixture_pdf_array(params, w, _as_unit(v), axes))


def nasg_sample(c: NasgComponent, xi0: float, xi1: float, xi2: float) -> np.ndarray:
    return sample_directions(c.frame.x_axis, c.frame.z_axis, c.lam, c.a, c.eps, xi0, xi1, xi2)


def mixture_sample(m: NasgMixture, xi_select, xi0, xi1, xi2):
    """Returns ``(direction, pdf)``; the pdf is that of the full mixture."""
    params, axes, w = m.arrays()
    v, _ = mixture_sample_array(params, w, xi_select, xi0, xi1, xi2, axes)
    return v, float(mixture_pdf_array(params, w, v, axes))


def nasg_grad_logpdf(c: NasgComponent, mixture: Optional[NasgMixture], v) -> ParamGradient:
    """d log(mixture pdf) / d(component scalars); a ``None`` mixture means c alone."""
    v = _as_unit(v)
    if mixture is None:
        mixture = NasgMixture([c], [1.0])
    idx = next(i for i, comp in enumerate(mixture.components) if comp is c)
    params, axes, w = mixture.arrays()
    resp, g, _ = mixture_grad(params, w, v, axes)
    return ParamGradient(*(resp[idx] * g[idx]).tolist())


def vmf_pdf(c: VmfComponent, v) -> float:
    return float(np.exp(vmf_log_pdf(c.mu, c.lam, _as_unit(v))))


def vmf_pdf_sample(c: VmfComponent, xi0: float, xi1: float):
    v = vmf_sample_directions(np.asarray(c.mu, dtype=np.float64), c.lam, xi0, xi1)
    return v, float(np.exp(vmf_log_pdf(c.mu, c.lam, v)))
