"""Lambertian, normalized Phong and mirror scattering, vectorized over rays."""
from __future__ import annotations

import math

import numpy as np

from ..sphdist import orthonormal_basis
from .scene import LAMBERTIAN, MIRROR, PHONG, Materials


def reflect(wo, n):
    return 2.0 * np.sum(wo * n, axis=-1, keepdims=True) * n - wo


def _around(axis, cos_t, phi):
    t, b = orthonormal_basis(axis)
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
    v = (sin_t * np.cos(phi))[:, None] * t + (sin_t * np.sin(phi))[:, None] * b + cos_t[:, None] * axis
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def is_delta(materials: Materials, mat):
    return materials.kind[mat] == MIRROR


def eval_bsdf(materials: Materials, mat, n, wo, wi):
    """BSDF value f (R, 3) and sampling pdf (R,) for non-delta materials; ``n`` faces ``wo``."""
    kind = materials.kind[mat]
    albedo = materials.albedo[mat]
    cos_i = np.sum(wi * n, axis=1)
    upper = cos_i > 0
    f = np.zeros((len(mat), 3))
    pdf = np.zeros(len(mat))
    lam = kind == LAMBERTIAN
    if np.any(lam):
        f[lam] = albedo[lam] / math.pi * upper[lam, None]
        pdf[lam] = np.maximum(cos_i[lam], 0.0) / math.pi
    ph = kind == PHONG
    if np.any(ph):
        e = materials.exponent[mat[ph]]
        r = reflect(wo[ph], n[ph])
        ca = np.maximum(np.sum(r * wi[ph], axis=1), 0.0)
        lobe = ca**e
        f[ph] = albedo[ph] * ((e + 2.0) / (2.0 * math.pi) * lobe * upper[ph])[:, None]
        pdf[ph] = (e + 1.0) / (2.0 * math.pi) * lobe
    return f, pdf


def sample_bsdf(materials: Materials, mat, n, wo, u1, u2):
    """Sampled directions and a delta mask. Glossy draws below the surface are kept:
    they evaluate to zero contribution, which keeps the pdf exact for MIS."""
    kind = materials.kind[mat]
    wi = np.empty_like(wo)
    phi = 2.0 * math.pi * u2
    lam = kind == LAMBERTIAN
    if np.any(lam):
        wi[lam] = _around(n[lam], np.sqrt(1.0 - u1[lam]), phi[lam])
    ph = kind == PHONG
    if np.any(ph):
        e = materials.exponent[mat[ph]]
        wi[ph] = _around(reflect(wo[ph], n[ph]), u1[ph] ** (1.0 / (e + 1.0)), phi[ph])
    mi = kind == MIRROR
    if np.any(mi):
        wi[mi] = reflect(wo[mi], n[mi])
    return wi, mi
