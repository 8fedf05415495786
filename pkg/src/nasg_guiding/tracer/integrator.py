"""Wavefront path tracer: NEE with balance-heuristic MIS, guided scattering, training records."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bsdf import eval_bsdf, is_delta, sample_bsdf
from .rng import PathRng
from .scene import Scene

LUMINANCE = np.array([0.2126, 0.7152, 0.0722])
CAMERA_BOUNCE = 63


def luminance(rgb):
    return np.asarray(rgb) @ LUMINANCE


def mis_weight(pdf_a, pdf_b):
    """Balance heuristic weight of technique a."""
    s = pdf_a + pdf_b
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(s > 0, pdf_a / np.where(s > 0, s, 1.0), 0.0)


@dataclass
class GuideContext:
    """What one render pass needs from the guider: a frozen snapshot and the blend coefficient."""

    guider: object = None
    snapshot: object = None
    b: object = 0.0

    @property
    def enabled(self) -> bool:
        return self.guider is not None


@dataclass
class TraceStats:
    nonfinite: int = 0
    paths: int = 0
    guided_vertices: int = 0
    extra: dict = field(default_factory=dict)

    def merge(self, other: "TraceStats") -> None:
        self.nonfinite += other.nonfinite
        self.paths += other.paths
        self.guided_vertices += other.guided_vertices


def trace_paths(scene: Scene, pixel, iteration, seed: int, guide: Optional[GuideContext] = None,
                collect=None, max_depth: int = 16, rr_depth: int = 5):
    """Trace one path per entry of ``pixel`` (flat pixel ids) at the given iteration indices.

    Returns ``(radiance (R, 3), records or None, TraceStats)``. ``collect`` is a boolean
    mask selecting paths whose non-delta vertices become training records.
    """
    pixel = np.asarray(pixel, dtype=np.int64)
    R = len(pixel)
    iteration = np.broadcast_to(np.asarray(iteration, dtype=np.int64), (R,))
    rng = PathRng(seed, iteration, pixel)
    stats = TraceStats(paths=R)
    guide = guide or GuideContext()
    b_all = np.broadcast_to(np.asarray(guide.b, dtype=np.float64), (R,))
    mats = scene.materials
    env = scene.environment
    has_em = scene.has_emitters
    total_area = scene.emitters["total_area"]

    o, d = scene.camera.generate_rays(pixel, rng.uniform(CAMERA_BOUNCE, 0), rng.uniform(CAMERA_BOUNCE, 1))
    L = np.zeros((R, 3))
    beta = np.ones((R, 3))
    prev_qhat = np.zeros(R)
    prev_delta = np.ones(R, dtype=bool)
    active = np.arange(R)

    col = None
    if collect is not None and np.any(collect):
        slot = np.full(R, -1)
        cidx = np.flatnonzero(collect)
        slot[cidx] = np.arange(len(cidx))
        Rc = len(cidx)
        D = max_depth + 1
        col = dict(
            E=np.zeros((D, Rc, 3)), NEE=np.zeros((D, Rc, 3)), W=np.zeros((D, Rc, 3)),
            fcos=np.zeros((D, Rc, 3)), pos=np.zeros((D, Rc, 3)), nrm=np.zeros((D, Rc, 3)),
            wo=np.zeros((D, Rc, 3)), wi=np.zeros((D, Rc, 3)), qhat=np.ones((D, Rc)),
            pbsdf=np.zeros((D, Rc)), rec=np.zeros((D, Rc), dtype=bool),
        )

    def store(name, k, rays, values):
        if col is None:
            return
        s = slot[rays]
        keep = s >= 0
        if np.any(keep):
            col[name][k, s[keep]] = values[keep]

    for k in range(max_depth + 1):
        if len(active) == 0:
            break
        oo, dd = o[active], d[active]
        hitrec = scene.intersect(oo, dd)
        hit = hitrec["hit"]

        a_miss = active[~hit]
        if len(a_miss):
            L[a_miss] += beta[a_miss] * env
            store("E", k, a_miss, np.broadcast_to(env, (len(a_miss), 3)))

        a_hit = active[hit]
        if len(a_hit) == 0:
            break
        p, ng, mat, emit = scene.surface(oo, dd, hitrec)
        dh = dd[hit]
        lit = np.any(emit > 0, axis=1)
        if np.any(lit):
            w = np.ones(len(a_hit))
            mis = lit & ~prev_delta[a_hit]
            if np.any(mis):
                t = hitrec["t"][hit][mis]
                cos_l = np.abs(np.sum(ng[mis] * dh[mis], axis=1))
                with np.errstate(divide="ignore"):
                    p_light = t * t / (total_area * cos_l)
                w[mis] = mis_weight(prev_qhat[a_hit[mis]], p_light)
            e_w = emit * w[:, None]
            L[a_hit] += beta[a_hit] * e_w
            store("E", k, a_hit, e_w)
        if k == max_depth:
            break

        wo = -dh
        side = np.sum(ng * wo, axis=1)
        n_s = np.where((side < 0)[:, None], -ng, ng)
        delta = is_delta(mats, mat)
        nd = np.flatnonzero(~delta)

        # guided distributions at non-delta vertices
        cb = np.zeros(len(a_hit))
        gsel = np.zeros(0, dtype=int)
        dec = None
        if guide.enabled and len(nd):
            gsel = nd[b_all[a_hit[nd]] > 0]
            if len(gsel):
                dec = guide.guider.infer(p[gsel], wo[gsel], n_s[gsel], guide.snapshot)
                cb[gsel] = b_all[a_hit[gsel]] * dec.c
                stats.guided_vertices += len(gsel)
        model = guide.guider.model if dec is not None else None

        def scatter_pdf(rows, dirs):
            """q_hat for directions ``dirs`` at hit rows ``rows`` (all non-delta)."""
            f, pb = eval_bsdf(mats, mat[rows], n_s[rows], wo[rows], dirs)
            qh = pb.copy()
            if dec is not None:
                pos = np.searchsorted(gsel, rows)
                pos = np.minimum(pos, len(gsel) - 1)
                g = gsel[pos] == rows
                if np.any(g):
                    sub = _subset(dec, pos[g])
                    q = model.pdf(sub, dirs[g])
                    c = cb[rows[g]]
                    qh[g] = c * q + (1.0 - c) * pb[g]
            return f, pb, qh

        # next event estimation
        if has_em and len(nd):
            rays = a_hit[nd]
            u0, u1, u2 = (rng.uniform(k, j, rays) for j in range(3))
            lp, ln, lrad, pa = scene.sample_emitter(p[nd], u0, u1, u2)
            to = lp - p[nd]
            dist = np.linalg.norm(to, axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                wl = to / dist[:, None]
                cos_l = -np.sum(ln * wl, axis=1)
                cos_i = np.sum(wl * n_s[nd], axis=1)
                ok = (dist > 0) & (cos_l > 0) & (cos_i > 0)
            contrib = np.zeros((len(nd), 3))
            if np.any(ok):
                rows = nd[ok]
                f, pb, qh = scatter_pdf(rows, wl[ok])
                p_light = pa * dist[ok] ** 2 / cos_l[ok]
                val = f * (cos_i[ok] * mis_weight(p_light, qh) / p_light)[:, None] * lrad[ok]
                nz = np.any(val > 0, axis=1)
                if np.any(nz):
                    rr = np.flatnonzero(ok)[nz]
                    blocked = scene.occluded(p[nd][rr], wl[rr], dist[rr])
                    val_nz = val[nz]
                    val_nz[blocked] = 0.0
                    contrib[rr] = val_nz
            L[rays] += beta[rays] * contrib
            store("NEE", k, rays, contrib)

        # scattering
        u_sel = rng.uniform(k, 3, a_hit)
        u1 = rng.uniform(k, 5, a_hit)
        u2 = rng.uniform(k, 6, a_hit)
        wi, _ = sample_bsdf(mats, mat, n_s, wo, u1, u2)
        use_guide = u_sel < cb
        if np.any(use_guide):
            gi = np.flatnonzero(use_guide)
            pos = np.searchsorted(gsel, gi)
            sub = _subset(dec, pos)
            wi[gi] = model.sample(sub, rng.uniform(k, 4, a_hit[gi]), u1[gi], u2[gi], rng.uniform(k, 7, a_hit[gi]))

        weight = np.zeros((len(a_hit), 3))
        qhat = np.zeros(len(a_hit))
        if np.any(delta):
            weight[delta] = mats.albedo[mat[delta]]
        if len(nd):
            f, pb, qh = scatter_pdf(nd, wi[nd])
            cos_i = np.sum(wi[nd] * n_s[nd], axis=1)
            good = (qh > 0) & (cos_i > 0)
            with np.errstate(invalid="ignore", divide="ignore"):
                wgt = f * np.where(good, cos_i / np.where(good, qh, 1.0), 0.0)[:, None]
            weight[nd] = wgt
            qhat[nd] = qh
            if col is not None:
                rays = a_hit[nd]
                store("fcos", k, rays, f * np.maximum(cos_i, 0.0)[:, None])
                store("pos", k, rays, p[nd])
                store("nrm", k, rays, n_s[nd])
                store("wo", k, rays, wo[nd])
                store("wi", k, rays, wi[nd])
                store("qhat", k, rays, qh)
                store("pbsdf", k, rays, pb)
                store("rec", k, rays, qh > 0)

        if k >= rr_depth:
            prob = np.minimum(0.95, luminance(beta[a_hit] * weight))
            survive = rng.uniform(k, 8, a_hit) < prob
            with np.errstate(invalid="ignore", divide="ignore"):
                weight = np.where(survive[:, None], weight / np.where(prob > 0, prob, 1.0)[:, None], 0.0)
        store("W", k, a_hit, weight)

        beta[a_hit] *= weight
        prev_qhat[a_hit] = qhat
        prev_delta[a_hit] = delta
        alive = np.any(weight > 0, axis=1)
        active = a_hit[alive]
        o[active] = p[alive]
        d[active] = wi[alive]

    bad = ~np.all(np.isfinite(L), axis=1)
    if np.any(bad):
        stats.nonfinite += int(bad.sum())
        L[bad] = 0.0

    records = _records(col, max_depth) if col is not None else None
    return L, records, stats


def _subset(dec, rows):
    """Row subset of a Decoded batch (the per-component state is indexed on axis 0)."""
    from ..guider import Decoded

    def pick(x):
        if isinstance(x, np.ndarray):
            return x[rows]
        if isinstance(x, tuple):
            return type(x)(*[pick(y) for y in x]) if hasattr(x, "_fields") else tuple(pick(y) for y in x)
        return x

    state = {k: pick(v) for k, v in dec.state.items() if not callable(v)}
    return Decoded(dec.weights[rows], dec.c[rows], dec.dc_draw[rows], state)


def _records(col, max_depth):
    """Backward accumulation of incident radiance; returns training arrays."""
    E, NEE, W = col["E"], col["NEE"], col["W"]
    Li = np.zeros(E.shape[1:])
    li_all = np.zeros_like(col["fcos"])
    for k in range(max_depth - 1, -1, -1):
        Li = E[k + 1] + NEE[k + 1] + W[k + 1] * Li
        li_all[k] = Li
    rec = col["rec"][:max_depth]
    p_value = luminance(col["fcos"][:max_depth] * li_all[:max_depth])
    sel = rec & np.isfinite(p_value)
    return dict(
        position=col["pos"][:max_depth][sel], omega_o=col["wo"][:max_depth][sel],
        normal=col["nrm"][:max_depth][sel], omega_i=col["wi"][:max_depth][sel],
        p_value=np.maximum(p_value[sel], 0.0), q_sampling=col["qhat"][:max_depth][sel],
        bsdf_pdf=col["pbsdf"][:max_depth][sel],
    )
