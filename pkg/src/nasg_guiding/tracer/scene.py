"""Scene description, YAML loading and vectorized ray intersection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

T_MIN = 1e-4

LAMBERTIAN, PHONG, MIRROR = 0, 1, 2
_MATERIAL_TYPES = {"lambertian": LAMBERTIAN, "phong": PHONG, "mirror": MIRROR}


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    fov: float  # vertical, degrees
    width: int
    height: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        fwd = self.look_at - self.position
        self.forward = fwd / np.linalg.norm(fwd)
        right = np.cross(self.forward, self.up)
        self.right = right / np.linalg.norm(right)
        self.true_up = np.cross(self.right, self.forward)

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    def generate_rays(self, pixel, jitter_x, jitter_y):
        """Primary rays for flat pixel ids (row-major, row 0 at the top)."""
        pixel = np.asarray(pixel)
        px = pixel % self.width + jitter_x
        py = pixel // self.width + jitter_y
        tan_half = math.tan(math.radians(self.fov) * 0.5)
        aspect = self.width / self.height
        sx = (2.0 * px / self.width - 1.0) * tan_half * aspect
        sy = (1.0 - 2.0 * py / self.height) * tan_half
        d = self.forward + sx[:, None] * self.right + sy[:, None] * self.true_up
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.position, d.shape).copy()
        return o, d


@dataclass
class Materials:
    names: list
    kind: np.ndarray
    albedo: np.ndarray
    exponent: np.ndarray


@dataclass
class Scene:
    camera: Camera
    materials: Materials
    # spheres
    sph_center: np.ndarray
    sph_radius: np.ndarray
    sph_material: np.ndarray
    sph_emission: np.ndarray
    # quads (parallelograms): origin + s*edge_u + t*edge_v, s, t in [0, 1]
    quad_origin: np.ndarray
    quad_u: np.ndarray
    quad_v: np.ndarray
    quad_material: np.ndarray
    quad_emission: np.ndarray
    environment: np.ndarray
    bounds_min: np.ndarray = None
    bounds_max: np.ndarray = None
    emitters: dict = field(default_factory=dict)

    def __post_init__(self):
        self.quad_normal = np.cross(self.quad_u, self.quad_v)
        self.quad_area = np.linalg.norm(self.quad_normal, axis=1)
        if np.any(self.quad_area <= 0):
            raise ValueError("degenerate quad")
        self.quad_normal = self.quad_normal / self.quad_area[:, None]
        # precomputed for barycentric tests
        self._quad_w = self.quad_normal / self.quad_area[:, None]
        if np.any(self.sph_emission < 0) or np.any(self.quad_emission < 0) or np.any(self.environment < 0):
            raise ValueError("negative emission")
        lo, hi = self._primitive_bounds()
        if self.bounds_min is None:
            pad = 1e-3 * max(float(np.max(hi - lo)), 1.0)
            self.bounds_min, self.bounds_max = lo - pad, hi + pad
        else:
            self.bounds_min = np.asarray(self.bounds_min, dtype=np.float64)
            self.bounds_max = np.asarray(self.bounds_max, dtype=np.float64)
            if np.any(lo < self.bounds_min - 1e-9) or np.any(hi > self.bounds_max + 1e-9):
                raise ValueError("scene bounds do not contain all primitives")
        self._build_emitters()

    def _primitive_bounds(self):
        pts = []
        if len(self.sph_radius):
            pts += [self.sph_center - self.sph_radius[:, None], self.sph_center + self.sph_radius[:, None]]
        if len(self.quad_origin):
            o, u, v = self.quad_origin, self.quad_u, self.quad_v
            pts += [o, o + u, o + v, o + u + v]
        if not pts:
            raise ValueError("scene has no primitives")
        p = np.concatenate(pts)
        return p.min(axis=0), p.max(axis=0)

    def _build_emitters(self):
        sph = np.flatnonzero(np.any(self.sph_emission > 0, axis=1))
        quad = np.flatnonzero(np.any(self.quad_emission > 0, axis=1))
        areas = np.concatenate([4.0 * math.pi * self.sph_radius[sph] ** 2, self.quad_area[quad]])
        kinds = np.concatenate([np.zeros(len(sph), int), np.ones(len(quad), int)])
        index = np.concatenate([sph, quad]).astype(int)
        total = float(areas.sum())
        self.emitters = dict(kind=kinds, index=index, area=areas, total_area=total,
                             cdf=np.cumsum(areas) / total if total > 0 else areas)

    @property
    def has_emitters(self) -> bool:
        return len(self.emitters["index"]) > 0

    def intersect(self, o, d, t_max=None):
        """Nearest hit with t > T_MIN. Returns dict of arrays; ``hit`` false means environment."""
        n = len(d)
        best_t = np.full(n, np.inf) if t_max is None else np.asarray(t_max, dtype=np.float64).copy()
        kind = np.full(n, -1)
        prim = np.full(n, -1)
        if len(self.sph_radius):
            oc = o[:, None, :] - self.sph_center[None]
            bq = np.einsum("rsk,rk->rs", oc, d)
            cq = np.einsum("rsk,rsk->rs", oc, oc) - self.sph_radius[None] ** 2
            disc = bq * bq - cq
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t0 = -bq - sq
            t1 = -bq + sq
            t = np.where(t0 > T_MIN, t0, t1)
            t = np.where(ok & (t > T_MIN), t, np.inf)
            j = np.argmin(t, axis=1)
            tj = t[np.arange(n), j]
            closer = tj < best_t
            best_t = np.where(closer, tj, best_t)
            kind = np.where(closer, 0, kind)
            prim = np.where(closer, j, prim)
        if len(self.quad_origin):
            nq = self.quad_normal
            denom = d @ nq.T
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.einsum("qk,rqk->rq", nq, self.quad_origin[None] - o[:, None, :]) / denom
                p = o[:, None, :] + t[..., None] * d[:, None, :]
                rel = p - self.quad_origin[None]
                w = self._quad_w[None]
                s_ = np.einsum("rqk,rqk->rq", np.cross(rel, self.quad_v[None]), w)
                t_ = np.einsum("rqk,rqk->rq", np.cross(self.quad_u[None], rel), w)
            ok = (np.abs(denom) > 1e-12) & (t > T_MIN) & (s_ >= 0) & (s_ <= 1) & (t_ >= 0) & (t_ <= 1)
            t = np.where(ok, t, np.inf)
            j = np.argmin(t, axis=1)
            tj = t[np.arange(n), j]
            closer = tj < best_t
            best_t = np.where(closer, tj, best_t)
            kind = np.where(closer, 1, kind)
            prim = np.where(closer, j, prim)
        hit = kind >= 0
        return dict(hit=hit, t=best_t, kind=kind, prim=prim)

    def occluded(self, o, d, dist):
        """True where something blocks the open segment of length ``dist``."""
        res = self.intersect(o, d, t_max=dist * (1.0 - 1e-4))
        return res["hit"]

    def surface(self, o, d, rec):
        """Position, geometric normal, material id and emitted radiance (toward -d) of hits."""
        sel = rec["hit"]
        t = rec["t"][sel]
        kind = rec["kind"][sel]
        prim = rec["prim"][sel]
        p = o[sel] + t[:, None] * d[sel]
        normal = np.empty_like(p)
        mat = np.empty(len(p), dtype=int)
        emit = np.zeros_like(p)
        s = kind == 0
        if np.any(s):
            ps = prim[s]
            nrm = (p[s] - self.sph_center[ps]) / self.sph_radius[ps][:, None]
            normal[s] = nrm
            mat[s] = self.sph_material[ps]
            front = np.sum(nrm * d[sel][s], axis=1) < 0
            emit[s] = self.sph_emission[ps] * front[:, None]
        q = kind == 1
        if np.any(q):
            pq = prim[q]
            nrm = self.quad_normal[pq]
            normal[q] = nrm
            mat[q] = self.quad_material[pq]
            front = np.sum(nrm * d[sel][q], axis=1) < 0
            emit[q] = self.quad_emission[pq] * front[:, None]
        return p, normal, mat, emit

    def sample_emitter(self, x, u0, u1, u2):
        """Uniform point on the union of emitter surfaces.

        Returns (point, emitter normal, radiance, area pdf); callers convert to solid angle.
        """
        em = self.emitters
        j = np.minimum(np.searchsorted(em["cdf"], u0, side="right"), len(em["cdf"]) - 1)
        kind = em["kind"][j]
        idx = em["index"][j]
        pts = np.empty((len(u0), 3))
        nrm = np.empty((len(u0), 3))
        rad = np.empty((len(u0), 3))
        s = kind == 0
        if np.any(s):
            z = 1.0 - 2.0 * u1[s]
            r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
            phi = 2.0 * math.pi * u2[s]
            dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
            ii = idx[s]
            pts[s] = self.sph_center[ii] + self.sph_radius[ii][:, None] * dirs
            nrm[s] = dirs
            rad[s] = self.sph_emission[ii]
        q = ~s
        if np.any(q):
            ii = idx[q]
            pts[q] = self.quad_origin[ii] + u1[q][:, None] * self.quad_u[ii] + u2[q][:, None] * self.quad_v[ii]
            nrm[q] = self.quad_normal[ii]
            rad[q] = self.quad_emission[ii]
        return pts, nrm, rad, 1.0 / em["total_area"]


def _vec(x, n=3):
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    if a.size == 1:
        a = np.repeat(a, n)
    if a.size != n:
        raise ValueError(f"expected {n} values, got {x!r}")
    return a


def scene_from_dict(desc: dict) -> Scene:
    cam = desc["camera"]
    w, h = cam.get("resolution", [32, 32])
    camera = Camera(_vec(cam["position"]), _vec(cam["look_at"]), _vec(cam.get("up", [0, 1, 0])),
                    float(cam.get("fov", 40.0)), int(w), int(h))
    mats = desc.get("materials", {}) or {}
    names = list(mats)
    if "default" not in mats:
        names.append("default")
        mats = dict(mats, default={"type": "lambertian", "albedo": 0.5})
    kind = np.array([_MATERIAL_TYPES[mats[k].get("type", "lambertian")] for k in names])
    albedo = np.array([_vec(mats[k].get("albedo", 0.5)) for k in names])
    expo = np.array([float(mats[k].get("exponent", 1.0)) for k in names])
    if np.any(albedo < 0) or np.any(albedo > 1):
        raise ValueError("albedo must lie in [0, 1]")
    materials = Materials(names, kind, albedo, expo)
    mid = {k: i for i, k in enumerate(names)}

    spheres, quads = [], []
    for sh in desc.get("shapes", []) or []:
        m = mid[sh.get("material", "default")]
        e = _vec(sh.get("emission", 0.0))
        t = sh["type"]
        if t == "sphere":
            spheres.append((_vec(sh["center"]), float(sh["radius"]), m, e))
        elif t == "quad":
            quads.append((_vec(sh["origin"]), _vec(sh["edge_u"]), _vec(sh["edge_v"]), m, e))
        elif t == "box":
            quads += _box_quads(_vec(sh["min"]), _vec(sh["max"]), m, e, bool(sh.get("inward", False)))
        else:
            raise ValueError(f"unknown shape type {t!r}")
    sph = list(zip(*spheres)) if spheres else [np.zeros((0, 3)), np.zeros(0), np.zeros(0, int), np.zeros((0, 3))]
    qd = list(zip(*quads)) if quads else [np.zeros((0, 3))] * 3 + [np.zeros(0, int), np.zeros((0, 3))]
    bounds = desc.get("bounds")
    return Scene(
        camera, materials,
        np.asarray(sph[0], dtype=np.float64).reshape(-1, 3), np.asarray(sph[1], dtype=np.float64),
        np.asarray(sph[2], dtype=int), np.asarray(sph[3], dtype=np.float64).reshape(-1, 3),
        np.asarray(qd[0], dtype=np.float64).reshape(-1, 3), np.asarray(qd[1], dtype=np.float64).reshape(-1, 3),
        np.asarray(qd[2], dtype=np.float64).reshape(-1, 3), np.asarray(qd[3], dtype=int),
        np.asarray(qd[4], dtype=np.float64).reshape(-1, 3),
        _vec(desc.get("environment", 0.0)),
        None if bounds is None else _vec(bounds["min"]),
        None if bounds is None else _vec(bounds["max"]),
    )


def _box_quads(lo, hi, m, e, inward):
    """Six faces with outward normals (inward=True flips them, e.g. for rooms)."""
    ex, ey, ez = np.diag(hi - lo)
    faces = [
        (lo, ez, ey),  # -x
        (lo + ex, ey, ez),  # +x
        (lo, ex, ez),  # -y
        (lo + ey, ez, ex),  # +y
        (lo, ey, ex),  # -z
        (lo + ez, ex, ey),  # +z
    ]
    out = []
    for o, u, v in faces:
        if inward:
            u, v = v, u
        out.append((o, u, v, m, e))
    return out


def load_scene(path) -> Scene:
    with open(path) as f:
        desc = yaml.safe_load(f)
    if not isinstance(desc, dict) or "camera" not in desc:
        raise ValueError(f"{path}: not a scene description (missing camera block)")
    return scene_from_dict(desc)


def scene_dir() -> Path:
    return Path(__file__).resolve().parent.parent / "scenes"
