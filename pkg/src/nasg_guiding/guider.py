"""Decode network outputs into guiding mixtures, KL training gradients, schedules and the sample buffer."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import sphdist
from .encoder import encode_inputs
from .sphdist import A_MAX, LAMBDA_MAX, LAMBDA_MIN, NasgComponent, NasgMixture, NasgParams
from .tinynn import AdamState, NetworkParameters, adam_step, backward, forward

log = logging.getLogger(__name__)

C_MIN, C_MAX = 0.01, 0.99
COS_THETA_LIMIT = 1.0 - 1e-6


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def softmax(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def _decode_pair(raw_s, raw_c):
    """Trig pair from two raw logits: sigmoid*2-1 then renormalized.

    Returns decoded (s, c) and a closure mapping (g_s, g_c) to raw-logit gradients.
    """
    sig_s, sig_c = sigmoid(raw_s), sigmoid(raw_c)
    ts, tc = 2.0 * sig_s - 1.0, 2.0 * sig_c - 1.0
    s, c, degenerate = sphdist.normalize_pair(ts, tc)
    n = np.where(degenerate, 1.0, np.hypot(ts, tc))

    def back(g_s, g_c):
        d_ts = (g_s * c * c - g_c * s * c) / n
        d_tc = (-g_s * s * c + g_c * s * s) / n
        d_ts = np.where(degenerate, 0.0, d_ts) * 2.0 * sig_s * (1.0 - sig_s)
        d_tc = np.where(degenerate, 0.0, d_tc) * 2.0 * sig_c * (1.0 - sig_c)
        return d_ts, d_tc

    return s, c, back


def _decode_cos_theta(raw):
    sig = sigmoid(raw)
    t = 2.0 * sig - 1.0
    free = np.abs(t) < COS_THETA_LIMIT
    ct = np.clip(t, -COS_THETA_LIMIT, COS_THETA_LIMIT)
    return ct, np.where(free, 2.0 * sig * (1.0 - sig), 0.0)


def _decode_exp(raw, lo, hi):
    val = np.exp(np.clip(np.asarray(raw, dtype=np.float64), -50.0, 50.0))
    free = (val > lo) & (val < hi)
    val = np.clip(val, lo, hi)
    return val, np.where(free, val, 0.0)


def _decode_c(raw):
    sig = sigmoid(raw)
    free = (sig > C_MIN) & (sig < C_MAX)
    return np.clip(sig, C_MIN, C_MAX), np.where(free, sig * (1.0 - sig), 0.0)


@dataclass
class Decoded:
    """Batch of decoded guiding distributions (leading batch shape, N components)."""

    weights: np.ndarray
    c: np.ndarray
    dc_draw: np.ndarray
    state: dict


class NasgModel:
    """8N+1 raw outputs: [5N trig | 2N (lambda, a) | N weight logits | c logit], component-major."""

    kind = "nasg"

    def __init__(self, n_components: int = 8, eps: float = 0.0):
        self.n = n_components
        self.eps = eps

    @property
    def output_dim(self) -> int:
        return 8 * self.n + 1

    def decode(self, raw) -> Decoded:
        raw = np.asarray(raw, dtype=np.float64)
        N = self.n
        lead = raw.shape[:-1]
        s0 = raw[..., : 5 * N].reshape(lead + (N, 5))
        s1 = raw[..., 5 * N : 7 * N].reshape(lead + (N, 2))
        ct, dct = _decode_cos_theta(s0[..., 0])
        sp, cp, back_phi = _decode_pair(s0[..., 1], s0[..., 2])
        st, ctau, back_tau = _decode_pair(s0[..., 3], s0[..., 4])
        lam, dlam = _decode_exp(s1[..., 0], LAMBDA_MIN, LAMBDA_MAX)
        a, da = _decode_exp(s1[..., 1], 0.0, A_MAX)
        weights = softmax(raw[..., 7 * N : 8 * N])
        c, dc = _decode_c(raw[..., 8 * N])
        params = NasgParams(ct, sp, cp, st, ctau, lam, a, np.full_like(lam, self.eps))
        state = dict(params=params, axes=params.axes(), dct=dct, back_phi=back_phi, back_tau=back_tau, dlam=dlam, da=da)
        return Decoded(weights, c, dc, state)

    def pdf(self, dec: Decoded, v):
        st = dec.state
        return sphdist.mixture_pdf_array(st["params"], dec.weights, v, st["axes"])

    def sample(self, dec: Decoded, xi_select, xi0, xi1, xi2):
        st = dec.state
        v, _ = sphdist.mixture_sample_array(st["params"], dec.weights, xi_select, xi0, xi1, xi2, st["axes"])
        return v

    def grad_raw(self, dec: Decoded, v):
        """Gradient of log q(v) w.r.t. raw outputs (c logit slot left at 0), and q(v)."""
        st = dec.state
        resp, g, q = sphdist.mixture_grad(st["params"], dec.weights, v, st["axes"])
        g = resp[..., None] * g
        N = self.n
        lead = q.shape
        out = np.zeros(lead + (self.output_dim,))
        trig = np.empty(lead + (N, 5))
        trig[..., 0] = g[..., 0] * st["dct"]
        trig[..., 1], trig[..., 2] = st["back_phi"](g[..., 1], g[..., 2])
        trig[..., 3], trig[..., 4] = st["back_tau"](g[..., 3], g[..., 4])
        out[..., : 5 * N] = trig.reshape(lead + (5 * N,))
        ex = np.stack([g[..., 5] * st["dlam"], g[..., 6] * st["da"]], axis=-1)
        out[..., 5 * N : 7 * N] = ex.reshape(lead + (2 * N,))
        out[..., 7 * N : 8 * N] = resp - dec.weights
        return out, q

    def to_mixture(self, dec: Decoded, index=()) -> NasgMixture:
        p = dec.state["params"]
        comps = [
            NasgComponent.from_euler(*(float(arr[index][i]) for arr in p[:7]), eps=float(p.eps[index][i]))
            for i in range(self.n)
        ]
        w = dec.weights[index]
        return NasgMixture(comps, (w / w.sum()).tolist())


class VmfModel:
    """5N+1 raw outputs: [3N (cos_theta, sin_phi, cos_phi) | N lambda | N weight logits | c logit]."""

    kind = "vmf"

    def __init__(self, n_components: int = 14):
        self.n = n_components

    @property
    def output_dim(self) -> int:
        return 5 * self.n + 1

    def decode(self, raw) -> Decoded:
        raw = np.asarray(raw, dtype=np.float64)
        N = self.n
        lead = raw.shape[:-1]
        s0 = raw[..., : 3 * N].reshape(lead + (N, 3))
        ct, dct = _decode_cos_theta(s0[..., 0])
        sp, cp, back_phi = _decode_pair(s0[..., 1], s0[..., 2])
        lam, dlam = _decode_exp(raw[..., 3 * N : 4 * N], LAMBDA_MIN, LAMBDA_MAX)
        weights = softmax(raw[..., 4 * N : 5 * N])
        c, dc = _decode_c(raw[..., 5 * N])
        sth = np.sqrt(1.0 - ct * ct)
        mu = np.stack([cp * sth, sp * sth, ct], axis=-1)
        state = dict(ct=ct, sp=sp, cp=cp, sth=sth, mu=mu, lam=lam, dct=dct, back_phi=back_phi, dlam=dlam)
        return Decoded(weights, c, dc, state)

    def _log_terms(self, dec, v):
        st = dec.state
        with np.errstate(divide="ignore"):
            lw = np.log(dec.weights)
        return lw + sphdist.vmf_log_pdf(st["mu"], st["lam"], np.asarray(v)[..., None, :])

    def pdf(self, dec: Decoded, v):
        return np.sum(np.exp(self._log_terms(dec, v)), axis=-1)

    def sample(self, dec: Decoded, xi_select, xi0, xi1, xi2=None):
        st = dec.state
        cdf = np.cumsum(dec.weights, axis=-1)
        xs = np.asarray(xi_select)[..., None] * cdf[..., -1:]
        idx = np.minimum(np.sum(cdf <= xs, axis=-1), self.n - 1)[..., None]
        mu = np.take_along_axis(st["mu"], idx[..., None], axis=-2)[..., 0, :]
        lam = np.take_along_axis(st["lam"], idx, axis=-1)[..., 0]
        return sphdist.vmf_sample_directions(mu, lam, xi0, xi1)

    def grad_raw(self, dec: Decoded, v):
        st = dec.state
        v = np.asarray(v, dtype=np.float64)
        terms = self._log_terms(dec, v)
        m = np.max(terms, axis=-1, keepdims=True)
        e = np.exp(terms - m)
        tot = np.sum(e, axis=-1, keepdims=True)
        resp = e / tot
        q = (tot * np.exp(m))[..., 0]
        vb = v[..., None, :]
        lam, ct, sp, cp, sth = st["lam"], st["ct"], st["sp"], st["cp"], st["sth"]
        dot = np.einsum("...i,...i->...", st["mu"], vb)
        with np.errstate(over="ignore"):
            d_lam = (dot - 1.0) + 1.0 / lam - 2.0 / np.expm1(2.0 * lam)
        dsth = -ct / sth
        vx, vy, vz = vb[..., 0], vb[..., 1], vb[..., 2]
        d_ct = lam * (vx * cp * dsth + vy * sp * dsth + vz)
        d_sp = lam * vy * sth
        d_cp = lam * vx * sth
        N = self.n
        lead = q.shape
        out = np.zeros(lead + (self.output_dim,))
        trig = np.empty(lead + (N, 3))
        trig[..., 0] = resp * d_ct * st["dct"]
        trig[..., 1], trig[..., 2] = st["back_phi"](resp * d_sp, resp * d_cp)
        out[..., : 3 * N] = trig.reshape(lead + (3 * N,))
        out[..., 3 * N : 4 * N] = resp * d_lam * st["dlam"]
        out[..., 4 * N : 5 * N] = resp - dec.weights
        return out, q


def make_model(kind: str, n_components: Optional[int] = None):
    if kind == "nasg":
        return NasgModel(n_components or 8)
    if kind == "vmf":
        return VmfModel(n_components or 14)
    raise ValueError(f"unknown guiding model {kind!r}")


# ---------------------------------------------------------------------------
# single-distribution API


@dataclass
class GuideDistribution:
    mixture: NasgMixture
    c: float
    raw: Optional[np.ndarray] = None


def decode(raw, n_components: Optional[int] = None) -> GuideDistribution:
    raw = np.asarray(raw, dtype=np.float64)
    if n_components is None:
        if (raw.size - 1) % 8:
            raise ValueError(f"raw output length {raw.size} is not 8N+1")
        n_components = (raw.size - 1) // 8
    model = NasgModel(n_components)
    if raw.shape != (model.output_dim,):
        raise ValueError(f"expected {model.output_dim} raw outputs, got {raw.shape}")
    dec = model.decode(raw)
    return GuideDistribution(model.to_mixture(dec), float(dec.c), raw.copy())


def guided_pdf(g: GuideDistribution, b: float, bsdf_pdf: float, v) -> float:
    """One-sample MIS pdf q_hat = c' q + (1 - c') p_bsdf, with c' = b c."""
    cb = b * g.c
    return cb * sphdist.mixture_pdf(g.mixture, v) + (1.0 - cb) * bsdf_pdf


@dataclass
class TrainingSample:
    position: np.ndarray
    omega_o: np.ndarray
    normal: np.ndarray
    omega_i: np.ndarray
    p_value: float
    q_sampling: float
    bsdf_pdf_at_wi: float
    bsdf_is_delta: bool = False


def kl_gradient_batch(model, raw, omega_i, p_value, q_sampling, bsdf_pdf, b, e=0.2):
    """Per-sample gradient of the blended one-sample KL estimator w.r.t. raw outputs.

    Returns ``(grad (R, d), loss_surrogate (R,), dropped mask (R,))``. The surrogate is
    -(p / q_rec) [e log q_hat + (1 - e) log q], whose raw-output gradient is ``grad``
    when p and q_rec are held fixed.
    """
    dec = model.decode(raw)
    g_logq, q = model.grad_raw(dec, omega_i)
    p_value = np.asarray(p_value, dtype=np.float64)
    bsdf_pdf = np.asarray(bsdf_pdf, dtype=np.float64)
    cb = b * dec.c
    qhat = cb * q + (1.0 - cb) * bsdf_pdf
    coef = -p_value / np.asarray(q_sampling, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        mix_share = np.where(qhat > 0, cb * q / qhat, 0.0)
        scale = coef * (e * mix_share + (1.0 - e))
        grad = scale[..., None] * g_logq
        dc = coef * e * b * (q - bsdf_pdf) / qhat * dec.dc_draw
        grad[..., -1] = dc
        loss = coef * (e * np.log(qhat) + (1.0 - e) * np.log(q))
    zero = p_value == 0.0
    grad = np.where(zero[..., None], 0.0, grad)
    loss = np.where(zero, 0.0, loss)
    dropped = ~(np.all(np.isfinite(grad), axis=-1) & np.isfinite(loss)) & ~zero
    grad = np.where(dropped[..., None], 0.0, grad)
    loss = np.where(dropped, 0.0, loss)
    return grad, loss, dropped


def kl_loss_gradient(sample: TrainingSample, g: GuideDistribution, b: float, e: float = 0.2) -> np.ndarray:
    if g.raw is None:
        raise ValueError("guide distribution carries no raw outputs to differentiate")
    if not sample.q_sampling > 0:
        raise ValueError("q_sampling must be positive")
    model = NasgModel(len(g.mixture.components))
    grad, _, dropped = kl_gradient_batch(
        model, g.raw[None], np.asarray(sample.omega_i)[None], [sample.p_value], [sample.q_sampling],
        [sample.bsdf_pdf_at_wi], b, e,
    )
    if dropped[0]:
        log.debug("dropped non-finite training sample")
    return grad[0]


# ---------------------------------------------------------------------------
# schedules


@dataclass
class BlendSchedule:
    M: int = 4
    B: int = 64
    i: int = 0


def blend_coefficient(schedule: BlendSchedule) -> float:
    return min(1.0, (schedule.i // schedule.M) / schedule.B)


def stride_update(l: float, s: int, S: int) -> float:
    """l <- max(1, l sqrt(s / S)); tile edge for the one-pixel-per-tile collection."""
    if S <= 0 or s < 0:
        raise ValueError("need s >= 0 and S > 0")
    if s == 0:
        log.debug("no samples collected; tile stride reset to 1")
    return max(1.0, l * math.sqrt(s / S))


def training_steps(S: int, t: int, nu: int) -> int:
    return nu * math.ceil(S / t)


# ---------------------------------------------------------------------------
# sample buffer and training

_FIELDS = ("position", "omega_o", "normal", "omega_i", "p_value", "q_sampling", "bsdf_pdf")


class SampleBuffer:
    """Training records of the current iteration, capped at ``capacity``."""

    def __init__(self, capacity: int = 2**16):
        self.capacity = capacity
        self._parts: list[dict] = []
        self.data: Optional[dict] = None

    def add(self, **arrays) -> None:
        """Append a chunk of records (arrays with a shared leading length)."""
        if len(arrays[_FIELDS[0]]):
            self._parts.append({k: np.asarray(arrays[k]) for k in _FIELDS})

    def add_samples(self, samples) -> None:
        recs = [s for s in samples if not s.bsdf_is_delta]
        if recs:
            self.add(
                position=np.array([s.position for s in recs], dtype=np.float64),
                omega_o=np.array([s.omega_o for s in recs], dtype=np.float64),
                normal=np.array([s.normal for s in recs], dtype=np.float64),
                omega_i=np.array([s.omega_i for s in recs], dtype=np.float64),
                p_value=np.array([s.p_value for s in recs], dtype=np.float64),
                q_sampling=np.array([s.q_sampling for s in recs], dtype=np.float64),
                bsdf_pdf=np.array([s.bsdf_pdf_at_wi for s in recs], dtype=np.float64),
            )

    def merge(self, rng: np.random.Generator) -> int:
        """Concatenate pending chunks; keeps a random subset if over capacity. Returns the raw count."""
        if not self._parts:
            self.data = None
            return 0
        data = {k: np.concatenate([p[k] for p in self._parts]) for k in _FIELDS}
        self._parts = []
        n = len(data["p_value"])
        if n > self.capacity:
            keep = np.sort(rng.choice(n, self.capacity, replace=False))
            data = {k: v[keep] for k, v in data.items()}
        self.data = data
        return n

    def __len__(self) -> int:
        return 0 if self.data is None else len(self.data["p_value"])

    def clear(self) -> None:
        self._parts = []
        self.data = None


class Guider:
    """Owns the live network, its Adam state and the published inference snapshot."""

    def __init__(self, model, bounds, *, seed: int = 0, lr: float = 0.002, e: float = 0.2,
                 capacity: int = 2**16, batch_size: int = 2**12, step_factor: int = 1):
        self.model = model
        self.bounds = (np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64))
        self.e = e
        self.capacity = capacity
        self.batch_size = batch_size
        self.step_factor = step_factor
        self.params = NetworkParameters.init(model.output_dim, np.random.default_rng([seed, 7]))
        self.adam = AdamState(lr=lr)
        self.snapshot = self.params.snapshot()
        self.dropped = 0
        self.seed = seed

    def encode(self, p, omega_o, n):
        return encode_inputs(p, omega_o, n, *self.bounds)

    def infer(self, p, omega_o, n, snapshot: Optional[NetworkParameters] = None) -> Decoded:
        raw = forward(snapshot or self.snapshot, self.encode(p, omega_o, n))
        return self.model.decode(raw)

    def publish(self) -> None:
        self.snapshot = self.params.snapshot()

    def train_iteration(self, buffer: SampleBuffer, b: float, iteration: int) -> dict:
        """Run T = nu ceil(S/t) Adam steps over the buffer, then publish a snapshot."""
        stats = dict(steps=0, loss=float("nan"), size=len(buffer))
        if len(buffer) == 0:
            return stats
        d = buffer.data
        feats = self.encode(d["position"], d["omega_o"], d["normal"])
        n = len(feats)
        rng = np.random.default_rng([self.seed, 1, iteration])
        t = min(self.batch_size, n)
        steps = training_steps(self.capacity, self.batch_size, self.step_factor)
        order = rng.permutation(n)
        pos = 0
        losses = []
        for _ in range(steps):
            if pos + t > n:
                order = rng.permutation(n)
                pos = 0
            idx = order[pos : pos + t]
            pos += t
            out, cache = forward(self.params, feats[idx], keep_cache=True)
            grad, loss, dropped = kl_gradient_batch(
                self.model, out, d["omega_i"][idx], d["p_value"][idx], d["q_sampling"][idx],
                d["bsdf_pdf"][idx], b, self.e,
            )
            self.dropped += int(dropped.sum())
            grads = backward(self.params, cache, grad / t)
            adam_step(self.adam, self.params, grads)
            losses.append(float(loss.mean()))
        self.publish()
        stats.update(steps=steps, loss=float(np.mean(losses)))
        return stats


class TrainingLog:
    """CSV rows: iteration, buffer_size, mean_loss, b, wall_time."""

    header = "iteration,buffer_size,mean_loss,b,wall_time\n"

    def __init__(self, path=None):
        self.path = path
        self.rows = []
        self.t0 = time.perf_counter()
        if path is not None:
            with open(path, "w") as f:
                f.write(self.header)

    def record(self, iteration: int, size: int, loss: float, b: float) -> None:
        row = (iteration, size, loss, b, time.perf_counter() - self.t0)
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write("%d,%d,%.8g,%.8g,%.4f\n" % row)
