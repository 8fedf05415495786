import math

import numpy as np
import pytest
from scipy import optimize

from nasg_guiding import sphdist
from nasg_guiding.fit import BandTarget, _rows
from nasg_guiding.guider import (
    BlendSchedule,
    GuideDistribution,
    Guider,
    NasgModel,
    SampleBuffer,
    TrainingLog,
    TrainingSample,
    VmfModel,
    blend_coefficient,
    decode,
    guided_pdf,
    kl_gradient_batch,
    kl_loss_gradient,
    make_model,
    stride_update,
    training_steps,
)

from oracles import random_unit, ref_frame, ref_G, ref_K, rel_err, sphere_quadrature

N = 8


# --- decode ---------------------------------------------------------------------


def test_decode_all_zero_raw():
    g = decode(np.zeros(8 * N + 1))
    assert g.c == 0.5
    np.testing.assert_allclose(g.mixture.weights, np.full(N, 1 / N), rtol=1e-15)
    for c in g.mixture.components:
        assert c.lam == 1.0 and c.a == 1.0
        assert c.euler == (0.0, 0.0, 1.0, 0.0, 1.0)  # cos_theta 0, both pairs canonical
        np.testing.assert_allclose(c.frame.z_axis, [1, 0, 0], atol=1e-15)


def test_decode_weight_logits_shift_invariant():
    rng = np.random.default_rng(0)
    raw = rng.normal(size=8 * N + 1)
    shifted = raw.copy()
    shifted[7 * N : 8 * N] += 3.7
    np.testing.assert_allclose(decode(raw).mixture.weights, decode(shifted).mixture.weights, rtol=1e-12)


def test_decode_is_total_on_random_raws():
    rng = np.random.default_rng(1)
    for scale in (0.1, 1.0, 10.0, 1e3):
        for _ in range(20):
            g = decode(rng.normal(scale=scale, size=8 * N + 1))
            assert 0.01 <= g.c <= 0.99
            w = np.asarray(g.mixture.weights)
            assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-6
            for c in g.mixture.components:
                assert sphdist.LAMBDA_MIN <= c.lam <= sphdist.LAMBDA_MAX
                assert 0 <= c.a <= sphdist.A_MAX
                M = c.frame.matrix()
                assert np.max(np.abs(M @ M.T - np.eye(3))) < 1e-6


def test_decode_rejects_bad_length():
    with pytest.raises(ValueError):
        decode(np.zeros(10))


def test_make_model_dimensions():
    assert make_model("nasg").output_dim == 65
    assert make_model("vmf").output_dim == 71
    assert make_model("nasg", 8).output_dim - 1 == 64  # 64 mixture scalars
    assert make_model("vmf", 14).output_dim - 1 == 70
    with pytest.raises(ValueError):
        make_model("kent")


# --- guided pdf -------------------------------------------------------------------


def lobe_with_peak_pdf(target):
    """Single isotropic lobe whose pdf on its axis equals ``target``."""
    lam = optimize.brentq(lambda l: l / (2 * math.pi * -math.expm1(-2 * l)) - target, 1e-3, 100.0, xtol=1e-15)
    c = sphdist.NasgComponent.from_euler(1, 0, 1, 0, 1, lam)
    return sphdist.NasgMixture([c], [1.0])


def test_guided_pdf_b_zero_is_bsdf():
    g = GuideDistribution(lobe_with_peak_pdf(0.2), 0.7)
    assert guided_pdf(g, 0.0, 0.123, [0, 0, 1]) == 0.123


def test_guided_pdf_blend_arithmetic():
    g = GuideDistribution(lobe_with_peak_pdf(0.2), 0.5)
    assert guided_pdf(g, 1.0, 0.4, [0, 0, 1]) == pytest.approx(0.3, abs=1e-12)


def test_guided_pdf_integrates_to_one():
    rng = np.random.default_rng(2)
    d, cell = sphere_quadrature(512, 1024)
    n = np.array([0.0, 0.0, 1.0])
    bsdf = np.maximum(d @ n, 0) / math.pi
    model = NasgModel(4)
    for b in (0.0, 0.3, 1.0):
        raw = rng.normal(size=model.output_dim)
        raw[20:28] = rng.uniform(-1, 2, 8)
        dec = model.decode(raw[None])
        q = model.pdf(_rows(dec, 1, len(d)), d)
        cb = b * dec.c[0]
        assert abs(np.sum(cb * q + (1 - cb) * bsdf) * cell - 1) < 1e-3


# --- KL gradient ------------------------------------------------------------------


def sample_for(g, rng, p=1.3):
    return TrainingSample(np.zeros(3), np.array([0, 0, 1.0]), np.array([0, 0, 1.0]),
                          random_unit(rng), p, 0.7, 0.25)


def test_kl_gradient_zero_for_zero_target():
    rng = np.random.default_rng(3)
    g = decode(rng.normal(size=8 * N + 1))
    s = sample_for(g, rng, p=0.0)
    assert np.all(kl_loss_gradient(s, g, 0.5) == 0.0)


def test_kl_gradient_linear_in_target_value():
    rng = np.random.default_rng(4)
    g = decode(rng.normal(size=8 * N + 1))
    s = sample_for(g, rng)
    s2 = TrainingSample(**{**s.__dict__, "p_value": 2 * s.p_value})
    np.testing.assert_array_equal(kl_loss_gradient(s2, g, 0.5), 2 * kl_loss_gradient(s, g, 0.5))


def surrogate(raw, n, v, p, q_rec, bsdf, b, e):
    """Loss surrogate from an independently evaluated mixture pdf."""
    g = decode(raw, n)
    q = 0.0
    for c, w in zip(g.mixture.components, g.mixture.weights):
        x, y, z = ref_frame(*c.euler)
        q += w * ref_G(x, y, z, c.lam, c.a, v)[0] / ref_K(c.lam, c.a)
    cb = b * g.c
    qhat = cb * q + (1 - cb) * bsdf
    return -(p / q_rec) * (e * math.log(qhat) + (1 - e) * math.log(q))


@pytest.mark.parametrize("seed", range(5))
def test_kl_gradient_matches_finite_differences_through_decode(seed):
    rng = np.random.default_rng([5, seed])
    n = 3
    raw = rng.normal(scale=0.8, size=8 * n + 1)
    raw[5 * n : 7 * n] = rng.uniform(-1, 2, 2 * n)
    g = decode(raw, n)
    # a direction with real mixture mass
    v, _ = sphdist.mixture_sample(g.mixture, *rng.random(4))
    s = TrainingSample(np.zeros(3), np.zeros(3), np.zeros(3), v, 0.9, 0.6, 0.2)
    grad = kl_loss_gradient(s, g, 0.7, e=0.2)
    h = 1e-5
    fd = np.zeros_like(raw)
    for i in range(raw.size):
        d = np.zeros_like(raw)
        d[i] = h
        fd[i] = (surrogate(raw + d, n, v, 0.9, 0.6, 0.2, 0.7, 0.2) - surrogate(raw - d, n, v, 0.9, 0.6, 0.2, 0.7, 0.2)) / (2 * h)
    assert rel_err(grad, fd) < 1e-4


def test_vmf_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    model = VmfModel(4)
    raw = rng.normal(scale=0.8, size=model.output_dim)
    raw[12:16] = rng.uniform(0, 2, 4)
    dec = model.decode(raw[None])
    v = model.sample(dec, *rng.random((3, 1)))
    g, _ = model.grad_raw(dec, v)
    f = lambda r: math.log(model.pdf(model.decode(r[None]), v)[0])
    fd = np.array([(f(raw + h) - f(raw - h)) / 2e-5 for h in np.eye(raw.size) * 1e-5])
    assert rel_err(g[0], fd) < 1e-4


def test_kl_gradient_drops_non_finite_samples():
    model = NasgModel(2)
    raw = np.zeros((2, model.output_dim))
    v = np.array([[1.0, 0, 0], [1.0, 0, 0]])
    grad, loss, dropped = kl_gradient_batch(model, raw, v, [1.0, 1.0], [1.0, np.inf * 0], [0.1, 0.1], 0.5)
    assert dropped.tolist() == [False, True]
    assert np.all(grad[1] == 0) and loss[1] == 0


def test_kl_gradient_estimator_is_unbiased():
    """Mean one-sample gradient under q_hat sampling equals the quadrature gradient."""
    rng = np.random.default_rng(7)
    n = 2
    model = NasgModel(n)
    raw = rng.normal(scale=0.6, size=model.output_dim)
    raw[5 * n : 7 * n] = [1.0, 0.5, 0.8, 1.2]
    b, e = 0.8, 0.2
    normal = np.array([0.0, 0.0, 1.0])
    mu = np.array([0.3, 0.2, 0.93])
    mu /= np.linalg.norm(mu)
    target = lambda v: np.exp(sphdist.vmf_log_pdf(mu, 6.0, v))
    bsdf_pdf = lambda v: np.maximum(v @ normal, 0) / math.pi

    # Monte Carlo: draw from q_hat = c' q + (1 - c') bsdf
    M = 200_000
    dec = model.decode(np.broadcast_to(raw, (M, raw.size)))
    cb = b * dec.c[0]
    use_q = rng.random(M) < cb
    v = np.empty((M, 3))
    v[use_q] = model.sample(_rows(model.decode(raw[None]), 1, int(use_q.sum())), *rng.random((4, int(use_q.sum()))))
    k = int((~use_q).sum())
    r1, r2 = rng.random(k), rng.random(k)
    rr = np.sqrt(r1)
    v[~use_q] = np.stack([rr * np.cos(2 * math.pi * r2), rr * np.sin(2 * math.pi * r2), np.sqrt(1 - r1)], 1)
    qhat = cb * model.pdf(dec, v) + (1 - cb) * bsdf_pdf(v)
    grad, _, _ = kl_gradient_batch(model, np.broadcast_to(raw, (M, raw.size)), v, target(v), qhat, bsdf_pdf(v), b, e)
    mean = grad.mean(0)
    se = grad.std(0, ddof=1) / math.sqrt(M)

    # quadrature objective -int p (e log q_hat + (1 - e) log q), differentiated numerically
    d, cell = sphere_quadrature(256, 512)
    pd, bd = target(d), bsdf_pdf(d)

    def objective(r):
        dd = model.decode(r[None])
        q = model.pdf(_rows(dd, 1, len(d)), d)
        c = b * dd.c[0]
        qh = c * q + (1 - c) * bd
        return -np.sum(pd * (e * np.log(qh) + (1 - e) * np.log(q))) * cell

    h = 1e-5
    quad = np.array([(objective(raw + dv) - objective(raw - dv)) / (2 * h) for dv in np.eye(raw.size) * h])
    assert np.all(np.abs(mean - quad) <= 3 * se + 1e-4 * np.abs(quad).max())


# --- schedules ----------------------------------------------------------------------


@pytest.mark.parametrize("i,expected", [(0, 0.0), (3, 0.0), (4, 1 / 64), (255, 63 / 64), (256, 1.0), (10_000, 1.0)])
def test_blend_coefficient(i, expected):
    assert blend_coefficient(BlendSchedule(4, 64, i)) == expected


def test_blend_coefficient_monotone():
    b = [blend_coefficient(BlendSchedule(4, 64, i)) for i in range(400)]
    assert all(x <= y for x, y in zip(b, b[1:]))
    assert b.index(1.0) == 256


@pytest.mark.parametrize("l,s,expected", [(4.0, 2**16, 4.0), (4.0, 2**14, 2.0), (4.0, 2**18, 8.0), (4.0, 0, 1.0),
                                          (1.0, 10, 1.0)])
def test_stride_update(l, s, expected):
    assert stride_update(l, s, 2**16) == expected


def test_training_steps_default():
    assert training_steps(2**16, 2**12, 1) == 16
    assert training_steps(100, 64, 2) == 4


# --- buffer and training --------------------------------------------------------------


def records(n, rng):
    return dict(position=rng.random((n, 3)), omega_o=random_unit(rng, n), normal=random_unit(rng, n),
                omega_i=random_unit(rng, n), p_value=rng.random(n), q_sampling=rng.random(n) + 0.1,
                bsdf_pdf=rng.random(n))


def test_sample_buffer_capacity_and_clear():
    rng = np.random.default_rng(8)
    buf = SampleBuffer(100)
    buf.add(**records(70, rng))
    buf.add(**records(70, rng))
    assert buf.merge(rng) == 140
    assert len(buf) == 100
    buf.clear()
    assert buf.merge(rng) == 0 and len(buf) == 0


def test_sample_buffer_skips_delta_samples():
    buf = SampleBuffer(10)
    s = TrainingSample(np.zeros(3), np.zeros(3), np.zeros(3), np.array([0, 0, 1.0]), 1.0, 1.0, 0.0, True)
    buf.add_samples([s])
    assert buf.merge(np.random.default_rng(0)) == 0


def make_guider(seed=0, **kw):
    return Guider(NasgModel(4), (np.zeros(3), np.ones(3)), seed=seed, **kw)


def test_train_iteration_empty_buffer_is_noop():
    g = make_guider()
    before = [w.copy() for w in g.params.weights]
    stats = g.train_iteration(SampleBuffer(), 1.0, 0)
    assert stats["steps"] == 0
    for a, b in zip(before, g.params.weights):
        np.testing.assert_array_equal(a, b)


def test_train_iteration_is_deterministic_and_publishes():
    out = []
    for _ in range(2):
        rng = np.random.default_rng(9)
        g = make_guider(capacity=512, batch_size=128)
        snap = g.snapshot
        buf = SampleBuffer(512)
        buf.add(**records(300, rng))
        buf.merge(rng)
        stats = g.train_iteration(buf, 0.5, 3)
        assert stats["steps"] == 4
        assert g.snapshot is not snap
        out.append(g.params.weights)
    for a, b in zip(*out):
        np.testing.assert_array_equal(a, b)


def test_training_reduces_kl_on_frozen_target():
    """Fixed shading point, analytic band target: 32-iteration averages of the KL keep falling."""
    B = 256
    g = Guider(NasgModel(8), (np.zeros(3), np.ones(3)), seed=0, capacity=B, batch_size=B, lr=5e-5)
    target = BandTarget(k_band=30.0)
    d, cell = sphere_quadrature(128, 256)
    pt = target.pdf(d)
    Z = pt.sum() * cell
    pt /= Z
    P, wo = np.array([[0.5, 0.5, 0.5]]), np.array([[0.0, 0.0, 1.0]])
    rng = np.random.default_rng(0)
    kls = []
    for i in range(512):
        v = target.sample(B, rng)
        pv = target.pdf(v) / Z
        buf = SampleBuffer(B)
        buf.add(position=np.repeat(P, B, 0), omega_o=np.repeat(wo, B, 0), normal=np.repeat(wo, B, 0),
                omega_i=v, p_value=pv, q_sampling=pv, bsdf_pdf=np.full(B, 1 / (4 * math.pi)))
        buf.merge(rng)
        g.train_iteration(buf, 1.0, i)
        dec = g.infer(P, wo, wo)
        q = g.model.pdf(_rows(dec, 1, len(d)), d)
        m = pt > 0
        kls.append(np.sum(pt[m] * np.log(pt[m] / q[m])) * cell)
    window = np.asarray(kls).reshape(16, 32).mean(axis=1)
    assert np.all(np.diff(window) < 0)
    assert window[-1] < 0.05 * window[0]


def test_training_log_csv(tmp_path):
    path = tmp_path / "train.csv"
    log = TrainingLog(path)
    log.record(0, 10, 0.5, 0.0)
    log.record(1, 12, 0.25, 0.015625)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,buffer_size,mean_loss,b,wall_time"
    assert lines[1].startswith("0,10,0.5,0,") and lines[2].startswith("1,12,0.25,0.015625,")
