import math

import numpy as np
import pytest

from nasg_guiding.guider import Guider, NasgModel
from nasg_guiding.tracer.bsdf import eval_bsdf, reflect, sample_bsdf
from nasg_guiding.tracer.film import Accumulator, mape, ramp_weight, read_pfm, write_pfm, write_png
from nasg_guiding.tracer.integrator import GuideContext, mis_weight, trace_paths
from nasg_guiding.tracer.render import collection_mask, render_samples
from nasg_guiding.tracer.rng import PathRng
from nasg_guiding.tracer.scene import T_MIN, load_scene, scene_dir, scene_from_dict

from oracles import random_unit, sphere_quadrature


def random_scene(rng):
    shapes = []
    for _ in range(6):
        shapes.append({"type": "sphere", "center": rng.uniform(-2, 2, 3).tolist(), "radius": float(rng.uniform(0.2, 0.8))})
    for _ in range(6):
        shapes.append({"type": "quad", "origin": rng.uniform(-2, 2, 3).tolist(),
                       "edge_u": rng.normal(size=3).tolist(), "edge_v": rng.normal(size=3).tolist()})
    return scene_from_dict({"camera": {"position": [0, 0, 5], "look_at": [0, 0, 0]}, "shapes": shapes})


def brute_force_t(scene, o, d):
    """Nearest t > T_MIN by scanning every primitive separately."""
    best = math.inf
    for c, r in zip(scene.sph_center, scene.sph_radius):
        oc = o - c
        b = oc @ d
        disc = b * b - (oc @ oc - r * r)
        if disc >= 0:
            for t in (-b - math.sqrt(disc), -b + math.sqrt(disc)):
                if t > T_MIN:
                    best = min(best, t)
                    break
    for q0, u, v in zip(scene.quad_origin, scene.quad_u, scene.quad_v):
        # solve o + t d = q0 + s u + w v
        A = np.column_stack([u, v, -d])
        if abs(np.linalg.det(A)) < 1e-12:
            continue
        s, w, t = np.linalg.solve(A, o - q0)
        if t > T_MIN and 0 <= s <= 1 and 0 <= w <= 1:
            best = min(best, t)
    return best


# --- geometry -------------------------------------------------------------------------


def test_intersect_matches_brute_force_scan():
    rng = np.random.default_rng(0)
    scene = random_scene(rng)
    n = 10_000
    o = rng.uniform(-3, 3, (n, 3))
    d = random_unit(rng, n)
    aim = rng.uniform(-2, 2, (n // 2, 3)) - o[: n // 2]
    d[: n // 2] = aim / np.linalg.norm(aim, axis=1, keepdims=True)
    rec = scene.intersect(o, d)
    ref = np.array([brute_force_t(scene, o[i], d[i]) for i in range(n)])
    assert np.array_equal(rec["hit"], np.isfinite(ref))
    hit = rec["hit"]
    np.testing.assert_allclose(rec["t"][hit], ref[hit], rtol=1e-9, atol=1e-9)
    assert hit.mean() > 0.2


def test_ray_from_unit_sphere_center_hits_at_one():
    scene = scene_from_dict({"camera": {"position": [0, 0, 5], "look_at": [0, 0, 0]},
                             "shapes": [{"type": "sphere", "center": [0, 0, 0], "radius": 1.0}]})
    d = random_unit(np.random.default_rng(1), 100)
    rec = scene.intersect(np.zeros((100, 3)), d)
    assert rec["hit"].all()
    np.testing.assert_allclose(rec["t"], 1.0, rtol=1e-14)


def test_missing_ray_returns_environment_sentinel():
    scene = scene_from_dict({"camera": {"position": [0, 0, 5], "look_at": [0, 0, 0]},
                             "shapes": [{"type": "sphere", "center": [0, 0, 0], "radius": 1.0}]})
    rec = scene.intersect(np.array([[0.0, 0, 5]]), np.array([[0.0, 0, 1]]))
    assert not rec["hit"][0] and rec["kind"][0] == -1 and np.isinf(rec["t"][0])


def test_scene_validation():
    cam = {"position": [0, 0, 5], "look_at": [0, 0, 0]}
    with pytest.raises(ValueError):
        scene_from_dict({"camera": cam, "shapes": [{"type": "sphere", "center": [0, 0, 0], "radius": 1, "emission": -1}]})
    with pytest.raises(ValueError):
        scene_from_dict({"camera": cam, "shapes": [{"type": "sphere", "center": [0, 0, 0], "radius": 1}],
                         "bounds": {"min": [0, 0, 0], "max": [0.5, 0.5, 0.5]}})
    with pytest.raises(ValueError):
        scene_from_dict({"camera": cam, "shapes": [{"type": "torus"}]})


def test_shipped_scenes_load():
    for name in ("box", "furnace"):
        s = load_scene(scene_dir() / f"{name}.yaml")
        assert np.all(s.bounds_min <= s.bounds_max)
    assert load_scene(scene_dir() / "box.yaml").has_emitters


# --- BSDFs ------------------------------------------------------------------------------


def one_material(kind, albedo=0.8, exponent=1.0):
    return scene_from_dict({"camera": {"position": [0, 0, 5], "look_at": [0, 0, 0]},
                            "materials": {"m": {"type": kind, "albedo": albedo, "exponent": exponent}},
                            "shapes": [{"type": "sphere", "center": [0, 0, 0], "radius": 1, "material": "m"}]}).materials


def test_lambertian_pdf_integrates_to_one_and_furnace():
    mats = one_material("lambertian", 0.8)
    d, cell = sphere_quadrature(1024, 2048)
    n = np.tile([0.0, 0.0, 1.0], (len(d), 1))
    f, pdf = eval_bsdf(mats, np.zeros(len(d), int), n, n, d)
    assert abs(pdf.sum() * cell - 1) < 1e-4
    assert abs(np.sum(f[:, 0] * np.maximum(d[:, 2], 0)) * cell - 0.8) < 1e-4


def test_phong_pdf_integrates_to_one():
    mats = one_material("phong", 0.8, 20.0)
    d, cell = sphere_quadrature(1024, 2048)
    wo = np.tile([0.6, 0.0, 0.8], (len(d), 1))
    n = np.tile([0.0, 0.0, 1.0], (len(d), 1))
    _, pdf = eval_bsdf(mats, np.zeros(len(d), int), n, wo, d)
    assert abs(pdf.sum() * cell - 1) < 1e-3


def test_lambertian_samples_are_cosine_distributed():
    rng = np.random.default_rng(2)
    mats = one_material("lambertian")
    m = 200_000
    n = np.tile([0.0, 0.0, 1.0], (m, 1))
    wi, delta = sample_bsdf(mats, np.zeros(m, int), n, n, rng.random(m), rng.random(m))
    assert not delta.any()
    c = wi[:, 2]
    assert c.min() >= 0
    # E[cos] = 2/3, Var[cos] = 1/18 under cos/pi
    assert abs(c.mean() - 2 / 3) < 3 * math.sqrt(1 / 18 / m)


def test_mirror_reflects_exactly():
    rng = np.random.default_rng(3)
    mats = one_material("mirror", 0.9)
    n = random_unit(rng, 100)
    wo = random_unit(rng, 100)
    wo = np.where(np.sum(wo * n, 1, keepdims=True) < 0, -wo, wo)
    wi, delta = sample_bsdf(mats, np.zeros(100, int), n, wo, rng.random(100), rng.random(100))
    assert delta.all()
    np.testing.assert_allclose(wi, 2 * np.sum(wo * n, 1, keepdims=True) * n - wo, atol=1e-15)
    np.testing.assert_allclose(reflect(np.array([[1.0, 0, 1]]), np.array([[0.0, 0, 1]])), [[-1, 0, 1]])


# --- light transport ---------------------------------------------------------------------

R_LIGHT, H_LIGHT, LE, RHO = 0.2, 1.0, 5.0, 0.6


def sphere_light_scene(blocker=False):
    shapes = [
        {"type": "quad", "origin": [-10, 0, -10], "edge_u": [0, 0, 20], "edge_v": [20, 0, 0], "material": "floor"},
        {"type": "sphere", "center": [0, H_LIGHT, 0], "radius": R_LIGHT, "emission": LE, "material": "black"},
    ]
    if blocker:
        shapes.append({"type": "quad", "origin": [-1, 0.5, -1], "edge_u": [2, 0, 0], "edge_v": [0, 0, 2], "material": "black"})
    return scene_from_dict({
        "camera": {"position": [2, 1, 0], "look_at": [0, 0, 0], "up": [0, 1, 0], "fov": 0.01, "resolution": [1, 1]},
        "materials": {"floor": {"type": "lambertian", "albedo": RHO}, "black": {"type": "lambertian", "albedo": 0}},
        "shapes": shapes,
    })


def cap_radiance():
    # irradiance from a sphere centred on the normal is pi Le sin^2(alpha); outgoing = rho/pi E
    return RHO * LE * (R_LIGHT / H_LIGHT) ** 2


def test_direct_light_matches_cap_irradiance():
    scene = sphere_light_scene()
    n = 1_000_000
    L, _, stats = render_samples(scene, np.zeros(n, int), np.arange(n), 0, max_depth=1, chunk=65536)
    x = L[:, 0]
    assert stats.nonfinite == 0
    assert abs(x.mean() - cap_radiance()) < 3 * x.std(ddof=1) / math.sqrt(n)


def test_direct_light_with_guiding_stays_unbiased():
    scene = sphere_light_scene()
    g = Guider(NasgModel(8), (scene.bounds_min, scene.bounds_max), seed=5)
    rng = np.random.default_rng(5)
    for w in g.params.weights:
        w += rng.normal(scale=0.3, size=w.shape).astype(w.dtype)
    g.publish()
    n = 200_000
    L, _, stats = render_samples(scene, np.zeros(n, int), np.arange(n), 1, GuideContext(g, g.snapshot, 1.0),
                                 max_depth=1, chunk=16384)
    assert stats.guided_vertices == n
    x = L[:, 0]
    assert abs(x.mean() - cap_radiance()) < 3 * x.std(ddof=1) / math.sqrt(n)


def test_occluded_light_gives_zero():
    scene = sphere_light_scene(blocker=True)
    L, _, _ = render_samples(scene, np.zeros(10_000, int), np.arange(10_000), 0, max_depth=1)
    assert np.all(L == 0)


def test_mis_weights_sum_to_one():
    rng = np.random.default_rng(6)
    a, b = rng.exponential(size=1000), rng.exponential(size=1000)
    np.testing.assert_allclose(mis_weight(a, b) + mis_weight(b, a), 1.0, rtol=1e-15)
    assert mis_weight(np.array([0.0]), np.array([0.0]))[0] == 0.0


def test_no_emitters_and_black_environment_gives_zero():
    scene = scene_from_dict({"camera": {"position": [0, 0, 5], "look_at": [0, 0, 0], "resolution": [4, 4]},
                             "shapes": [{"type": "sphere", "center": [0, 0, 0], "radius": 1.0}]})
    L, _, _ = trace_paths(scene, np.arange(16), 0, 0)
    assert np.all(L == 0)


def test_mirror_under_environment_and_no_records():
    scene = scene_from_dict({
        "camera": {"position": [0, 1, 0], "look_at": [0, 0, 0], "up": [0, 0, -1], "fov": 30, "resolution": [4, 4]},
        "environment": 2.0, "materials": {"m": {"type": "mirror", "albedo": 0.7}},
        "shapes": [{"type": "quad", "origin": [-1, 0, -1], "edge_u": [0, 0, 2], "edge_v": [2, 0, 0], "material": "m"}],
    })
    L, rec, _ = trace_paths(scene, np.arange(16), 0, 0, collect=np.ones(16, bool))
    np.testing.assert_allclose(L, 1.4, rtol=1e-15)
    assert len(rec["p_value"]) == 0


def test_furnace_training_records():
    """One diffuse vertex per path: one record each, target value f cos L_env."""
    scene = load_scene(scene_dir() / "furnace.yaml")
    L, rec, _ = trace_paths(scene, np.arange(64), 3, 0, collect=np.ones(64, bool))
    assert len(rec["p_value"]) == 64
    cos = np.sum(rec["omega_i"] * rec["normal"], axis=1)
    np.testing.assert_allclose(rec["p_value"], 0.5 / math.pi * cos, rtol=1e-12)
    np.testing.assert_allclose(rec["q_sampling"], cos / math.pi, rtol=1e-12)
    assert np.all(rec["q_sampling"] > 0)
    np.testing.assert_allclose(L, 0.5, rtol=1e-12)  # cosine sampling makes every furnace path exact


def test_guiding_with_zero_blend_is_bit_exact():
    scene = load_scene(scene_dir() / "box.yaml")
    g = Guider(NasgModel(8), (scene.bounds_min, scene.bounds_max), seed=0)
    pix = np.arange(scene.camera.n_pixels)
    a, _, _ = trace_paths(scene, pix, 7, 11)
    b, _, s = trace_paths(scene, pix, 7, 11, GuideContext(g, g.snapshot, 0.0))
    assert s.guided_vertices == 0
    assert np.array_equal(a, b)


def test_render_is_deterministic_and_finite():
    scene = load_scene(scene_dir() / "box.yaml")
    g = Guider(NasgModel(8), (scene.bounds_min, scene.bounds_max), seed=0)
    pix = np.arange(scene.camera.n_pixels)
    runs = [render_samples(scene, pix, 9, 4, GuideContext(g, g.snapshot, 0.5), threads=t, chunk=256) for t in (1, 3)]
    assert np.array_equal(runs[0][0], runs[1][0])
    for L, _, stats in runs:
        assert stats.nonfinite == 0
        assert np.all(L >= 0)
    other, _, _ = render_samples(scene, pix, 9, 5)
    assert not np.array_equal(other, runs[0][0])


def test_path_rng_streams():
    a = PathRng(1, np.zeros(4, np.int64), np.arange(4))
    b = PathRng(1, np.zeros(4, np.int64), np.arange(4))
    assert np.array_equal(a.uniform(2, 3), b.uniform(2, 3))
    u = PathRng(1, np.arange(100_000), np.zeros(100_000, np.int64)).uniform(0, 0)
    assert 0 <= u.min() and u.max() < 1
    assert abs(u.mean() - 0.5) < 3 * math.sqrt(1 / 12 / len(u))
    assert not np.array_equal(a.uniform(2, 3), a.uniform(2, 4))


def test_collection_mask_one_pixel_per_tile():
    rng = np.random.default_rng(0)
    m = collection_mask(32, 32, 4.0, rng).reshape(32, 32)
    tiles = m.reshape(8, 4, 8, 4).sum(axis=(1, 3))
    assert np.all(tiles == 1)
    assert collection_mask(8, 8, 1.0, rng).all()


# --- accumulation and metrics -------------------------------------------------------------


def test_ramp_weight_values():
    assert ramp_weight(0) == 1 / 256
    assert ramp_weight(255) == 1.0
    assert np.all(ramp_weight(np.arange(256, 1000)) == 1.0)
    assert np.all(ramp_weight(np.arange(10), enabled=False) == 1.0)


def test_accumulator_without_ramp_is_plain_mean():
    rng = np.random.default_rng(7)
    frames = rng.random((10, 2, 3, 3))
    acc = Accumulator(2, 3, ramp=False)
    for i, f in enumerate(frames):
        acc.add_frame(f, i)
    np.testing.assert_allclose(acc.image(), frames.mean(0), rtol=1e-14)


def test_accumulator_ramp_weights():
    rng = np.random.default_rng(8)
    frames = rng.random((300, 1, 2, 3))
    acc = Accumulator(1, 2)
    for i, f in enumerate(frames):
        acc.add_frame(f, i)
    w = np.minimum(np.arange(300) + 1, 256) / 256
    np.testing.assert_allclose(acc.image(), np.tensordot(w, frames, 1) / w.sum(), rtol=1e-13)
    with pytest.raises(ValueError):
        acc.add_frame(np.full((1, 2, 3), np.nan), 300)


def test_mape_fixtures():
    ref = np.ones((1, 2, 3))
    img = np.stack([np.full(3, 1.0), np.full(3, 2.0)])[None]
    assert mape(img, ref) == pytest.approx(0.5 * (0 + 1 / 1.01), rel=1e-15)
    assert mape(ref, ref) == 0.0
    with pytest.raises(ValueError):
        mape(np.ones((2, 2, 3)), np.ones((2, 3, 3)))


def test_mape_drops_worst_pixels_and_ignores_order():
    rng = np.random.default_rng(9)
    ref = rng.random((40, 50, 3))
    img = ref + rng.normal(scale=0.1, size=ref.shape)
    img[0, 0] = 1e6  # a single firefly among 2000 pixels is dropped
    perm = rng.permutation(2000)
    shuffled = img.reshape(-1, 3)[perm].reshape(40, 50, 3), ref.reshape(-1, 3)[perm].reshape(40, 50, 3)
    assert mape(img, ref) == pytest.approx(mape(*shuffled), rel=1e-12)
    assert mape(img, ref) < 1.0


def test_pfm_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    img = rng.random((5, 7, 3)).astype(np.float32)
    write_pfm(tmp_path / "a.pfm", img)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"PF\n7 5\n-1.0\n")
    # bottom-up rows: the first stored row is the last image row
    np.testing.assert_array_equal(np.frombuffer(raw[12:12 + 84], "<f4").reshape(7, 3), img[-1])
    np.testing.assert_array_equal(read_pfm(tmp_path / "a.pfm"), img)
    gray = rng.random((3, 4)).astype(np.float32)
    write_pfm(tmp_path / "g.pfm", gray)
    np.testing.assert_array_equal(read_pfm(tmp_path / "g.pfm"), gray)


def test_pfm_big_endian_and_bad_header(tmp_path):
    img = np.arange(6, dtype=np.float32).reshape(1, 2, 3)
    (tmp_path / "b.pfm").write_bytes(b"PF\n2 1\n1.0\n" + img.astype(">f4").tobytes())
    np.testing.assert_array_equal(read_pfm(tmp_path / "b.pfm"), img)
    (tmp_path / "c.pfm").write_bytes(b"P6\n2 1\n255\n" + bytes(6))
    with pytest.raises(ValueError):
        read_pfm(tmp_path / "c.pfm")


def test_png_output(tmp_path):
    from PIL import Image

    write_png(tmp_path / "a.png", np.full((2, 3, 3), 0.5), exposure=1.0)
    arr = np.asarray(Image.open(tmp_path / "a.png"))
    assert arr.shape == (2, 3, 3) and np.all(arr == 255)
