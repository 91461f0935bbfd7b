import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import randomize
from selfnerf.errors import CameraError
from selfnerf.volume_renderer import (
    Camera,
    RenderConfig,
    anneal_factor,
    composite,
    composite_backward,
    generate_ray,
    generate_rays,
    render_image,
    render_pixel,
    sample_deltas,
    sample_depths,
)

K = np.array([[50.0, 0, 32.0], [0, 50.0, 24.0], [0, 0, 1]])


def identity_camera(t=np.zeros(3)):
    return Camera(K, np.eye(3), t, 64, 48)


def composite_oracle(sigma, rgb, delta):
    # every transmittance product evaluated on its own, no cumulative sums
    alpha = [1.0 - np.exp(-s * d) for s, d in zip(sigma, delta)]
    color, wsum = np.zeros(3), 0.0
    for i in range(len(sigma)):
        trans = 1.0
        for j in range(i):
            trans *= 1.0 - alpha[j]
        color += trans * alpha[i] * rgb[i]
        wsum += trans * alpha[i]
    return color, wsum


def test_camera_validation():
    with pytest.raises(CameraError):
        Camera(np.zeros((3, 3)), np.eye(3), np.zeros(3), 4, 4)
    with pytest.raises(CameraError):
        Camera(K, np.diag([1.0, 1.0, 1.01]), np.zeros(3), 4, 4)
    with pytest.raises(CameraError):
        Camera(K, np.diag([1.0, 1.0, -1.0]), np.zeros(3), 4, 4)


def test_principal_point_ray_is_optical_axis():
    o, v = generate_ray(identity_camera(), (31.5, 23.5))
    np.testing.assert_allclose(o, 0.0)
    np.testing.assert_allclose(v, [0.0, 0.0, 1.0], atol=1e-15)


def test_ray_reprojects_to_pixel_center():
    cam = Camera.look_at([2.0, 1.0, 3.0], np.zeros(3), [0.0, 1.0, 0.0], K, 64, 48)
    pix = np.array([[0, 0], [63, 47], [10, 30], [40, 5]])
    o, v = generate_rays(cam, pix)
    uv = cam.project(o + 2.5 * v)
    np.testing.assert_allclose(uv, pix + 0.5, atol=1e-4)


def test_adjacent_pixels_differ_by_inverse_focal():
    _, v0 = generate_ray(identity_camera(), (32, 24))
    _, v1 = generate_ray(identity_camera(), (33, 24))
    assert np.arccos(np.clip(v0 @ v1, -1, 1)) == pytest.approx(1 / 50.0, rel=1e-2)


def test_translation_shifts_origin_only():
    tau = np.array([0.5, -2.0, 1.0])
    o0, v0 = generate_ray(identity_camera(), (5, 7))
    o1, v1 = generate_ray(identity_camera(-tau), (5, 7))  # x_cam = x_world - tau
    np.testing.assert_allclose(o1 - o0, tau)
    np.testing.assert_array_equal(v0, v1)


def test_pixel_out_of_bounds():
    with pytest.raises(IndexError):
        generate_ray(identity_camera(), (64, 0))


def test_anneal_examples():
    assert anneal_factor(0, 0.1, 256) == pytest.approx(0.1)
    assert anneal_factor(128, 0.1, 256) == pytest.approx(0.55)
    assert anneal_factor(256, 0.1, 256) == 1.0 and anneal_factor(10**6, 0.1, 256) == 1.0
    vals = [anneal_factor(i, 0.1, 256) for i in range(300)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_sample_depths_midpoints_and_band():
    u = sample_depths(2.0, 6.0, 8, eta=1.0)
    np.testing.assert_allclose(u, 2.0 + (np.arange(1, 9) - 0.5) * 0.5)
    band = sample_depths(np.full(100, 2.0), np.full(100, 6.0), 16, eta=0.1, rng=np.random.default_rng(0))
    assert band.min() >= 4.0 - 0.2 and band.max() <= 4.0 + 0.2
    assert np.all(np.diff(band, axis=1) > 0)


def test_sample_depths_one_per_stratum_and_seeded():
    a = sample_depths(np.zeros(50), np.ones(50), 10, 1.0, np.random.default_rng(3))
    b = sample_depths(np.zeros(50), np.ones(50), 10, 1.0, np.random.default_rng(3))
    assert np.array_equal(a, b)
    assert np.array_equal(np.floor(a * 10), np.broadcast_to(np.arange(10), a.shape))


@given(st.floats(0.0, 5.0), st.floats(0.01, 5.0), st.floats(0.0, 1.0), st.integers(2, 40))
@settings(max_examples=50, deadline=None)
def test_annealed_depths_inside_near_far(near, length, eta, n):
    u = sample_depths(near, near + length, n, max(eta, 1e-3), np.random.default_rng(0))
    assert u.min() >= near and u.max() <= near + length


def test_sample_depths_rejects_bad_interval():
    with pytest.raises(ValueError):
        sample_depths(1.0, 1.0, 4)
    with pytest.raises(ValueError):
        sample_depths(0.0, 1.0, 1)


def test_composite_examples():
    rgb = np.random.default_rng(0).random((8, 3))
    c, w, _ = composite(np.zeros(8), rgb, np.full(8, 0.1))
    assert np.all(c == 0) and w == 0
    sigma = np.zeros(8)
    sigma[0] = 400.0
    c, w, _ = composite(sigma, rgb, np.full(8, 0.1))  # sigma * delta = 40
    np.testing.assert_allclose(c, rgb[0], atol=1e-15)
    assert w == pytest.approx(1.0, abs=1e-15)


def test_composite_matches_oracle_1000_rays():
    rng = np.random.default_rng(1)
    sigma = rng.exponential(2.0, size=(1000, 8))
    rgb = rng.random((1000, 8, 3))
    delta = rng.uniform(0.01, 0.5, size=(1000, 8))
    c, w, _ = composite(sigma, rgb, delta)
    assert np.all((w >= 0) & (w <= 1))
    for r in range(1000):
        oc, ow = composite_oracle(sigma[r], rgb[r], delta[r])
        assert np.abs(c[r] - oc).max() < 1e-12 and abs(w[r] - ow) < 1e-12
    np.testing.assert_allclose(w, 1.0 - np.prod(np.exp(-sigma * delta), axis=1), atol=1e-12)
    assert np.all(c <= w[:, None] + 1e-15)


def test_splitting_an_interval_is_invisible():
    rng = np.random.default_rng(2)
    for _ in range(100):
        sigma, rgb, delta = rng.exponential(2.0, 6), rng.random((6, 3)), rng.uniform(0.05, 0.4, 6)
        i = int(rng.integers(6))
        f = rng.uniform(0.1, 0.9)
        s2 = np.insert(sigma, i, sigma[i])
        c2 = np.insert(rgb, i, rgb[i], axis=0)
        d2 = np.insert(delta, i, delta[i] * f)
        d2[i + 1] = delta[i] * (1 - f)
        a, wa, _ = composite(sigma, rgb, delta)
        b, wb, _ = composite(s2, c2, d2)
        assert np.abs(a - b).max() < 1e-9 and abs(wa - wb) < 1e-9


def test_order_matters_canary():
    sigma, delta = np.array([5.0, 0.1, 2.0]), np.full(3, 0.3)
    rgb = np.eye(3)
    a, _, _ = composite(sigma, rgb, delta)
    b, _, _ = composite(sigma[::-1], rgb[::-1], delta)
    assert not np.allclose(a, b)


def test_composite_backward_finite_differences():
    rng = np.random.default_rng(3)
    sigma, rgb, delta = rng.exponential(2.0, (4, 8)), rng.random((4, 8, 3)), rng.uniform(0.05, 0.3, (4, 8))
    gc, gw = rng.normal(size=(4, 3)), rng.normal(size=4)

    def f(s, c):
        col, w, _ = composite(s, c, delta)
        return np.sum(gc * col) + gw @ w

    _, _, cache = composite(sigma, rgb, delta)
    g_s, g_c = composite_backward(gc, gw, sigma, rgb, delta, cache)
    h = 1e-6
    for idx in np.ndindex(sigma.shape):
        p, m = sigma.copy(), sigma.copy()
        p[idx] += h
        m[idx] -= h
        assert g_s[idx] == pytest.approx((f(p, rgb) - f(m, rgb)) / (2 * h), rel=1e-6, abs=1e-9)
    for idx in list(np.ndindex(rgb.shape))[::7]:
        p, m = rgb.copy(), rgb.copy()
        p[idx] += h
        m[idx] -= h
        assert g_c[idx] == pytest.approx((f(sigma, p) - f(sigma, m)) / (2 * h), rel=1e-6, abs=1e-9)


def test_last_delta_runs_to_far():
    d = sample_deltas(np.array([1.0, 2.0, 4.0]), 5.5)
    np.testing.assert_array_equal(d, [1.0, 2.0, 1.5])


def test_pixel_missing_box_is_empty(tiny):
    field, oracle = tiny
    params = randomize(field.init_params(0), 0)
    cam = oracle.training_camera(0)
    c, w = render_pixel(cam, (0, 0), 0, field, params)
    assert np.all(c == 0) and w == 0.0


def test_zero_field_renders_gray(tiny):
    field, oracle = tiny
    params = {k: np.zeros_like(v) for k, v in field.init_params(0).items()}
    img, w = render_image(field, params, oracle.training_camera(0), 0, RenderConfig(n_samples=8))
    np.testing.assert_allclose(img[..., 0], img[..., 1], rtol=0, atol=0)
    np.testing.assert_allclose(img[..., 0], img[..., 2], rtol=0, atol=0)
    assert w.max() > 0 and np.all((w >= 0) & (w <= 1))


def test_render_pixel_deterministic_and_frame_symmetric(tiny):
    field, oracle = tiny
    params = randomize(field.init_params(0), 1)
    params["latents"][2] = params["latents"][0]
    field.surfaces[2] = field.surfaces[0]
    cam = oracle.training_camera(0)
    a = render_pixel(cam, (8, 8), 0, field, params, iteration=5, seed=1)
    b = render_pixel(cam, (8, 8), 0, field, params, iteration=5, seed=1)
    c = render_pixel(cam, (8, 8), 2, field, params, iteration=5, seed=1)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]
    assert np.array_equal(a[0], c[0]) and a[1] == c[1]
