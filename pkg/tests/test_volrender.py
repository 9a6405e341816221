import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from headavatar import diffcore as dc
from headavatar.diffcore import Tensor
from headavatar.faceproxy import default_cameras
from headavatar.volrender import (Rays, SamplerConfig, gen_rays, importance_samples, integrate,
                                  load_feature_map, ray_uniforms, render_frame, render_rays,
                                  save_feature_map, segment_lengths, stratified_samples)


def zero_field(x):
    n = len(x)
    return Tensor(np.zeros(n)), Tensor(np.zeros((n, 4)))


def slab_field(lo=-0.1, hi=0.1, sigma=50.0):
    """Opaque slab along z with a colour feature that encodes the point's z."""
    def field(x):
        x = np.asarray(x)
        inside = (x[:, 2] > lo) & (x[:, 2] < hi)
        f = np.stack([x[:, 2], np.ones(len(x)), np.zeros(len(x)), np.zeros(len(x))], axis=1)
        return Tensor(np.where(inside, sigma, 0.0)), Tensor(f)
    return field


# -- rays ---------------------------------------------------------------------------
def test_principal_pixel_looks_forward():
    cam = default_cameras(1, 16)[0]
    rays = gen_rays(cam)
    # cx = cy = 8: the principal point sits on a pixel corner, so average its four neighbours
    idx = [7 * 16 + 7, 7 * 16 + 8, 8 * 16 + 7, 8 * 16 + 8]
    d = rays.dirs[idx].mean(axis=0)
    assert np.allclose(d / np.linalg.norm(d), cam.rotation[2], atol=1e-12)


def test_odd_resolution_principal_pixel():
    from headavatar.faceproxy import Camera
    cam = default_cameras(1, 16)[0]
    odd = Camera(cam.focal, 7.5, 7.5, 15, 15, cam.rotation, cam.translation)
    rays = gen_rays(odd)
    assert np.allclose(rays.dirs[7 * 15 + 7], cam.rotation[2], atol=1e-12)


def test_ray_directions_are_unit_and_ranges_ordered():
    rays = gen_rays(default_cameras(3, 20)[1])
    assert np.allclose(np.linalg.norm(rays.dirs, axis=1), 1.0, atol=1e-9)
    assert np.all(rays.near[rays.hit] < rays.far[rays.hit])


def test_projection_round_trip():
    cam = default_cameras(1, 16)[0]
    rays = gen_rays(cam)
    i, j = np.divmod(np.arange(256), 16)
    for frac in (0.0, 0.3, 1.0):
        t = rays.near + frac * (rays.far - rays.near)
        pts = rays.origins + t[:, None] * rays.dirs
        uv, _ = cam.project(pts[rays.hit])
        assert np.abs(uv[:, 0] - (j[rays.hit] + 0.5)).max() <= 1e-6
        assert np.abs(uv[:, 1] - (i[rays.hit] + 0.5)).max() <= 1e-6


def test_box_clipping_endpoints_lie_on_box():
    rays = gen_rays(default_cameras(1, 16)[0])
    h = rays.hit
    for t in (rays.near[h], rays.far[h]):
        p = rays.origins[h] + t[:, None] * rays.dirs[h]
        assert np.allclose(np.abs(p).max(axis=1), 1.0, atol=1e-9)


def test_missing_rays_see_background():
    rays = Rays(np.array([[0.0, 5.0, 5.0]]), np.array([[0.0, 0.0, 1.0]]), np.zeros(1), np.zeros(1),
                np.zeros(1, dtype=bool), np.zeros(1, dtype=np.int64))
    out = render_rays(slab_field(), rays, SamplerConfig(8, 4), background=0.25)
    assert np.allclose(out.rgb.data, 0.25) and out.mask.data[0] == 0


# -- sampling ---------------------------------------------------------------------
def test_stratified_midpoints():
    assert np.allclose(stratified_samples(0.0, 1.0, 4), [[0.125, 0.375, 0.625, 0.875]])
    with pytest.raises(ValueError):
        stratified_samples(0.0, 1.0, 0)


@given(st.floats(0, 2), st.floats(0.01, 3), st.integers(1, 40), st.integers(0, 10 ** 6))
def test_jittered_samples_stay_in_their_bins(near, length, n, seed):
    t = stratified_samples(near, near + length, n, True, np.random.default_rng(seed))[0]
    bins = np.floor((t - near) / length * n)
    assert np.all(np.diff(t) > 0) or n == 1
    assert np.array_equal(bins, np.arange(n))
    assert np.all((t >= near) & (t <= near + length))


def test_importance_single_bin():
    w = np.zeros((1, 8))
    w[0, 5] = 1.0
    t, merged = importance_samples(w, 50, np.zeros(1), np.ones(1), np.random.default_rng(0),
                                   stratified_samples(0.0, 1.0, 8))
    assert np.all((t >= 5 / 8) & (t <= 6 / 8))
    assert np.all(np.diff(merged[0]) >= 0) and merged.shape == (1, 58)


def test_importance_uniform_weights_multinomial():
    m, n = 800, 8
    t, _ = importance_samples(np.ones((1, n)), m, np.zeros(1), np.ones(1), np.random.default_rng(7))
    counts = np.bincount(np.minimum((t[0] * n).astype(int), n - 1), minlength=n)
    sd = np.sqrt(m * (1 / n) * (1 - 1 / n))
    assert np.all(np.abs(counts - m / n) <= 3 * sd)


def test_importance_all_zero_falls_back_to_uniform():
    t, _ = importance_samples(np.zeros((2, 4)), 400, np.zeros(2), np.ones(2), np.random.default_rng(1))
    counts = np.bincount((t[0] * 4).astype(int), minlength=4)
    assert counts.min() > 50


def test_ray_uniforms_are_keyed_per_ray():
    a = ray_uniforms(3, np.array([0, 1, 2, 3]), 0, 5)
    b = ray_uniforms(3, np.array([2, 3]), 0, 5)
    assert np.array_equal(a[2:], b)
    assert not np.array_equal(a, ray_uniforms(4, np.array([0, 1, 2, 3]), 0, 5))
    assert np.all((a >= 0) & (a < 1))


# -- quadrature ---------------------------------------------------------------------
def test_zero_density_integrates_to_zero():
    f, a = integrate(np.zeros((2, 5)), np.ones((2, 5, 3)), np.full((2, 5), 0.1))
    assert np.all(f.data == 0) and np.all(a.data == 0)


def test_opaque_first_sample():
    sigma = np.array([[500.0, 1.0, 2.0]])
    feats = np.array([[[0.3, 0.7], [5.0, 5.0], [9.0, 9.0]]])
    f, a = integrate(sigma, feats, np.array([[0.1, 0.1, 0.1]]))
    assert np.abs(f.data - [0.3, 0.7]).max() <= 1e-6 and abs(a.data[0] - 1) <= 1e-6


@pytest.mark.parametrize("sigma_l", [0.1, 1.0, 2.5, 5.0])
def test_constant_density_matches_closed_form(sigma_l):
    n, length = 256, 1.0
    t = stratified_samples(0.0, length, n)
    d = segment_lengths(t, np.array([length]))
    _, a = integrate(np.full((1, n), sigma_l / length), np.zeros((1, n, 1)), d)
    assert abs(a.data[0] - (1 - np.exp(-sigma_l))) <= 1e-3


def test_quadrature_error_is_first_order():
    # sigma(t) = 3 t on [0, 1]: analytic alpha = 1 - exp(-1.5)
    errs = []
    for n in (64, 128, 256, 512):
        t = stratified_samples(0.0, 1.0, n)
        _, a = integrate(3 * t, np.zeros((1, n, 1)), segment_lengths(t, np.ones(1)))
        errs.append(abs(a.data[0] - (1 - np.exp(-1.5))))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((ratios > 1.7) & (ratios < 2.3))


@given(st.integers(0, 10 ** 6), st.floats(1.0, 4.0))
def test_alpha_monotone_in_density_scale(seed, scale):
    rng = np.random.default_rng(seed)
    sigma = rng.uniform(0, 3, size=(4, 10))
    d = rng.uniform(0.01, 0.2, size=(4, 10))
    _, a1 = integrate(sigma, np.zeros((4, 10, 1)), d)
    _, a2 = integrate(sigma * scale, np.zeros((4, 10, 1)), d)
    assert np.all((a1.data >= 0) & (a2.data <= 1 + 1e-12) & (a2.data >= a1.data - 1e-12))


# -- full renders ---------------------------------------------------------------------
def test_zero_field_renders_background():
    out = render_frame(zero_field, default_cameras(1, 8)[0], SamplerConfig(8, 4), background=0.3)
    assert np.all(out.mask.data == 0) and np.allclose(out.rgb.data, 0.3)
    assert out.feature.shape == (4, 8, 8)


def test_fine_samples_concentrate_in_slab():
    # rays along -z from z = 2 over t in [0, 4]: 32 coarse bins of 0.125, and the slab
    # z in (-0.25, 0.25) covers exactly bins 14..17, which a piecewise-constant pdf can represent
    n = 6
    xy = np.random.default_rng(0).uniform(-0.5, 0.5, size=(n, 2))
    rays = Rays(np.column_stack([xy, np.full(n, 2.0)]), np.tile([0.0, 0.0, -1.0], (n, 1)),
                np.zeros(n), np.full(n, 4.0), np.ones(n, dtype=bool), np.arange(n))
    sampler = SamplerConfig(32, 64, jitter=True, seed=2)
    out = render_rays(slab_field(-0.25, 0.25, 20.0), rays, sampler)
    coarse = stratified_samples(rays.near, rays.far, 32, True, ray_uniforms(2, rays.ids, 0, 32))
    in_slab = (out.t_samples > 1.75) & (out.t_samples < 2.25)
    coarse_in = (coarse > 1.75) & (coarse < 2.25)
    n_fine_inside = in_slab.sum() - coarse_in.sum()
    assert n_fine_inside >= 0.9 * 64 * n
    assert np.all(out.mask.data > 0.99)


def test_rendering_is_partition_independent():
    cam = default_cameras(1, 10)[0]
    s = SamplerConfig(12, 6, jitter=True, seed=9)
    field = slab_field(-0.3, 0.2, 4.0)
    a = render_frame(field, cam, s).feature.data
    b = render_frame(field, cam, s, chunk=7).feature.data
    assert np.array_equal(a, b)
    assert np.array_equal(a, render_frame(field, cam, s).feature.data)


def test_rgb_is_integrated_per_sample():
    cam = default_cameras(1, 6)[0]
    field = slab_field(-0.3, 0.2, 2.0)

    def rgb_fn(f):
        return dc.sigmoid(f[:, :, :3] if f.ndim == 3 else f[:, :3])

    with dc.no_grad():
        out = render_frame(field, cam, SamplerConfig(16, 0, jitter=False), rgb_fn=rgb_fn, background=0.0)
    # zero feature gives sigmoid(0) = 0.5 in empty space but weight 0 there; inside, colour is sigmoid(f)
    assert np.all(out.rgb.data <= out.mask.data + 1e-12)


def test_feature_map_file_roundtrip(tmp_path):
    fm = np.random.default_rng(0).normal(size=(4, 5, 6))
    save_feature_map(tmp_path / "f.fmap", fm)
    assert np.allclose(load_feature_map(tmp_path / "f.fmap"), fm, atol=1e-6)
    (tmp_path / "bad").write_bytes(b"xxxxx" + bytes(20))
    with pytest.raises(ValueError):
        load_feature_map(tmp_path / "bad")
