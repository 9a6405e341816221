import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from headavatar import diffcore as dc
from headavatar.diffcore import Tensor, grad_check
from headavatar.faceproxy import HeadPose, default_cameras
from headavatar.motionwarp import (TorsoTransform, WeightVolumeGenerator, blend_weight, gen_weight_volume,
                                   load_weight_volume, save_weight_volume, warp_field, warp_to_canonical)
from headavatar.planegen import FeaturePlanes
from headavatar.radiancefield import DecoderMLP, PosEncConfig, query_canonical
from headavatar.volrender import SamplerConfig, render_frame

pose6 = arrays(np.float64, (6,), elements=st.floats(-0.3, 0.3))
points = arrays(np.float64, (7, 3), elements=st.floats(-1.2, 1.2))


def test_weight_volume_range_shape_and_determinism():
    gen = WeightVolumeGenerator(np.random.default_rng(0), seed_dim=8, channels=(4, 4, 2), n_blocks=3)
    v = gen_weight_volume(gen).data
    assert v.shape == (16, 16, 16)
    assert np.all((v >= 0) & (v <= 1))
    assert np.array_equal(v, gen_weight_volume(gen).data)


def test_weight_volume_gradient():
    rng = np.random.default_rng(1)
    gen = WeightVolumeGenerator(rng, seed_dim=4, channels=(3, 2), n_blocks=2)
    proj = rng.normal(size=(8, 8, 8))
    w0, _ = gen.blocks[0]

    def f(w):
        old = gen.blocks[0]
        gen.blocks[0] = (w, old[1])
        try:
            return dc.tsum(gen_weight_volume(gen) * proj)
        finally:
            gen.blocks[0] = old

    rep = grad_check(f, [w0.data], tol=1e-4)
    assert rep.passed, str(rep)


@pytest.mark.parametrize("value,expected", [(1.0, 1 / (1 + 1e-6)), (0.0, 0.0), (0.5, 0.5 / (1 + 1e-6))])
def test_blend_weight_constant_volumes(value, expected):
    x = np.random.default_rng(0).uniform(-0.5, 0.5, size=(20, 3))
    pose = HeadPose.from_vector([0.1, 0.05, -0.1, 0.02, 0, 0.01])
    w = blend_weight(x, pose, np.full((6, 6, 6), value)).data
    assert np.allclose(w, expected, rtol=0, atol=1e-12)


@given(points, pose6, st.integers(0, 10 ** 6))
def test_blend_weight_in_unit_interval(x, p, seed):
    vol = np.random.default_rng(seed).uniform(size=(5, 5, 5))
    w = blend_weight(x, HeadPose.from_vector(p), vol).data
    assert np.all((w >= 0) & (w <= 1))


def test_blend_weight_outside_box_reads_torso():
    w = blend_weight(np.array([[3.0, 0, 0]]), HeadPose(), np.ones((4, 4, 4))).data
    assert w[0] == 0.0


@given(points, pose6)
def test_warp_limits(x, p):
    pose = HeadPose.from_vector(p)
    r, t = pose.inverse_rt()
    assert np.allclose(warp_to_canonical(x, pose, np.ones(7)).data, x @ r.T + t)
    assert np.allclose(warp_to_canonical(x, pose, np.zeros(7)).data, x)


@given(points, arrays(np.float64, (7,), elements=st.floats(0, 1)))
def test_identity_pose_warp_is_identity(x, w):
    assert np.allclose(warp_to_canonical(x, HeadPose(), w).data, x, atol=1e-15)


def test_torso_transform_is_used():
    x = np.array([[0.1, 0.2, 0.3]])
    torso = TorsoTransform(translation=np.array([0.0, 0.5, 0.0]))
    assert np.allclose(warp_to_canonical(x, HeadPose(), np.zeros(1), torso).data, x + [0, 0.5, 0])


def _canonical(seed=0):
    rng = np.random.default_rng(seed)
    pe = PosEncConfig(2)
    dec = DecoderMLP(rng, 2 * 3 + pe.dim, hidden=16, depth=2, feat_dim=4, density_bias=0.5)
    planes = FeaturePlanes(Tensor(rng.normal(size=(3, 8, 8))), Tensor(rng.normal(size=(3, 8, 8))))
    return lambda x: query_canonical(x, planes, dec, pe)


def test_identity_pose_field_equals_canonical():
    hc = _canonical()
    x = np.random.default_rng(2).uniform(-1, 1, size=(30, 3))
    h = warp_field(hc, HeadPose(), np.random.default_rng(3).uniform(size=(6, 6, 6)))
    assert np.allclose(h(x)[0].data, hc(x)[0].data, atol=1e-12)
    assert np.allclose(h(x)[1].data, hc(x)[1].data, atol=1e-12)


def test_full_head_weight_field_is_rigid():
    hc = _canonical()
    pose = HeadPose.from_vector([0.2, -0.15, 0.1, 0.05, -0.02, 0.03])
    x = np.random.default_rng(2).uniform(-0.6, 0.6, size=(30, 3))
    r, t = pose.inverse_rt()
    h = warp_field(hc, pose, np.ones((6, 6, 6)))
    # the guard leaves w_p = 1/(1+eps), hence the tolerance
    assert np.allclose(h(x)[0].data, hc(x @ r.T + t)[0].data, atol=1e-5)


def test_rendering_with_pose_equals_composed_camera():
    hc = _canonical()
    pose = HeadPose.from_vector([0.15, -0.2, 0.05, 0.03, -0.02, 0.02])
    cam = default_cameras(1, 12)[0]

    def posed(x):
        # weight field forced to 1 everywhere, including outside the canonical box
        return hc(warp_to_canonical(x, pose, np.ones(len(x))))

    sampler = SamplerConfig(16, 8, jitter=True, seed=5)
    nf = (1.2, 3.4)
    with dc.no_grad():
        a = render_frame(posed, cam, sampler, near_far=nf).feature.data
        b = render_frame(hc, cam.compose_pose(pose), sampler, near_far=nf).feature.data
    assert np.abs(a - b).max() <= 1e-5


def test_weight_volume_file_roundtrip(tmp_path):
    v = np.random.default_rng(0).uniform(size=(8, 8, 8))
    save_weight_volume(tmp_path / "w.wvol", v)
    assert np.allclose(load_weight_volume(tmp_path / "w.wvol"), v, atol=1e-7)
