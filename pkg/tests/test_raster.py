import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from headavatar.faceproxy import HeadPose, Mesh, build_default_model, icosphere
from headavatar.orthorender import OrthoView, rasterize_ortho, render_condition_set
from headavatar.raster import zbuffer


def quad(x0, x1, y0, y1, z, color):
    v = np.array([[x0, y0, z], [x1, y0, z], [x1, y1, z], [x0, y1, z]], dtype=float)
    return v, np.array([[0, 1, 2], [0, 2, 3]]), np.tile(color, (4, 1))


def test_half_plane_coverage():
    v, f, c = quad(-1.5, 0.0, -1.5, 1.5, 0.0, [1.0, 0.0, 0.0])
    _, _, mask = rasterize_ortho(Mesh(v, f, c), OrthoView("front", 16))
    expected = np.zeros((16, 16))
    expected[:, :8] = 1
    assert np.array_equal(mask[..., 0], expected)


def test_right_triangle_covers_lower_left_half():
    # pixel centres never lie on the hypotenuse x + y = 1/16 of this triangle
    tri = Mesh(np.array([[-1.0, -1.0, 0], [1.0 + 1 / 16, -1.0, 0], [-1.0, 1.0 + 1 / 16, 0]]),
               np.array([[0, 1, 2]]), np.ones((3, 3)))
    _, _, mask = rasterize_ortho(tri, OrthoView("front", 16))
    i, j = np.mgrid[:16, :16]
    assert np.array_equal(mask[..., 0] > 0, j <= i)
    assert mask.sum() == 136


def test_nearest_fragment_wins():
    va, fa, ca = quad(-0.8, 0.8, -0.8, 0.8, 0.2, [1.0, 0.0, 0.0])
    vb, fb, cb = quad(-0.4, 0.4, -0.4, 0.4, 0.5, [0.0, 0.0, 1.0])   # nearer in the front view
    for order in (0, 1):
        parts = [(va, fa, ca), (vb, fb, cb)][:: 1 if order == 0 else -1]
        verts = np.concatenate([parts[0][0], parts[1][0]])
        faces = np.concatenate([parts[0][1], parts[1][1] + 4])
        cols = np.concatenate([parts[0][2], parts[1][2]])
        _, tex, _ = rasterize_ortho(Mesh(verts, faces, cols), OrthoView("front", 20))
        assert np.allclose(tex[10, 10], [0, 0, 1]) and np.allclose(tex[1, 10], 0)
        assert np.allclose(tex[3, 10], [1, 0, 0])


@given(st.integers(0, 10 ** 6))
def test_zbuffer_interpolates_affine_attribute(seed):
    rng = np.random.default_rng(seed)
    screen = rng.uniform(0, 12, size=(3, 2))
    depth = rng.uniform(1, 2, size=3)
    a, b, c = rng.normal(size=3)
    attr = (a * screen[:, 0] + b * screen[:, 1] + c)[:, None]
    img, hit, _ = zbuffer(screen, depth, np.array([[0, 1, 2]]), attr, 12, 12)
    i, j = np.nonzero(hit)
    assert np.allclose(img[i, j, 0], a * (j + 0.5) + b * (i + 0.5) + c, atol=1e-8)


def test_mirror_views_of_symmetric_mesh():
    v, f = icosphere(2)
    v = v * 0.7
    colors = np.stack([np.abs(v[:, 0]), v[:, 1] * 0 + 0.3, (v[:, 2] + 1) / 2], axis=1)
    mesh = Mesh(v, f, colors)
    nl, tl, ml = rasterize_ortho(mesh, OrthoView("left", 24))
    nr, tr, mr = rasterize_ortho(mesh, OrthoView("right", 24))
    assert np.array_equal(ml, mr[:, ::-1])
    assert np.allclose(tl, tr[:, ::-1], atol=1e-9)
    # mirrored x normal component flips sign: (n + 1) / 2 -> 1 - (n + 1) / 2 on covered pixels
    cov = ml[..., 0] > 0
    assert np.allclose(nl[cov, 0], 1 - nr[:, ::-1][cov, 0], atol=1e-9)
    assert np.allclose(nl[cov, 1:], nr[:, ::-1][cov, 1:], atol=1e-9)


def test_condition_set_shapes_and_background():
    model = build_default_model()
    rs = render_condition_set(model, np.zeros(model.n_expr), resolution=16)
    assert rs.front_stack().shape == (7, 16, 16)
    assert rs.side_stack().shape == (14, 16, 16)
    bg = rs.mask["front"][..., 0] == 0
    assert np.all(rs.normal["front"][bg] == 0) and np.all(rs.texture["front"][bg] == 0)


def test_texture_switch_zeroes_texture():
    model = build_default_model()
    rs = render_condition_set(model, np.zeros(model.n_expr), texture=False, resolution=16)
    assert all(np.all(rs.texture[v] == 0) for v in rs.texture)


def test_zero_posed_ignores_pose_and_posed_uses_it():
    model = build_default_model()
    d = np.zeros(model.n_expr)
    pose = HeadPose.from_vector([0.3, 0.2, 0, 0.05, 0, 0])
    a = render_condition_set(model, d, pose, mode="zero_posed", resolution=16)
    b = render_condition_set(model, d, None, resolution=16)
    c = render_condition_set(model, d, pose, mode="posed", resolution=16)
    assert np.array_equal(a.front_stack(), b.front_stack())
    assert not np.array_equal(a.front_stack(), c.front_stack())
