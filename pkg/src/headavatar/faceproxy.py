"""Synthetic blendshape head, rigid poses, pinhole cameras and the ground-truth dataset writer."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .raster import zbuffer

BACKGROUND = 0.5
HEAD_CENTER = np.array([0.0, 0.42, 0.0])
HEAD_RADIUS = 0.34
TORSO_MIN = np.array([-0.55, -0.98, -0.28])
TORSO_MAX = np.array([0.55, -0.12, 0.28])
TORSO_COLOR = np.array([0.22, 0.32, 0.62])
LIGHT_DIR = np.array([0.35, 0.55, 0.76]) / np.linalg.norm([0.35, 0.55, 0.76])
AMBIENT = 0.45
MODEL_MAGIC = b"FPXY1"
MODEL_VERSION = 1


@dataclass
class Mesh:
    vertices: np.ndarray           # (V, 3)
    faces: np.ndarray              # (F, 3) int
    colors: np.ndarray | None = None   # (V, 3) in [0, 1]

    def copy_with(self, vertices):
        return Mesh(np.asarray(vertices, dtype=np.float64), self.faces, self.colors)


@dataclass
class BlendshapeModel:
    base: np.ndarray       # (V, 3)
    faces: np.ndarray      # (F, 3)
    colors: np.ndarray     # (V, 3)
    deltas: np.ndarray     # (K, V, 3)

    @property
    def n_expr(self):
        return self.deltas.shape[0]

    def __post_init__(self):
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.base)):
            raise ValueError("triangle index out of range")


@dataclass
class HeadPose:
    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))     # axis-angle, rad
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.linalg.norm(self.rotation) >= np.pi:
            raise ValueError("rotation magnitude must be < pi")

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3], v[3:6])

    def as_vector(self):
        return np.concatenate([self.rotation, self.translation])

    def matrix(self):
        return Rotation.from_rotvec(self.rotation).as_matrix()

    def inverse_rt(self):
        """(R, t) of the inverse map, i.e. posed -> canonical."""
        r = self.matrix()
        return r.T, -r.T @ self.translation


@dataclass
class Camera:
    focal: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray       # world -> camera
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-9:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def project(self, points):
        """World points (N,3) -> pixel coords (N,2) and camera depth (N,)."""
        pc = np.asarray(points) @ self.rotation.T + self.translation
        z = pc[:, 2]
        uv = np.stack([self.focal * pc[:, 0] / z + self.cx,
                       self.focal * pc[:, 1] / z + self.cy], axis=1)
        return uv, z

    def compose_pose(self, pose: HeadPose) -> "Camera":
        """Camera C∘P: x ↦ C(P(x)) with P the head pose (canonical -> posed)."""
        r = self.rotation @ pose.matrix()
        t = self.rotation @ pose.translation + self.translation
        return Camera(self.focal, self.cx, self.cy, self.width, self.height, r, t)

    def to_vector(self):
        return np.concatenate([[self.focal, self.cx, self.cy, self.width, self.height],
                               self.rotation.ravel(), self.translation])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=np.float64)
        return cls(float(v[0]), float(v[1]), float(v[2]), int(v[3]), int(v[4]),
                   v[5:14].reshape(3, 3), v[14:17])


def look_at_camera(eye, target, size, focal_scale=1.6, up=(0.0, 1.0, 0.0)) -> Camera:
    """Pinhole camera (x right, y down, z forward) at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])
    # re-orthonormalise to machine precision
    u, _, vt = np.linalg.svd(r)
    r = u @ vt
    return Camera(focal_scale * size, size / 2.0, size / 2.0, size, size, r, -r @ eye)


PORTRAIT_TARGET = np.array([0.0, 0.25, 0.0])


def default_cameras(n, size, distance=2.4, spread_deg=25.0, target=PORTRAIT_TARGET):
    """Head-and-shoulders framing.  Camera 0 looks straight at the face (along -z); others fan out in yaw."""
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for i in range(n):
        k = (i + 1) // 2 * (1 if i % 2 else -1)
        yaw = np.deg2rad(spread_deg * k)
        eye = target + distance * np.array([np.sin(yaw), 0.0, np.cos(yaw)])
        cams.append(look_at_camera(eye, target, size))
    return cams


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------
def icosphere(subdivisions=2):
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts), np.array(faces, dtype=np.int64)


def box_mesh(lo, hi):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    v = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    # outward-facing (counter-clockwise seen from outside)
    f = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
                  [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
                  [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]], dtype=np.int64)
    return v, f


def _bump(dirs, center, width):
    c = np.asarray(center, dtype=np.float64)
    c = c / np.linalg.norm(c)
    return np.exp(-(1.0 - dirs @ c) / width)


def build_default_model(n_expr=8, subdivisions=3, amplitude=0.11) -> BlendshapeModel:
    """Icosphere head with a box nose, painted features and lobed expression deltas.

    The model is bilaterally symmetric except for the deltas that act on one
    side only (cheek puffs, squint).
    """
    unit, sf = icosphere(subdivisions)
    dirs = unit.copy()
    head = HEAD_CENTER + HEAD_RADIUS * unit

    skin = np.array([0.86, 0.66, 0.52])
    colors = np.tile(skin, (len(head), 1))
    hair = (dirs[:, 1] > 0.45) | ((dirs[:, 2] < -0.2) & (dirs[:, 1] > -0.1))
    colors[hair] = [0.28, 0.18, 0.1]
    for ex in (-0.36, 0.36):
        eye = _bump(dirs, (ex, 0.22, 0.9), 0.012) > 0.5
        colors[eye] = [0.08, 0.08, 0.12]
    mouth = _bump(dirs, (0.0, -0.45, 0.89), 0.02) > 0.5
    colors[mouth] = [0.75, 0.15, 0.2]

    # radial/directional lobes, one per blendshape
    lobes = [
        ((0.0, -0.8, 0.6), 0.12, lambda d: np.array([0.0, -1.0, 0.3])),   # jaw drop
        ((0.8, -0.2, 0.55), 0.06, None),                                  # left cheek
        ((-0.8, -0.2, 0.55), 0.06, None),                                 # right cheek
        ((0.0, 0.45, 0.9), 0.06, lambda d: np.array([0.0, 1.0, 0.0])),    # brow raise
        ((0.0, -0.45, 0.9), 0.04, "wide"),                                 # mouth wide
        ((0.0, 1.0, 0.0), 0.15, None),                                    # skull height
        ((0.0, -0.5, 0.86), 0.05, lambda d: np.array([0.0, 0.0, 1.0])),   # lips forward
        ((0.5, 0.3, 0.8), 0.05, "in"),                                     # squint
    ]
    deltas = np.zeros((n_expr, len(head), 3))
    for k in range(n_expr):
        center, width, kind = lobes[k % len(lobes)]
        w = _bump(dirs, center, width)[:, None]
        if kind is None:
            disp = dirs
        elif kind == "wide":
            disp = np.stack([np.sign(dirs[:, 0]) * np.minimum(np.abs(dirs[:, 0]) * 4, 1.0),
                             np.zeros(len(dirs)), np.zeros(len(dirs))], axis=1)
        elif kind == "in":
            disp = -dirs
        else:
            disp = np.tile(kind(dirs), (len(dirs), 1))
            disp /= np.linalg.norm(disp, axis=1, keepdims=True)
        scale = amplitude * (1.0 if k < len(lobes) else 0.5)
        deltas[k] = scale * w * disp

    nv, nf = box_mesh((-0.05, 0.30, 0.28), (0.05, 0.42, 0.42))
    nose_color = np.tile([0.9, 0.55, 0.45], (len(nv), 1))
    offset = len(head)
    base = np.concatenate([head, nv])
    faces = np.concatenate([sf, nf + offset])
    colors = np.concatenate([colors, nose_color])
    deltas = np.concatenate([deltas, np.zeros((n_expr, len(nv), 3))], axis=1)
    return BlendshapeModel(base, faces, colors, deltas)


def deform_mesh(model: BlendshapeModel, delta) -> Mesh:
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    if delta.shape[0] != model.n_expr:
        raise ValueError(f"expected {model.n_expr} expression coefficients, got {delta.shape[0]}")
    verts = model.base + np.tensordot(delta, model.deltas, axes=(0, 0))
    return Mesh(verts, model.faces, model.colors)


def apply_pose(mesh: Mesh, pose: HeadPose) -> Mesh:
    return mesh.copy_with(mesh.vertices @ pose.matrix().T + pose.translation)


def vertex_normals(mesh: Mesh):
    """Area-weighted unit vertex normals and a flag for vertices with no usable area."""
    v = mesh.vertices
    f = mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])   # |fn| = 2 * area
    acc = np.zeros_like(v)
    for i in range(3):
        np.add.at(acc, f[:, i], fn)
    norm = np.linalg.norm(acc, axis=1)
    degenerate = norm < 1e-15
    out = np.zeros_like(v)
    out[~degenerate] = acc[~degenerate] / norm[~degenerate, None]
    return out, degenerate


def torso_mesh() -> Mesh:
    v, f = box_mesh(TORSO_MIN, TORSO_MAX)
    return Mesh(v, f, np.tile(TORSO_COLOR, (len(v), 1)))


def shaded_colors(mesh: Mesh, normals):
    """Lambertian shading with the light fixed in the head frame (baked appearance)."""
    lam = np.clip(normals @ LIGHT_DIR, 0.0, None)
    return np.clip(mesh.colors * (AMBIENT + (1 - AMBIENT) * lam[:, None]), 0.0, 1.0)


def render_scene(model: BlendshapeModel, delta, pose: HeadPose, camera: Camera):
    """Ground-truth RGB (H,W,3) and binary mask (H,W) for one frame and camera."""
    head0 = deform_mesh(model, delta)
    normals, _ = vertex_normals(head0)
    head_rgb = shaded_colors(head0, normals)
    head = apply_pose(head0, pose)
    torso = torso_mesh()
    torso_rgb = TORSO_COLOR * (AMBIENT + (1 - AMBIENT) * 0.6) * np.ones((len(torso.vertices), 1))
    verts = np.concatenate([head.vertices, torso.vertices])
    faces = np.concatenate([head.faces, torso.faces + len(head.vertices)])
    rgb = np.concatenate([head_rgb, torso_rgb])
    uv, z = camera.project(verts)
    img, mask, _ = zbuffer(uv, z, faces, rgb, camera.height, camera.width, perspective=True)
    img[~mask] = BACKGROUND
    return img, mask


# ---------------------------------------------------------------------------
# dataset synthesis
# ---------------------------------------------------------------------------
@dataclass
class SynthConfig:
    n_frames: int = 200           # training frames
    n_test: int = 20              # held-out frames
    n_cameras: int = 1
    image_size: int = 64
    n_expr: int = 8
    expr_range: float = 0.6       # train |delta_k| <= expr_range
    test_expr_range: float = 0.6  # held-out |delta_k| <= test_expr_range
    test_expr_min: float = 0.0    # held-out: at least one |delta_k| >= this
    rot_range: tuple = (0.15, 0.35, 0.1)     # pitch/yaw/roll half-ranges (rad)
    trans_range: float = 0.04
    test_rot_scale: float = 1.0
    noise_delta: float = 0.0
    noise_pose: float = 0.0
    subdivisions: int = 3


def _sample_params(rng, cfg: SynthConfig, test: bool):
    k = cfg.n_expr
    if test:
        d = rng.uniform(-cfg.test_expr_range, cfg.test_expr_range, size=k)
        if cfg.test_expr_min > 0:
            j = rng.integers(k)
            d[j] = rng.choice([-1.0, 1.0]) * rng.uniform(cfg.test_expr_min, cfg.test_expr_range)
        rs = cfg.test_rot_scale
    else:
        d = rng.uniform(-cfg.expr_range, cfg.expr_range, size=k)
        rs = 1.0
    rot = rng.uniform(-1, 1, size=3) * np.asarray(cfg.rot_range) * rs
    trans = rng.uniform(-1, 1, size=3) * cfg.trans_range
    return d, np.concatenate([rot, trans])


@dataclass
class FrameRecord:
    index: int
    delta: np.ndarray
    pose_clean: np.ndarray
    delta_noisy: np.ndarray
    pose_noisy: np.ndarray
    split: str = "train"

    def to_text(self):
        def fmt(v):
            return " ".join(repr(float(x)) for x in v)
        return (f"delta = {fmt(self.delta)}\n"
                f"delta_noisy = {fmt(self.delta_noisy)}\n"
                f"pose_clean = {fmt(self.pose_clean)}\n"
                f"pose_noisy = {fmt(self.pose_noisy)}\n")

    @classmethod
    def from_text(cls, index, text, split="train"):
        kv = parse_kv_text(text)
        return cls(index, np.array(kv["delta"], dtype=np.float64),
                   np.array(kv["pose_clean"], dtype=np.float64),
                   np.array(kv["delta_noisy"], dtype=np.float64),
                   np.array(kv["pose_noisy"], dtype=np.float64), split)


def parse_kv_text(text):
    """Parse line-based ``key = v1 v2 ...`` text; '#' starts a comment."""
    out = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed line: {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.split()
    return out


def save_model(model: BlendshapeModel, path):
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<IIII", MODEL_VERSION, len(model.base), len(model.faces), model.n_expr))
        fh.write(model.base.astype("<f8").tobytes())
        fh.write(model.faces.astype("<i8").tobytes())
        fh.write(model.colors.astype("<f8").tobytes())
        fh.write(model.deltas.astype("<f8").tobytes())


def load_model(path) -> BlendshapeModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:5] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a blendshape model file")
    version, nv, nf, k = struct.unpack_from("<IIII", data, 5)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    off = 5 + 16

    def take(count, dtype, shape):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape)
        off += arr.nbytes
        return arr.astype(np.float64 if dtype == "<f8" else np.int64)

    base = take(nv * 3, "<f8", (nv, 3))
    faces = take(nf * 3, "<i8", (nf, 3))
    colors = take(nv * 3, "<f8", (nv, 3))
    deltas = take(k * nv * 3, "<f8", (k, nv, 3))
    return BlendshapeModel(base, faces, colors, deltas)


def write_png(path, img):
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    tmp = f"{path}.tmp"
    Image.fromarray(arr).save(tmp, format="PNG")
    os.replace(tmp, path)


def read_png(path):
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def synth_dataset(cfg: SynthConfig, seed: int, out_dir, model: BlendshapeModel | None = None):
    """Write a procedurally generated capture to ``out_dir`` and return the frame records."""
    rng = np.random.default_rng(seed)
    model = model or build_default_model(cfg.n_expr, cfg.subdivisions)
    cams = default_cameras(cfg.n_cameras, cfg.image_size)
    os.makedirs(os.path.join(out_dir, "params"), exist_ok=True)
    for i in range(cfg.n_cameras):
        os.makedirs(os.path.join(out_dir, f"cam{i}"), exist_ok=True)
    save_model(model, os.path.join(out_dir, "model.bin"))
    with open(os.path.join(out_dir, "cameras.txt"), "w") as fh:
        for i, cam in enumerate(cams):
            fh.write(f"cam{i} = " + " ".join(repr(float(x)) for x in cam.to_vector()) + "\n")

    records = []
    total = cfg.n_frames + cfg.n_test
    for t in range(total):
        test = t >= cfg.n_frames
        delta, pose = _sample_params(rng, cfg, test)
        nd = rng.normal(size=delta.shape) * cfg.noise_delta
        npose = rng.normal(size=6) * cfg.noise_pose
        rec = FrameRecord(t, delta, pose, delta + nd, pose + npose, "test" if test else "train")
        records.append(rec)
        hp = HeadPose.from_vector(pose)
        for i, cam in enumerate(cams):
            img, mask = render_scene(model, delta, hp, cam)
            write_png(os.path.join(out_dir, f"cam{i}", f"frame{t}.png"), img)
            write_png(os.path.join(out_dir, f"cam{i}", f"mask{t}.png"), mask.astype(np.uint8) * 255)
        with open(os.path.join(out_dir, "params", f"frame{t}.txt"), "w") as fh:
            fh.write(rec.to_text())
    with open(os.path.join(out_dir, "split.txt"), "w") as fh:
        fh.write("train = " + " ".join(str(r.index) for r in records if r.split == "train") + "\n")
        fh.write("test = " + " ".join(str(r.index) for r in records if r.split == "test") + "\n")
    return records


@dataclass
class Dataset:
    root: str
    model: BlendshapeModel
    cameras: list
    records: list
    images: np.ndarray     # (T, n_cam, H, W, 3)
    masks: np.ndarray      # (T, n_cam, H, W)

    def split(self, name):
        return [i for i, r in enumerate(self.records) if r.split == name]


def load_dataset(root) -> Dataset:
    model = load_model(os.path.join(root, "model.bin"))
    with open(os.path.join(root, "cameras.txt")) as fh:
        cams_kv = parse_kv_text(fh.read())
    cams = [Camera.from_vector(np.array(cams_kv[f"cam{i}"], dtype=np.float64))
            for i in range(len(cams_kv))]
    with open(os.path.join(root, "split.txt")) as fh:
        split_kv = parse_kv_text(fh.read())
    which = {}
    for name, ids in split_kv.items():
        for i in ids:
            which[int(i)] = name
    records, images, masks = [], [], []
    for t in sorted(which):
        with open(os.path.join(root, "params", f"frame{t}.txt")) as fh:
            records.append(FrameRecord.from_text(t, fh.read(), which[t]))
        images.append([read_png(os.path.join(root, f"cam{i}", f"frame{t}.png")) for i in range(len(cams))])
        masks.append([read_png(os.path.join(root, f"cam{i}", f"mask{t}.png")) for i in range(len(cams))])
    return Dataset(root, model, cams, records, np.array(images)[..., :3], np.array(masks))
