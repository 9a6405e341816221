"""Orthographic normal/texture/mask renderings of the face proxy for the three canonical views.

View conventions (canonical box [-1, 1]^3 mapped onto the R x R image):

* front looks along -z: image u = x, v = -y
* left looks along +x: image u = z, v = -y
* right looks along -x: image u = -z, v = -y

Row 0 is the top of the image (y = +1).  Pixel centres follow the
top-left convention of :mod:`headavatar.raster`.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .faceproxy import BlendshapeModel, HeadPose, Mesh, apply_pose, deform_mesh, vertex_normals, write_png
from .raster import zbuffer

VIEWS = ("front", "left", "right")
BOUND = 1.0

# (u axis, sign), (depth axis, sign): depth grows away from the viewer
_AXES = {
    "front": ((0, 1.0), (2, -1.0)),
    "left": ((2, 1.0), (0, 1.0)),
    "right": ((2, -1.0), (0, -1.0)),
}


@dataclass(frozen=True)
class OrthoView:
    name: str
    resolution: int
    bound: float = BOUND

    def __post_init__(self):
        if self.name not in _AXES:
            raise ValueError(f"unknown view {self.name!r}")

    def to_pixels(self, points):
        """(N,3) canonical points -> (N,2) pixel coords and (N,) depth."""
        (ua, us), (da, ds) = _AXES[self.name]
        r = self.resolution
        u = us * points[:, ua]
        v = -points[:, 1]
        px = (u + self.bound) / (2 * self.bound) * r
        py = (v + self.bound) / (2 * self.bound) * r
        return np.stack([px, py], axis=1), ds * points[:, da]


@dataclass
class RenderingSet:
    """Per-view condition maps, each (R, R, C); background pixels are zero."""
    normal: dict
    texture: dict
    mask: dict

    def stack(self, view):
        """Channel-first (7, R, R) stack in the fixed order normal, texture, mask."""
        return np.concatenate([self.normal[view], self.texture[view], self.mask[view]],
                              axis=2).transpose(2, 0, 1)

    def front_stack(self):
        return self.stack("front")

    def side_stack(self):
        """(14, R, R): left stack and the right stack mirrored into the left view's (z, y) frame."""
        return np.concatenate([self.stack("left"), self.stack("right")[:, :, ::-1]], axis=0)


def rasterize_ortho(mesh: Mesh, view: OrthoView):
    """Nearest-fragment orthographic rasterisation -> (normal, texture, mask) maps."""
    r = view.resolution
    if len(mesh.faces) == 0 or len(mesh.vertices) == 0:
        return np.zeros((r, r, 3)), np.zeros((r, r, 3)), np.zeros((r, r, 1))
    normals, _ = vertex_normals(mesh)
    colors = mesh.colors if mesh.colors is not None else np.zeros_like(mesh.vertices)
    screen, depth = view.to_pixels(mesh.vertices)
    attrs = np.concatenate([normals, colors], axis=1)
    img, hit, _ = zbuffer(screen, depth, mesh.faces, attrs, r, r)
    n = img[..., :3]
    norm = np.linalg.norm(n, axis=2, keepdims=True)
    n = np.where(norm > 1e-12, n / np.maximum(norm, 1e-12), 0.0)
    normal = np.where(hit[..., None], (n + 1.0) / 2.0, 0.0)
    texture = np.where(hit[..., None], img[..., 3:6], 0.0)
    return normal, texture, hit[..., None].astype(np.float64)


def render_condition_set(model: BlendshapeModel, delta, pose: HeadPose | None = None,
                         mode: str = "zero_posed", texture: bool = True,
                         resolution: int = 32) -> RenderingSet:
    """Condition maps of the deformed proxy; ``mode='posed'`` renders it after the head pose."""
    if mode not in ("zero_posed", "posed"):
        raise ValueError(f"unknown rendering mode {mode!r}")
    mesh = deform_mesh(model, delta)
    if mode == "posed" and pose is not None:
        mesh = apply_pose(mesh, pose)
    out = RenderingSet({}, {}, {})
    for name in VIEWS:
        n, t, m = rasterize_ortho(mesh, OrthoView(name, resolution))
        out.normal[name] = n
        out.texture[name] = t if texture else np.zeros_like(t)
        out.mask[name] = m
    return out


def dump_rendering_set(rs: RenderingSet, out_dir, prefix="cond"):
    """Write normal/texture/mask PNG triplets per view."""
    os.makedirs(out_dir, exist_ok=True)
    for name in VIEWS:
        write_png(os.path.join(out_dir, f"{prefix}_{name}_normal.png"), rs.normal[name])
        write_png(os.path.join(out_dir, f"{prefix}_{name}_texture.png"), rs.texture[name])
        write_png(os.path.join(out_dir, f"{prefix}_{name}_mask.png"), rs.mask[name][..., 0])
