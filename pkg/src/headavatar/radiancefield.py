"""Canonical appearance field: plane sampling + positional encoding -> density and colour feature."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import measure

from . import diffcore as dc
from .nn import MLP, Linear, Module
from .planegen import FeaturePlanes

BOUND = 1.0


@dataclass(frozen=True)
class PosEncConfig:
    n_bands: int = 6
    include_raw: bool = True

    @property
    def dim(self):
        return 3 * 2 * self.n_bands + (3 if self.include_raw else 0)


def posenc(x, cfg: PosEncConfig = PosEncConfig()):
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)] per point."""
    x = dc.as_tensor(x)
    single = x.ndim == 1
    if single:
        x = dc.reshape(x, (1, 3))
    parts = [x] if cfg.include_raw else []
    for i in range(cfg.n_bands):
        arg = x * (2.0 ** i * np.pi)
        parts += [dc.sin(arg), dc.cos(arg)]
    out = dc.concat(parts, axis=1)
    return dc.reshape(out, (-1,)) if single else out


def plane_coords(x_c):
    """Orthogonal projections of canonical points: front (x, y) and side (z, y) in [0,1]^2."""
    x_c = dc.as_tensor(x_c)
    u_front = (x_c[:, 0] + BOUND) * (0.5 / BOUND)
    u_side = (x_c[:, 2] + BOUND) * (0.5 / BOUND)
    v = (BOUND - x_c[:, 1]) * (0.5 / BOUND)
    return dc.stack([u_front, v], axis=1), dc.stack([u_side, v], axis=1)


class DecoderMLP(Module):
    def __init__(self, rng, in_dim, hidden=64, depth=2, feat_dim=8, density_bias=-1.0):
        self.in_dim = in_dim
        self.trunk = MLP(rng, [in_dim] + [hidden] * depth, act=dc.relu, out_gain=np.sqrt(2.0))
        self.sigma = Linear(rng, hidden, 1, gain=1.0, bias_init=density_bias)
        self.feat = Linear(rng, hidden, feat_dim, gain=1.0)
        self.feat_dim = feat_dim

    def __call__(self, f):
        h = dc.relu(self.trunk(f))
        sigma = dc.softplus(self.sigma(h)).reshape(-1)
        return sigma, self.feat(h)


def point_features(x_c, planes: FeaturePlanes, pe: PosEncConfig = PosEncConfig()):
    """The concatenated point feature [front sample, side sample, posenc]."""
    uv_f, uv_s = plane_coords(x_c)
    ff = dc.bilinear_sample(planes.front, uv_f)
    fs = dc.bilinear_sample(planes.side, uv_s)
    return dc.concat([ff, fs, posenc(x_c, pe)], axis=1)


def query_canonical(x_c, planes: FeaturePlanes, decoder: DecoderMLP,
                    pe: PosEncConfig = PosEncConfig(), extra=None):
    """Density (N,) and colour feature (N, C_c) at canonical points ``x_c`` (N, 3).

    ``extra`` (a vector) is appended to every point feature when the
    embedding is fed to the decoder instead of the generators.
    """
    x_c = dc.as_tensor(x_c)
    single = x_c.ndim == 1
    if single:
        x_c = dc.reshape(x_c, (1, 3))
    f = point_features(x_c, planes, pe)
    if extra is not None:
        extra = dc.as_tensor(extra)
        f = dc.concat([f, dc.broadcast_to(dc.reshape(extra, (1, -1)), (f.shape[0], extra.shape[0]))], axis=1)
    sigma, c = decoder(f)
    if single:
        return sigma.reshape(()), c.reshape(-1)
    return sigma, c


class ExprMLPField(Module):
    """Plane-free baseline: posenc(x_c) ⊕ expression ⊕ embedding into a deeper MLP."""

    def __init__(self, rng, n_expr, emb_dim, pe: PosEncConfig = PosEncConfig(), hidden=128, depth=4,
                 feat_dim=8, density_bias=-1.0):
        self.pe = pe
        self.decoder = DecoderMLP(rng, pe.dim + n_expr + emb_dim, hidden, depth, feat_dim, density_bias)

    def __call__(self, x_c, delta, gamma):
        x_c = dc.as_tensor(x_c)
        cond = dc.concat([dc.as_tensor(np.asarray(delta, dtype=np.float64)), dc.as_tensor(gamma)], axis=0)
        n = x_c.shape[0]
        f = dc.concat([posenc(x_c, self.pe), dc.broadcast_to(dc.reshape(cond, (1, -1)), (n, cond.shape[0]))],
                      axis=1)
        return self.decoder(f)


class RGBHead(Module):
    """Single linear layer from the colour feature to RGB, squashed by a sigmoid."""

    def __init__(self, rng, feat_dim=8):
        self.linear = Linear(rng, feat_dim, 3, gain=1.0)

    def __call__(self, c):
        return dc.sigmoid(self.linear(c))


def feature_to_rgb(head: RGBHead, c):
    return head(c)


# ---------------------------------------------------------------------------
# isosurface extraction
# ---------------------------------------------------------------------------
def density_grid(density_fn, resolution, bound=BOUND, chunk=65536):
    """Evaluate ``density_fn((N,3) ndarray) -> (N,)`` on a ``resolution``^3 lattice over the box."""
    lin = np.linspace(-bound, bound, resolution)
    pts = np.stack(np.meshgrid(lin, lin, lin, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.concatenate([np.asarray(density_fn(pts[i:i + chunk])).reshape(-1)
                           for i in range(0, len(pts), chunk)])
    return vals.reshape(resolution, resolution, resolution)


def extract_mesh(density_fn, resolution=64, iso=10.0, bound=BOUND):
    """Marching-cubes surface of the density at ``iso``; returns (vertices, faces).

    An empty or fully-occupied field gives an empty mesh.
    """
    if resolution < 8:
        raise ValueError("grid resolution must be >= 8")
    grid = density_grid(density_fn, resolution, bound)
    if not (grid.min() < iso < grid.max()):
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    spacing = (2 * bound / (resolution - 1),) * 3
    verts, faces, _, _ = measure.marching_cubes(grid, level=iso, spacing=spacing)
    return verts - bound, faces.astype(np.int64)


def write_obj(path, vertices, faces):
    with open(path, "w") as fh:
        for v in vertices:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
