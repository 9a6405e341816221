"""Vectorised z-buffer triangle rasterisation shared by the ortho and pinhole renderers.

Pixel (row i, col j) has its centre at image coordinates (j + 0.5, i + 0.5);
row 0 is the top of the image.
"""
from __future__ import annotations

import numpy as np


def zbuffer(screen, depth, faces, attrs, height, width, perspective=False, chunk=400_000):
    """Rasterise triangles already projected to pixel coordinates.

    screen: (V, 2) image-space (x, y) per vertex; depth: (V,) smaller is nearer.
    attrs: (V, A) per-vertex attributes interpolated barycentrically (with
    perspective correction when ``perspective``; depth must then be the
    positive camera-space z).
    Returns (attr image (H, W, A), coverage mask (H, W) bool, face id (H, W)).
    Degenerate (zero-area) triangles are skipped; no back-face culling.
    """
    screen = np.asarray(screen, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    attrs = np.asarray(attrs, dtype=np.float64)
    n_attr = attrs.shape[1]
    out = np.zeros((height, width, n_attr))
    fid = np.full((height, width), -1, dtype=np.int64)
    if len(faces) == 0:
        return out, fid >= 0, fid

    p = screen[faces]                              # (F, 3, 2)
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    area = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    ok = np.abs(area) > 1e-12
    lo = np.ceil(p.min(axis=1) - 0.5).astype(np.int64)     # first centre >= min
    hi = np.floor(p.max(axis=1) - 0.5).astype(np.int64)    # last centre <= max
    lo = np.maximum(lo, 0)
    hi[:, 0] = np.minimum(hi[:, 0], width - 1)
    hi[:, 1] = np.minimum(hi[:, 1], height - 1)
    nx = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
    ny = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    counts = np.where(ok, nx * ny, 0)
    tri_ids = np.nonzero(counts)[0]
    if len(tri_ids) == 0:
        return out, fid >= 0, fid

    best_depth = np.full(height * width, np.inf)
    best_face = np.full(height * width, -1, dtype=np.int64)
    best_bary = np.zeros((height * width, 3))

    # process triangles in chunks bounded by candidate-pixel count
    cum = np.cumsum(counts[tri_ids])
    start = 0
    while start < len(tri_ids):
        base = cum[start - 1] if start else 0
        stop = int(np.searchsorted(cum, base + chunk, side="right"))
        stop = max(stop, start + 1)
        ids = tri_ids[start:stop]
        c = counts[ids]
        tri = np.repeat(ids, c)
        offs = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
        px = lo[tri, 0] + offs % nx[tri]
        py = lo[tri, 1] + offs // nx[tri]
        cx = px + 0.5
        cy = py + 0.5
        a = p[tri, 0]
        w1 = ((cx - a[:, 0]) * e2[tri, 1] - (cy - a[:, 1]) * e2[tri, 0]) / area[tri]
        w2 = (e1[tri, 0] * (cy - a[:, 1]) - e1[tri, 1] * (cx - a[:, 0])) / area[tri]
        w0 = 1.0 - w1 - w2
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        tri, px, py = tri[inside], px[inside], py[inside]
        bary = np.stack([w0[inside], w1[inside], w2[inside]], axis=1)
        dz = depth[faces[tri]]
        if perspective:
            z = 1.0 / np.sum(bary / dz, axis=1)
        else:
            z = np.sum(bary * dz, axis=1)
        pix = py * width + px
        # nearest fragment per pixel; ties broken by lower face index
        order = np.lexsort((tri, z, pix))
        pix, z, tri, bary = pix[order], z[order], tri[order], bary[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        pix, z, tri, bary = pix[first], z[first], tri[first], bary[first]
        better = (z < best_depth[pix]) | ((z == best_depth[pix]) & (tri < best_face[pix]))
        pix, z, tri, bary = pix[better], z[better], tri[better], bary[better]
        best_depth[pix] = z
        best_face[pix] = tri
        best_bary[pix] = bary
        start = stop

    hit = best_face >= 0
    idx = np.nonzero(hit)[0]
    f = faces[best_face[idx]]
    b = best_bary[idx]
    if perspective:
        b = b / depth[f]
        b = b / b.sum(axis=1, keepdims=True)
    vals = np.einsum("nk,nka->na", b, attrs[f])
    out.reshape(-1, n_attr)[idx] = vals
    fid.reshape(-1)[idx] = best_face[idx]
    return out, hit.reshape(height, width), fid
