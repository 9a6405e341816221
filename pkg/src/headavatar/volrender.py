"""Ray generation, two-pass sampling and emission-absorption quadrature."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .faceproxy import Camera

FMAP_MAGIC = b"FMAP1"


@dataclass
class SamplerConfig:
    n_coarse: int = 32
    n_fine: int = 8
    jitter: bool = True
    seed: int = 0


@dataclass
class Rays:
    origins: np.ndarray     # (N, 3)
    dirs: np.ndarray        # (N, 3), unit
    near: np.ndarray        # (N,)
    far: np.ndarray         # (N,)
    hit: np.ndarray         # (N,) bool; False rays contribute background only
    ids: np.ndarray         # (N,) pixel index, keys the per-ray random streams

    def __len__(self):
        return len(self.origins)

    def subset(self, idx):
        return Rays(self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx], self.hit[idx],
                    self.ids[idx])


def _splitmix64(x):
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = x
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def ray_uniforms(seed, ray_ids, stream, n):
    """Uniforms in [0, 1) that depend only on (seed, ray id, stream, column).

    Counter-based, so a ray's samples do not depend on how rays are batched.
    """
    with np.errstate(over="ignore"):
        ids = np.asarray(ray_ids, dtype=np.uint64)[:, None]
        col = np.arange(n, dtype=np.uint64)[None, :]
        key = _splitmix64(np.uint64(seed) * np.uint64(0x100000001B3) + np.uint64(stream))
        h = _splitmix64(_splitmix64(key ^ ids) + col)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


@dataclass
class RenderOutput:
    feature: Tensor   # (N, C_c) or (C_c, H, W)
    rgb: Tensor       # (N, 3) or (3, H, W)
    mask: Tensor      # (N,) or (1, H, W) accumulated alpha
    t_samples: np.ndarray | None = None


def scaled_camera(camera: Camera, resolution: int) -> Camera:
    s = resolution / camera.width
    return Camera(camera.focal * s, camera.cx * s, camera.cy * s, resolution, resolution,
                  camera.rotation, camera.translation)


def clip_to_box(origins, dirs, bound):
    """Slab test against [-bound, bound]^3; returns (near, far, hit)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (-bound - origins) * inv
        t1 = (bound - origins) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1)).max(axis=1)
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1)).min(axis=1)
    tmin = np.maximum(tmin, 0.0)
    hit = tmax > tmin
    return np.where(hit, tmin, 0.0), np.where(hit, tmax, 0.0), hit


def gen_rays(camera: Camera, resolution: int | None = None, bound: float = 1.0,
             near_far: tuple | None = None) -> Rays:
    """Pinhole rays through pixel centres, row-major, clipped to the box (or fixed near/far)."""
    if resolution is not None and resolution != camera.width:
        camera = scaled_camera(camera, resolution)
    h, w = camera.height, camera.width
    jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    d_cam = np.stack([(jj - camera.cx) / camera.focal, (ii - camera.cy) / camera.focal,
                      np.ones_like(jj)], axis=-1).reshape(-1, 3)
    dirs = d_cam @ camera.rotation          # camera -> world: R^T d
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, dirs.shape).copy()
    if near_far is not None:
        n = np.full(len(dirs), float(near_far[0]))
        f = np.full(len(dirs), float(near_far[1]))
        return Rays(origins, dirs, n, f, np.ones(len(dirs), dtype=bool), np.arange(len(dirs)))
    near, far, hit = clip_to_box(origins, dirs, bound)
    return Rays(origins, dirs, near, far, hit, np.arange(len(dirs)))


def _uniforms(rng, shape):
    if isinstance(rng, np.ndarray):
        if rng.shape != shape:
            raise ValueError(f"expected uniforms of shape {shape}, got {rng.shape}")
        return rng
    return rng.uniform(size=shape)


def stratified_samples(near, far, n, jitter=False, rng=None):
    """One sample per equal bin of [near, far]: bin midpoints, or uniform in the bin with jitter.

    ``rng`` is a Generator or a pre-drawn (N, n) array of uniforms.
    """
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    if n < 1:
        raise ValueError("need at least one sample")
    u = _uniforms(rng, (len(near), n)) if jitter else np.full((len(near), n), 0.5)
    edges = np.arange(n)[None, :] + u
    return near[:, None] + (far - near)[:, None] * edges / n


def importance_samples(weights, n_fine, near, far, rng, t_coarse=None):
    """Inverse-CDF samples from the piecewise-constant pdf over the equal coarse bins.

    Returns (t_fine (N, M) sorted, merged (N, n_coarse + M) sorted) where the
    merged set includes ``t_coarse`` if given.  Rays whose weights are all
    zero fall back to uniform (stratified-equivalent) bins.
    """
    w = np.asarray(weights, dtype=np.float64)
    near = np.atleast_1d(near).astype(np.float64)
    far = np.atleast_1d(far).astype(np.float64)
    n_rays, n_bins = w.shape
    w = np.maximum(w, 0.0)
    tot = w.sum(axis=1, keepdims=True)
    w = np.where(tot > 0, w, 1.0)
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((n_rays, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    u = np.sort(_uniforms(rng, (n_rays, n_fine)), axis=1)
    # last edge with cdf <= u; zero-mass bins are skipped because their edges repeat
    idx = np.sum(cdf[:, None, 1:] <= u[:, :, None], axis=2)
    idx = np.clip(idx, 0, n_bins - 1)
    lo = np.take_along_axis(cdf, idx, axis=1)
    p = np.take_along_axis(pdf, idx, axis=1)
    frac = np.clip((u - lo) / np.where(p > 0, p, 1.0), 0.0, 1.0)
    width = (far - near)[:, None] / n_bins
    t_fine = near[:, None] + (idx + frac) * width
    t_fine.sort(axis=1)
    if t_coarse is None:
        return t_fine, t_fine
    merged = np.sort(np.concatenate([t_coarse, t_fine], axis=1), axis=1)
    return t_fine, merged


def segment_lengths(t, far):
    """delta_i = t_{i+1} - t_i, and far - t_last for the last sample."""
    t = np.asarray(t, dtype=np.float64)
    far = np.atleast_1d(far).astype(np.float64)
    return np.concatenate([np.diff(t, axis=1), far[:, None] - t[:, -1:]], axis=1)


def compositing_weights(sigma, deltas):
    """alpha_i = 1 - exp(-sigma_i delta_i);  T_i alpha_i with T_i = exp(-sum_{j<i} sigma_j delta_j)."""
    sigma = dc.as_tensor(sigma)
    tau = sigma * np.asarray(deltas, dtype=sigma.dtype)
    alpha = 1.0 - dc.exp(-tau)
    excl = dc.cumsum(tau, axis=1) - tau
    return dc.exp(-excl) * alpha


def integrate(sigma, feats, deltas):
    """Accumulated feature (N, C) and alpha (N,) along each ray; no background term."""
    w = compositing_weights(sigma, deltas)
    feats = dc.as_tensor(feats)
    feat = dc.tsum(dc.reshape(w, w.shape + (1,)) * feats, axis=1)
    return feat, dc.tsum(w, axis=1)


def render_rays(field, rays: Rays, sampler: SamplerConfig, seed=None, background=0.5, rgb_fn=None):
    """Two-pass render.  ``field((P,3) ndarray) -> (sigma (P,), feature (P,C))``.

    The coarse pass runs without gradients and only supplies importance
    weights; the fine pass evaluates the field on coarse ∪ fine samples.
    rgb is integrated from per-sample ``rgb_fn(feature)`` and composited
    over the constant ``background``; features composite over zero.
    Random numbers are keyed by (seed, ray id), so results are independent
    of how the rays are partitioned into batches.
    """
    seed = sampler.seed if seed is None else seed
    n = len(rays)
    idx = np.nonzero(rays.hit)[0]
    if len(idx) == 0:
        c = _probe_feat_dim(field)
        return RenderOutput(Tensor(np.zeros((n, c))), Tensor(np.full((n, 3), background)),
                            Tensor(np.zeros(n)), None)
    near, far = rays.near[idx], rays.far[idx]
    o, d = rays.origins[idx], rays.dirs[idx]
    ids = rays.ids[idx]
    t = stratified_samples(near, far, sampler.n_coarse, sampler.jitter,
                           ray_uniforms(seed, ids, 0, sampler.n_coarse))
    if sampler.n_fine > 0:
        with dc.no_grad():
            pts = o[:, None, :] + t[..., None] * d[:, None, :]
            sig_c, _ = field(pts.reshape(-1, 3))
            w_c = compositing_weights(sig_c.data.reshape(t.shape), segment_lengths(t, far)).data
        _, t = importance_samples(w_c, sampler.n_fine, near, far,
                                  ray_uniforms(seed, ids, 1, sampler.n_fine), t)
    pts = o[:, None, :] + t[..., None] * d[:, None, :]
    sig, feat = field(pts.reshape(-1, 3))
    s = t.shape[1]
    sig = sig.reshape(len(idx), s)
    feat = feat.reshape(len(idx), s, feat.shape[-1])
    wts = compositing_weights(sig, segment_lengths(t, far))
    wts3 = dc.reshape(wts, wts.shape + (1,))
    f_acc = dc.tsum(wts3 * feat, axis=1)
    alpha = dc.tsum(wts, axis=1)
    rgb = dc.tsum(wts3 * rgb_fn(feat), axis=1) if rgb_fn is not None else f_acc[:, :3]
    c = feat.shape[-1]
    if len(idx) < n:
        # scatter hitting rays into the full batch; misses see background only
        f_acc = dc.index_add((n, c), idx, f_acc)
        alpha = dc.index_add((n,), idx, alpha)
        rgb = dc.index_add((n, 3), idx, rgb)
    rgb = rgb + dc.reshape(1.0 - alpha, (-1, 1)) * background
    return RenderOutput(f_acc, rgb, alpha, t)


def _probe_feat_dim(field):
    with dc.no_grad():
        _, f = field(np.zeros((1, 3)))
    return f.shape[-1]


def render_frame(field, camera: Camera, sampler: SamplerConfig, resolution=None, background=0.5,
                 rgb_fn=None, bound=1.0, near_far=None, chunk=None) -> RenderOutput:
    """Render a full image; outputs are channel-first maps (C, H, W)."""
    rays = gen_rays(camera, resolution, bound, near_far)
    if chunk is None:
        out = render_rays(field, rays, sampler, None, background, rgb_fn)
    else:
        parts = [render_rays(field, rays.subset(slice(i, i + chunk)), sampler, None, background, rgb_fn)
                 for i in range(0, len(rays), chunk)]
        out = RenderOutput(dc.concat([p.feature for p in parts], 0), dc.concat([p.rgb for p in parts], 0),
                           dc.concat([p.mask for p in parts], 0))
    res = resolution or camera.width
    hw = (res, res) if resolution else (camera.height, camera.width)

    def to_map(x):
        return dc.transpose(dc.reshape(x, hw + (-1,)), (2, 0, 1))

    return RenderOutput(to_map(out.feature), to_map(out.rgb), dc.reshape(out.mask, (1,) + hw))


def save_feature_map(path, fmap):
    a = np.asarray(fmap.data if isinstance(fmap, Tensor) else fmap, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FMAP_MAGIC)
        fh.write(struct.pack("<III", *a.shape))
        fh.write(a.tobytes())


def load_feature_map(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:5] != FMAP_MAGIC:
        raise ValueError(f"{path}: not a feature map dump")
    c, h, w = struct.unpack_from("<III", data, 5)
    return np.frombuffer(data, dtype="<f4", count=c * h * w, offset=17).reshape(c, h, w)
