"""Default finite-difference suite over every differentiable building block of the pipeline."""
from __future__ import annotations

import contextlib
import time

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, grad_check
from .faceproxy import HeadPose
from .motionwarp import WeightVolumeGenerator, blend_weight, gen_weight_volume, warp_to_canonical
from .planegen import FeaturePlanes, MappingNetwork, PlaneGenerator, map_latent
from .radiancefield import DecoderMLP, PosEncConfig, RGBHead, query_canonical
from .translate import Discriminator, TranslatorNet, adv_losses, haar_iwt, r1_penalty
from .volrender import integrate


@contextlib.contextmanager
def swapped(owner, attr, value):
    """Temporarily replace ``owner.attr`` (a parameter) with a probe tensor."""
    old = getattr(owner, attr)
    setattr(owner, attr, value)
    try:
        yield
    finally:
        setattr(owner, attr, old)


def _projection(rng, shape):
    """Fixed random weights so each check reduces an output to a generic scalar."""
    return rng.normal(size=shape)


def default_suite(seed=0):
    """List of (name, fn, inputs); each fn maps tensors to a scalar."""
    rng = np.random.default_rng(seed)
    cases = []

    x = rng.normal(size=(2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    proj = _projection(rng, (3, 5, 5))
    cases.append(("conv2d", lambda x, w: dc.tsum(dc.conv2d(x, w) * proj), [x, w]))

    style = rng.uniform(0.5, 1.5, size=2)
    cases.append(("modulated_conv2d", lambda x, w, s: dc.tsum(dc.modulated_conv2d(x, w, s) * proj),
                  [x, w, style]))

    plane = rng.normal(size=(3, 6, 6))
    uv = rng.uniform(0.1, 0.9, size=(5, 2))
    pb = _projection(rng, (5, 3))
    cases.append(("bilinear_sample", lambda p, q: dc.tsum(dc.bilinear_sample(p, q) * pb), [plane, uv]))

    vol = rng.uniform(size=(4, 4, 4))
    xyz = rng.uniform(-0.7, 0.7, size=(5, 3))
    pt = _projection(rng, 5)
    cases.append(("trilinear_sample", lambda v, q: dc.tsum(dc.trilinear_sample(v, q) * pt), [vol, xyz]))

    # canonical query: plane features -> decoder -> (sigma, colour feature)
    pe = PosEncConfig(2)
    dec = DecoderMLP(rng, 2 * 3 + pe.dim, hidden=8, depth=2, feat_dim=4)
    pts = rng.uniform(-0.8, 0.8, size=(4, 3))
    pf = _projection(rng, (4, 4))

    def query(front, side, p):
        sigma, c = query_canonical(p, FeaturePlanes(front, side), dec, pe)
        return dc.tsum(sigma) + dc.tsum(c * pf)

    cases.append(("query_canonical", query, [plane, rng.normal(size=(3, 6, 6)), pts]))

    head = RGBHead(rng, 4)

    def decoder_weight(wt):
        with swapped(dec.trunk.layers[0], "weight", wt):
            sigma, c = query_canonical(pts, FeaturePlanes(Tensor(plane), Tensor(plane)), dec, pe)
            return dc.tsum(sigma) + dc.tsum(head(c) * pf[:, :3])

    cases.append(("decoder_weights", decoder_weight, [dec.trunk.layers[0].weight.data]))

    # mapping network + modulated plane generator wrt the embedding
    mapping = MappingNetwork(rng, 3 + 6, w_dim=4, hidden=6, depth=1)
    gen = PlaneGenerator(rng, 2, out_ch=2, channels=(3, 4), w_dim=4, resolution=4)
    rend = rng.uniform(size=(2, 4, 4))
    pose = rng.normal(scale=0.2, size=6)
    pg = _projection(rng, (2, 4, 4))
    cases.append(("plane_generator_gamma",
                  lambda g: dc.tsum(gen(rend, map_latent(mapping, g, pose)) * pg), [rng.normal(size=3)]))

    # weight volume generator
    wgen = WeightVolumeGenerator(rng, seed_dim=4, channels=(2, 2, 2), n_blocks=1)
    pw = _projection(rng, (4, 4, 4))

    def wvol(wt):
        with swapped(wgen.fc, "weight", wt):
            return dc.tsum(gen_weight_volume(wgen) * pw)

    cases.append(("weight_volume", wvol, [wgen.fc.weight.data]))

    # inverse skinning warp wrt the weight volume
    hp = HeadPose.from_vector([0.1, -0.2, 0.05, 0.02, -0.01, 0.03])
    wp_pts = rng.uniform(-0.6, 0.6, size=(5, 3))
    px = _projection(rng, (5, 3))

    def warp(v):
        w_p = blend_weight(wp_pts, hp, v)
        return dc.tsum(warp_to_canonical(wp_pts, hp, w_p) * px)

    cases.append(("warp", warp, [rng.uniform(0.2, 0.8, size=(4, 4, 4))]))

    # quadrature
    deltas = rng.uniform(0.05, 0.2, size=(3, 6))
    pq = _projection(rng, (3, 2))

    def quad(sigma, feats):
        f, a = integrate(sigma, feats, deltas)
        return dc.tsum(f * pq) + dc.tsum(a)

    cases.append(("quadrature", quad, [rng.uniform(0.1, 3.0, size=(3, 6)), rng.normal(size=(3, 6, 2))]))

    cases.append(("haar_iwt", lambda c: dc.tsum(haar_iwt(c) * proj[:2, :4, :4]),
                  [rng.normal(size=(4, 2, 2, 2))]))

    # translator wrt its input feature map (4 x 8 x 8 toy instance)
    trans = TranslatorNet(rng, in_ch=4, channels=(4, 6), upsample=2)
    ptr = _projection(rng, (3, 16, 16))
    cases.append(("translator", lambda f: dc.tsum(trans(f) * ptr), [rng.normal(size=(4, 8, 8))]))

    # R1 path: double backward through the discriminator, wrt its first conv weight
    disc = Discriminator(rng, channels=(2, 2, 2, 2))
    real = rng.uniform(size=(3, 16, 16))

    def r1(wt):
        with swapped(disc.convs[0], "weight", wt):
            return r1_penalty(disc, real)

    cases.append(("r1_penalty", r1, [disc.convs[0].weight.data]))

    cases.append(("adv_generator", lambda fake: adv_losses(disc, real, fake, 0.0)[0],
                  [rng.uniform(size=(3, 16, 16))]))
    fake = rng.uniform(size=(3, 16, 16))

    def adv_disc(wt):
        with swapped(disc.head, "weight", wt):
            return adv_losses(disc, real, fake, 1.0)[1]

    cases.append(("adv_discriminator", adv_disc, [disc.head.weight.data]))
    return cases


def run_suite(tol=1e-4, eps=1e-5, seed=0, verbose=True, out=print):
    """Run every case; returns (all_passed, reports, seconds)."""
    t0 = time.perf_counter()
    reports = []
    for name, fn, inputs in default_suite(seed):
        rep = grad_check(fn, inputs, eps=eps, tol=tol, name=name)
        reports.append(rep)
        if verbose:
            out(str(rep))
    dt = time.perf_counter() - t0
    return all(r.passed for r in reports), reports, dt
