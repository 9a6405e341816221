"""Front/side feature-plane generators conditioned on proxy renderings, embeddings and pose."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .nn import MLP, Conv2d, Linear, Module, ModConv2d

POSE_DIM = 6


@dataclass
class FeaturePlanes:
    front: Tensor     # (C_p, R, R), sampled at (x, y)
    side: Tensor      # (C_p, R, R), sampled at (z, y)


class EmbeddingTable(Module):
    def __init__(self, rng, n_frames, dim, std=0.01):
        self.table = Tensor(rng.normal(0.0, std, size=(n_frames, dim)), requires_grad=True)

    def row(self, i):
        return self.table[i]

    def mean_row(self):
        """Frozen test-time code."""
        return Tensor(self.table.data.mean(axis=0))


def embedding_penalty(table, mode="meansq"):
    """Shrinkage on the embedding table: mean square (default) or mean-centred variance."""
    t = table.table if isinstance(table, EmbeddingTable) else dc.as_tensor(table)
    if mode == "variance":
        t = t - dc.mean(t, axis=0, keepdims=True)
    elif mode != "meansq":
        raise ValueError(f"unknown penalty mode {mode!r}")
    return dc.mean(t * t)


class MappingNetwork(Module):
    """MLP from concat(embedding, pose[, expression]) to the style latent."""

    def __init__(self, rng, in_dim, w_dim=64, hidden=64, depth=2):
        self.in_dim = in_dim
        self.mlp = MLP(rng, [in_dim] + [hidden] * depth + [w_dim], act=lambda x: dc.leaky_relu(x))

    def __call__(self, *parts):
        parts = [dc.as_tensor(p) for p in parts if p is not None]
        x = dc.concat(parts, axis=0) if len(parts) > 1 else parts[0]
        if x.shape != (self.in_dim,):
            raise dc.ShapeError(f"mapping input has {x.shape[0]} values, expected {self.in_dim}")
        return self.mlp(dc.reshape(x, (1, -1))).reshape(-1)


def map_latent(mapping: MappingNetwork, gamma, pose, extra=None):
    """Style latent from embedding ``gamma`` and the 6 raw pose values (axis-angle, translation)."""
    pose = np.asarray(pose.data if isinstance(pose, Tensor) else pose, dtype=np.float64).reshape(-1)
    if pose.shape != (POSE_DIM,):
        raise dc.ShapeError("pose must have 6 values")
    return mapping(gamma, Tensor(pose), extra)


class PlaneGenerator(Module):
    """Conv encoder over a rendering stack + modulated decoder with injected skips.

    ``channels`` lists encoder widths from full to coarsest resolution; the
    decoder mirrors them and each decoder level concatenates the encoder
    feature of matching resolution.
    """

    def __init__(self, rng, in_ch, out_ch=16, channels=(16, 32, 64), w_dim=64, resolution=32):
        self.in_ch = in_ch
        self.resolution = resolution
        self.enc = []
        prev = in_ch
        for c in channels:
            self.enc.append(Conv2d(rng, prev, c))
            prev = c
        self.dec = [ModConv2d(rng, channels[-1], channels[-1], w_dim)]
        prev = channels[-1]
        for c in reversed(channels[:-1]):
            self.dec.append(ModConv2d(rng, prev + c, c, w_dim))
            prev = c
        self.head = Conv2d(rng, prev, out_ch, k=1, gain=1.0)

    def encode(self, x):
        feats = []
        for i, conv in enumerate(self.enc):
            if i:
                x = dc.avgpool2x(x)
            x = dc.leaky_relu(conv(x))
            feats.append(x)
        return feats

    def decode(self, x, w, skips=None):
        x = dc.leaky_relu(self.dec[0](x, w))
        for i, conv in enumerate(self.dec[1:]):
            x = dc.upsample2x(x)
            skip = skips[-2 - i] if skips is not None else Tensor(np.zeros((conv.weight.shape[1] - x.shape[0],) + x.shape[1:]))
            x = dc.leaky_relu(conv(dc.concat([x, skip], axis=0), w))
        return self.head(x)

    def __call__(self, renderings, w):
        renderings = dc.as_tensor(renderings)
        r = self.resolution
        if renderings.shape != (self.in_ch, r, r):
            raise dc.ShapeError(f"expected rendering stack {(self.in_ch, r, r)}, got {renderings.shape}")
        feats = self.encode(renderings)
        return self.decode(feats[-1], w, feats)


def gen_front(gen: PlaneGenerator, front_stack, w_s) -> Tensor:
    return gen(front_stack, w_s)


def gen_side(gen: PlaneGenerator, left_stack, right_stack_mirrored, w_s) -> Tensor:
    """Side plane from channel-concatenated left and (mirrored) right stacks."""
    stack = np.concatenate([np.asarray(left_stack), np.asarray(right_stack_mirrored)], axis=0)
    return gen(stack, w_s)


class VectorPlaneGenerator(Module):
    """Rendering-free plane generator used by the vector-condition ablations.

    ``vector_plane``: the expression vector is lifted by an MLP to the coarse
    feature grid the decoder starts from.  ``vector_plane_exprmod``: the
    decoder starts from a learned constant and the expression enters through
    the mapping network instead.
    """

    def __init__(self, rng, n_expr, out_ch=16, channels=(16, 32, 64), w_dim=64, resolution=32,
                 mode="vector_plane"):
        if mode not in ("vector_plane", "vector_plane_exprmod"):
            raise ValueError(mode)
        self.mode = mode
        self.coarse = resolution // 2 ** (len(channels) - 1)
        self.channels = channels
        c = channels[-1]
        if mode == "vector_plane":
            self.lift = Linear(rng, n_expr, c * self.coarse ** 2, gain=1.0)
        else:
            self.const = Tensor(rng.normal(size=(c, self.coarse, self.coarse)), requires_grad=True)
        self.body = PlaneGenerator(rng, 1, out_ch, channels, w_dim, resolution)
        self.body.enc = []          # decoder only

    def __call__(self, delta, w):
        c = self.channels[-1]
        if self.mode == "vector_plane":
            x = self.lift(dc.reshape(dc.as_tensor(delta), (1, -1))).reshape(c, self.coarse, self.coarse)
        else:
            x = self.const
        return self.body.decode(x, w, None)


def vector_condition_planes(front: VectorPlaneGenerator, side: VectorPlaneGenerator,
                            mapping: MappingNetwork, delta, pose, gamma) -> FeaturePlanes:
    delta = np.asarray(delta, dtype=np.float64)
    extra = Tensor(delta) if front.mode == "vector_plane_exprmod" else None
    w = map_latent(mapping, gamma, pose, extra)
    return FeaturePlanes(front(delta, w), side(delta, w))

