"""Head/torso motion decoupling: canonical weight volume and inverse-LBS warp."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .faceproxy import HeadPose
from .nn import Linear, Module, param, zeros_param

BOUND = 1.0
BLEND_EPS = 1e-6
WVOL_MAGIC = b"WVOL1"


@dataclass
class TorsoTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))


class WeightVolumeGenerator(Module):
    """Constant random seed -> 2^3 grid -> three k2/s2 transposed-conv blocks -> D^3 sigmoid grid."""

    def __init__(self, rng, seed_dim=32, channels=(16, 16, 8), n_blocks=3, final_bias=0.0):
        self.seed = rng.normal(size=(1, seed_dim))            # constant, not trained
        self.c0 = channels[0]
        self.fc = Linear(rng, seed_dim, channels[0] * 8, gain=1.0)
        self.blocks = []
        prev = channels[0]
        for i in range(n_blocks):
            c = 1 if i == n_blocks - 1 else channels[min(i + 1, len(channels) - 1)]
            std = (np.sqrt(2.0) if i < n_blocks - 1 else 0.5) / np.sqrt(prev)
            self.blocks.append((param(rng, (prev, c * 8), std),
                                zeros_param((c * 8,), final_bias if i == n_blocks - 1 else 0.0)))
            prev = c
        self.resolution = 2 * 2 ** n_blocks

    def named_parameters(self, prefix=""):
        out = [(f"{prefix}fc.weight", self.fc.weight), (f"{prefix}fc.bias", self.fc.bias)]
        for i, (w, b) in enumerate(self.blocks):
            out += [(f"{prefix}blocks.{i}.weight", w), (f"{prefix}blocks.{i}.bias", b)]
        return out

    def logits(self):
        x = self.fc(Tensor(self.seed)).reshape(self.c0, 2, 2, 2)
        for i, (w, b) in enumerate(self.blocks):
            c, d = x.shape[0], x.shape[1]
            cout = w.shape[1] // 8
            flat = dc.transpose(x, (1, 2, 3, 0)).reshape(d ** 3, c)
            y = dc.matmul(flat, w) + b                                    # (d^3, cout*8)
            y = y.reshape(d, d, d, cout, 2, 2, 2)
            y = dc.transpose(y, (3, 0, 4, 1, 5, 2, 6)).reshape(cout, 2 * d, 2 * d, 2 * d)
            x = dc.leaky_relu(y) if i < len(self.blocks) - 1 else y
        return x.reshape(x.shape[1:])


def gen_weight_volume(gen: WeightVolumeGenerator) -> Tensor:
    """(D, D, D) canonical head weights in [0, 1], indexed [x, y, z] over the canonical box."""
    return dc.sigmoid(gen.logits())


def _apply_rt(x, r, t):
    return x @ r.T + t


def blend_weight(x, pose: HeadPose, w_c, eps=BLEND_EPS):
    """Posed-space head weight w_p = a / (a + (1 - b) + eps).

    a = w_c(R_head x + t_head) and b = w_c(x), where (R_head, t_head) is the
    inverse head pose.  Points outside the canonical box read w_c = 0.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x.reshape(-1, 3)
    r, t = pose.inverse_rt()
    a = dc.trilinear_sample(w_c, _apply_rt(x2, r, t), -BOUND, BOUND)
    b = dc.trilinear_sample(w_c, x2, -BOUND, BOUND)
    w = a / (a + (1.0 - b) + eps)
    return w.reshape(()) if single else w


def warp_to_canonical(x, pose: HeadPose, w_p, torso: TorsoTransform | None = None):
    """x_c = w_p (R_head x + t_head) + (1 - w_p)(R_torso x + t_torso)."""
    torso = torso or TorsoTransform()
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x.reshape(-1, 3)
    r, t = pose.inverse_rt()
    head = _apply_rt(x2, r, t)
    body = _apply_rt(x2, np.asarray(torso.rotation), np.asarray(torso.translation))
    w = dc.reshape(dc.as_tensor(w_p), (-1, 1))
    out = w * head + (1.0 - w) * body
    return out.reshape(3) if single else out


def warp_field(canonical_field, pose: HeadPose, w_c, torso: TorsoTransform | None = None):
    """Observed-space field H(x) = H_C(T(x, pose))."""

    def field_fn(x):
        w_p = blend_weight(x, pose, w_c)
        return canonical_field(warp_to_canonical(x, pose, w_p, torso))

    return field_fn


def save_weight_volume(path, volume):
    v = np.asarray(volume.data if isinstance(volume, Tensor) else volume, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(WVOL_MAGIC)
        fh.write(struct.pack("<I", v.shape[0]))
        fh.write(v.tobytes())


def load_weight_volume(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:5] != WVOL_MAGIC:
        raise ValueError(f"{path}: not a weight volume dump")
    (d,) = struct.unpack_from("<I", data, 5)
    return np.frombuffer(data, dtype="<f4", count=d ** 3, offset=9).reshape(d, d, d).astype(np.float64)
