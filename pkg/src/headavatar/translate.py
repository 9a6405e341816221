"""Feature-map -> RGB translation network with a Haar-wavelet output, discriminator and losses."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .nn import Conv2d, Linear, Module


# ---------------------------------------------------------------------------
# orthonormal Haar transform; sub-band order LL, LH, HL, HH
# ---------------------------------------------------------------------------
def haar_fwt(img):
    """(C, 2H, 2W) ndarray -> (4, C, H, W) sub-bands."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-1] % 2 or img.shape[-2] % 2:
        raise ValueError("image sides must be even")
    a = img[..., 0::2, 0::2]
    b = img[..., 0::2, 1::2]
    c = img[..., 1::2, 0::2]
    d = img[..., 1::2, 1::2]
    return np.stack([(a + b + c + d) / 2, (a + b - c - d) / 2,
                     (a - b + c - d) / 2, (a - b - c + d) / 2])


def haar_iwt(coeffs):
    """(4, C, H, W) sub-bands (Tensor or ndarray) -> (C, 2H, 2W) image; differentiable."""
    coeffs = dc.as_tensor(coeffs)
    if coeffs.ndim != 4 or coeffs.shape[0] != 4:
        raise dc.ShapeError(f"expected (4, C, H, W) sub-bands, got {coeffs.shape}")
    ll, lh, hl, hh = coeffs[0], coeffs[1], coeffs[2], coeffs[3]
    a = (ll + lh + hl + hh) * 0.5
    b = (ll + lh - hl - hh) * 0.5
    c = (ll - lh + hl - hh) * 0.5
    d = (ll - lh - hl + hh) * 0.5
    top = dc.stack([a, b], axis=-1)          # (C, H, W, 2)
    bottom = dc.stack([c, d], axis=-1)
    full = dc.stack([top, bottom], axis=2)   # (C, H, 2, W, 2)
    ch, h, _, w, _ = full.shape
    return full.reshape(ch, 2 * h, 2 * w)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------
class TranslatorNet(Module):
    """U-shaped translator.

    Encoder: conv blocks with 2x average-pool downsampling.  Decoder: 2x
    upsampling blocks with encoder skips; every decoder scale emits an RGB
    image through a 1x1 head and these are accumulated (upsampled, summed).
    Beyond the input resolution, extra upsampling blocks run until half the
    output size, where the last head predicts 4 Haar sub-bands per colour
    channel; their inverse transform is added to the accumulated RGB and the
    sum goes through a sigmoid.
    """

    def __init__(self, rng, in_ch=8, channels=(32, 64, 64), upsample=2, extra_ch=16):
        if upsample < 2 or upsample & (upsample - 1):
            raise ValueError("upsample factor must be a power of two >= 2")
        self.upsample = upsample
        self.enc = []
        prev = in_ch
        for c in channels:
            self.enc.append(Conv2d(rng, prev, c))
            prev = c
        self.dec = []
        self.to_rgb = []
        for c in reversed(channels[:-1]):
            self.dec.append(Conv2d(rng, prev + c, c))
            self.to_rgb.append(Conv2d(rng, c, 3, k=1, gain=0.5))
            prev = c
        self.extra = []
        n_extra = int(np.log2(upsample)) - 1
        for _ in range(n_extra):
            self.extra.append(Conv2d(rng, prev, extra_ch))
            self.to_rgb.append(Conv2d(rng, extra_ch, 3, k=1, gain=0.5))
            prev = extra_ch
        self.wavelet = Conv2d(rng, prev, 12, k=1, gain=0.5)

    def __call__(self, feat):
        x = dc.as_tensor(feat)
        skips = []
        for i, conv in enumerate(self.enc):
            if i:
                x = dc.avgpool2x(x)
            x = dc.leaky_relu(conv(x))
            skips.append(x)
        rgb = None
        heads = iter(self.to_rgb)
        for i, conv in enumerate(self.dec):
            x = dc.upsample2x(x)
            x = dc.leaky_relu(conv(dc.concat([x, skips[-2 - i]], axis=0)))
            y = next(heads)(x)
            rgb = y if rgb is None else dc.upsample2x(rgb) + y
        for conv in self.extra:
            x = dc.leaky_relu(conv(dc.upsample2x(x)))
            y = next(heads)(x)
            rgb = y if rgb is None else dc.upsample2x(rgb) + y
        sub = self.wavelet(x)                                  # (12, h, w)
        h, w = sub.shape[1:]
        out = haar_iwt(sub.reshape(4, 3, h, w))
        if rgb is not None:
            out = out + dc.upsample2x(rgb)
        return dc.sigmoid(out)


def translate(net: TranslatorNet, feature_map):
    return net(feature_map)


class UpsampleSR(Module):
    """Ablation baseline: upsample-only super-resolution head (no encoder)."""

    def __init__(self, rng, in_ch=8, ch=32, upsample=2):
        self.first = Conv2d(rng, in_ch, ch)
        self.blocks = [Conv2d(rng, ch, ch) for _ in range(int(np.log2(upsample)))]
        self.out = Conv2d(rng, ch, 3, k=1, gain=0.5)

    def __call__(self, feat):
        x = dc.leaky_relu(self.first(dc.as_tensor(feat)))
        for conv in self.blocks:
            x = dc.leaky_relu(conv(dc.upsample2x(x)))
        return dc.sigmoid(self.out(x))


# ---------------------------------------------------------------------------
# discriminator and losses
# ---------------------------------------------------------------------------
class Discriminator(Module):
    """Four stride-2 conv blocks, global average pool, linear logit."""

    def __init__(self, rng, channels=(16, 32, 32, 64), in_ch=3):
        self.convs = []
        prev = in_ch
        for c in channels:
            self.convs.append(Conv2d(rng, prev, c, k=3, stride=2))
            prev = c
        self.head = Linear(rng, prev, 1, gain=1.0)

    def __call__(self, img):
        x = dc.as_tensor(img)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        for conv in self.convs:
            x = dc.leaky_relu(conv(x))
        pooled = dc.mean(x, axis=(2, 3))
        return self.head(pooled).reshape(-1)


def r1_penalty(disc, real):
    """Mean over the batch of ||d D(real) / d real||^2, differentiable wrt D's parameters."""
    real = Tensor(np.asarray(real.data if isinstance(real, Tensor) else real), requires_grad=True)
    with dc.enable_grad():
        logits = disc(real)
        (g,) = dc.grad(dc.tsum(logits), [real], create_graph=True)
    n = real.shape[0] if real.ndim == 4 else 1
    return dc.tsum(g * g) * (1.0 / n)


def adv_losses(disc, real, fake, lambda_r1=1.0):
    """Non-saturating GAN losses.

    L_G = mean softplus(-D(fake)).
    L_D = mean softplus(D(fake)) + mean softplus(-D(real)) + lambda_r1/2 * R1,
    with ``fake`` detached inside L_D.
    Returns (L_G, L_D, parts) where parts holds the individual L_D terms.
    """
    fake = dc.as_tensor(fake)
    l_g = dc.mean(dc.softplus(-disc(fake)))
    d_fake = dc.mean(dc.softplus(disc(fake.detach())))
    d_real = dc.mean(dc.softplus(-disc(real)))
    r1 = r1_penalty(disc, real) if lambda_r1 > 0 else Tensor(0.0)
    l_d = d_fake + d_real + r1 * (lambda_r1 / 2.0)
    return l_g, l_d, {"fake": d_fake, "real": d_real, "r1": r1 * (lambda_r1 / 2.0)}


class PerceptualLite:
    """L1 distance between features of a fixed, seeded, frozen random conv stack (3 scales).

    A stand-in for a pretrained perceptual metric; values are not comparable
    to LPIPS.
    """

    def __init__(self, seed=1234, channels=(8, 16, 16)):
        rng = np.random.default_rng(seed)
        self.weights = []
        prev = 3
        for c in channels:
            self.weights.append(Tensor(rng.normal(0.0, np.sqrt(2.0 / (prev * 9)), size=(c, prev, 3, 3))))
            prev = c

    def features(self, img):
        x = dc.as_tensor(img)
        feats = []
        for i, w in enumerate(self.weights):
            if i:
                x = dc.avgpool2x(x)
            x = dc.leaky_relu(dc.conv2d(x, w))
            feats.append(x)
        return feats

    def __call__(self, a, b):
        fa, fb = self.features(a), self.features(b)
        total = None
        for x, y in zip(fa, fb):
            d = dc.mean(dc.where(x.data >= y.data, x - y, y - x))
            total = d if total is None else total + d
        return total * (1.0 / len(fa))


_PERCEPTUAL = None


def perceptual_lite(img_a, img_b):
    global _PERCEPTUAL
    if _PERCEPTUAL is None:
        _PERCEPTUAL = PerceptualLite()
    return _PERCEPTUAL(img_a, img_b)


def l1_loss(a, b):
    a, b = dc.as_tensor(a), dc.as_tensor(b)
    return dc.mean(dc.where(a.data >= b.data, a - b, b - a))
