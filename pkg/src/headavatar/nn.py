"""Minimal module/parameter containers on top of :mod:`headavatar.diffcore`."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


def param(rng, shape, std, dtype=np.float64):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, value=0.0, dtype=np.float64):
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


class Module:
    """Parameters are discovered from attributes, in assignment order."""

    def named_parameters(self, prefix=""):
        out = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{name}.{i}", item))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]


class Linear(Module):
    def __init__(self, rng, n_in, n_out, bias=True, gain=np.sqrt(2.0), bias_init=0.0):
        self.weight = param(rng, (n_in, n_out), gain / np.sqrt(n_in))
        self.bias = zeros_param((n_out,), bias_init) if bias else None

    def __call__(self, x):
        y = dc.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    def __init__(self, rng, sizes, act=dc.relu, out_gain=1.0):
        self.layers = [Linear(rng, a, b, gain=np.sqrt(2.0) if i < len(sizes) - 2 else out_gain)
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.act = act

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.act(x)
        return x


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, k=3, stride=1, gain=np.sqrt(2.0)):
        self.weight = param(rng, (c_out, c_in, k, k), gain / np.sqrt(c_in * k * k))
        self.bias = zeros_param((c_out,))
        self.stride = stride

    def __call__(self, x):
        return dc.conv2d(x, self.weight, bias=self.bias, stride=self.stride)


class ModConv2d(Module):
    """StyleGAN2-style modulated conv: per-layer affine maps the latent to a C_in style."""

    def __init__(self, rng, c_in, c_out, w_dim, k=3, demodulate=True):
        self.affine = Linear(rng, w_dim, c_in, gain=1.0, bias_init=1.0)
        self.weight = param(rng, (c_out, c_in, k, k), 1.0)
        self.bias = zeros_param((c_out,))
        self.demodulate = demodulate
        self.scale = 1.0 if demodulate else 1.0 / np.sqrt(c_in * k * k)

    def __call__(self, x, w):
        style = self.affine(w)
        if not self.demodulate:
            style = style * self.scale
        return dc.modulated_conv2d(x, self.weight, style, demodulate=self.demodulate, bias=self.bias)
