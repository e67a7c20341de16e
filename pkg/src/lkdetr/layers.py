"""Small parameterized building blocks on top of the autograd ops.

Module gives hierarchical parameter discovery (insertion-ordered, so
checkpoint layouts are stable); the layer classes mirror the usual conv /
linear / layernorm trio. Weights default to truncated-normal std 0.02 and
biases to zero, drawn from per-name RNG splits so initialization does not
depend on construction order.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def trunc_normal_param(shape, rng, std=0.02):
    return Tensor(rng.truncated_normal(shape, std=std), requires_grad=True,
                  dtype=ag.get_default_dtype())


def zeros_param(shape):
    return Tensor(np.zeros(shape), requires_grad=True,
                  dtype=ag.get_default_dtype())


def ones_param(shape):
    return Tensor(np.ones(shape), requires_grad=True,
                  dtype=ag.get_default_dtype())


class Module:
    """Base with recursive (name, Tensor) discovery over attributes/lists."""

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            name = f"{prefix}.{key}" if prefix else key
            yield from _walk(name, val)

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def _walk(name, val):
    if isinstance(val, Tensor):
        if val.requires_grad:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name)
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(f"{name}.{i}", item)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True, zero_init=False):
        if zero_init:
            self.weight = zeros_param((out_dim, in_dim))
        else:
            self.weight = trunc_normal_param((out_dim, in_dim), rng)
        self.bias = zeros_param((out_dim,)) if bias else None

    def __call__(self, x):
        out = ag.matmul(x, ag.transpose(self.weight))
        if self.bias is not None:
            out = ag.add(out, self.bias)
        return out


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0,
                 dilation=1, groups=1, bias=True):
        kh, kw = kernel if isinstance(kernel, (tuple, list)) else (kernel, kernel)
        self.weight = trunc_normal_param((out_ch, in_ch // groups, kh, kw), rng)
        self.bias = zeros_param((out_ch,)) if bias else None
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups

    def __call__(self, x):
        return ag.conv2d(x, self.weight, self.bias, stride=self.stride,
                         padding=self.padding, dilation=self.dilation,
                         groups=self.groups)


class LayerNorm(Module):
    """Affine layer norm over the last axis."""

    def __init__(self, dim, eps=1e-6):
        self.gamma = ones_param((dim,))
        self.beta = zeros_param((dim,))
        self.eps = eps

    def __call__(self, x):
        return ag.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class LayerNorm2d(Module):
    """Layer norm over the channel axis of [C,H,W] maps."""

    def __init__(self, channels, eps=1e-6):
        self.gamma = ones_param((channels,))
        self.beta = zeros_param((channels,))
        self.eps = eps

    def __call__(self, x):
        h = ag.transpose(x, (1, 2, 0))
        h = ag.layer_norm(h, self.gamma, self.beta, eps=self.eps)
        return ag.transpose(h, (2, 0, 1))


class Mlp(Module):
    """GELU MLP over the last axis; dims = [in, hidden..., out]."""

    def __init__(self, dims, rng):
        self.linears = [Linear(dims[i], dims[i + 1], rng.split(f"lin{i}"))
                        for i in range(len(dims) - 1)]

    def __call__(self, x):
        for i, lin in enumerate(self.linears):
            x = lin(x)
            if i + 1 < len(self.linears):
                x = ag.gelu(x)
        return x
