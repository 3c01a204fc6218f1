"""Minimal module system: named parameters, linear/conv/norm layers."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .rng import DRng
from .tensor import Tensor


class Module:
    """Holds parameters and submodules as attributes; names follow attribute paths."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
            elif isinstance(value, dict):
                for key in sorted(value):
                    item = value[key]
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{key}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{path}.{key}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for k, p in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data[...] = arr


def init_normal(rng: DRng, shape, std: float) -> Tensor:
    return T.parameter(rng.normal(tuple(shape)) * std)


class Linear(Module):
    """``y = x W^T + b`` over the last axis."""

    def __init__(self, d_in: int, d_out: int, rng: DRng, bias: bool = True, std: float | None = None):
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = init_normal(rng, (d_out, d_in), std)
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor, weight: Tensor | None = None) -> Tensor:
        w = self.weight if weight is None else weight
        y = T.matmul(x, T.transpose(w))
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: DRng, k: int = 3, stride: int = 1,
                 pad=None, bias: bool = True, zero: bool = False):
        std = 0.0 if zero else 1.0 / math.sqrt(c_in * k * k)
        self.weight = init_normal(rng, (c_out, c_in, k, k), std)
        self.bias = T.parameter(np.zeros(c_out)) if bias else None
        self.stride = stride
        if pad is None:
            # "same" for stride 1; exact halving of even extents for stride 2
            pad = k // 2 if stride == 1 else (k // 2, k // 2 - 1)
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        if channels % groups:
            raise ValueError(f"{channels} channels not divisible into {groups} groups")
        self.groups = groups
        self.eps = eps
        self.gamma = T.parameter(np.ones(channels))
        self.beta = T.parameter(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        g = T.reshape(x, (B, self.groups, -1))
        mu = T.mean(g, axis=2, keepdims=True)
        centered = g - mu
        var = T.mean(centered * centered, axis=2, keepdims=True)
        normed = T.reshape(centered / T.sqrt(var + self.eps), (B, C, H, W))
        return normed * T.reshape(self.gamma, (1, C, 1, 1)) + T.reshape(self.beta, (1, C, 1, 1))


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape ``len(t) x dim``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb
