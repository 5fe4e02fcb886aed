"""Layers shared by the viewwise, pointwise, and fusion networks.

Modules hold parameters (trainable tensors) and buffers (serialized but not
optimized); `named_tensors` walks attributes in insertion order so weight
files have stable, human-readable entries.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    def parameters(self):
        return [t for _, t in self.named_tensors() if t.requires_grad]

    def named_tensors(self, prefix=""):
        out = []
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out.append((key, value))
            elif isinstance(value, Module):
                out.extend(value.named_tensors(prefix=f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_tensors(prefix=f"{key}.{i}."))
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_arrays(self):
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state_arrays(self, state):
        mine = dict(self.named_tensors())
        missing = set(mine) - set(state)
        extra = set(state) - set(mine)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, t in mine.items():
            arr = np.asarray(state[name], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
            t.data = arr.copy()


HE_GAIN = np.sqrt(2.0)
# branch-output layers start at half the He scale; without normalization
# layers this keeps activations O(1) through stacked bottleneck blocks
PROJECT_GAIN = np.sqrt(2.0) / 2.0


def _init(rng, shape, fan_in, gain=HE_GAIN):
    return Tensor(rng.normal(0.0, gain / np.sqrt(fan_in), size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, gain=HE_GAIN):
        self.weight = _init(rng, (in_features, out_features), in_features, gain)
        self.bias = _zeros(out_features)

    def __call__(self, x):
        # x: (in,) or (n, in)
        if x.data.ndim == 1:
            y = ad.matmul(ad.reshape(x, (1, -1)), self.weight)
            return ad.reshape(y, (-1,)) + self.bias
        return ad.matmul(x, self.weight) + self.bias


class MLP(Module):
    """Linear stack with silu between layers, linear output."""

    def __init__(self, dims, rng):
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = ad.silu(x)
        return x


class Conv1d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0,
                 gain=HE_GAIN):
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size
        self.weight = _init(rng, (out_channels, in_channels, kernel_size), fan_in, gain)
        self.bias = _zeros((out_channels, 1))

    def __call__(self, x):
        return ad.conv1d(x, self.weight, self.stride, self.padding) + self.bias


class DepthwiseConv1d(Module):
    def __init__(self, channels, kernel_size, rng, stride=1, padding=0, gain=HE_GAIN):
        self.stride = stride
        self.padding = padding
        self.weight = _init(rng, (channels, kernel_size), kernel_size, gain)
        self.bias = _zeros((channels, 1))

    def __call__(self, x):
        return ad.depthwise_conv1d(x, self.weight, self.stride, self.padding) + self.bias


class Conv3d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=0,
                 gain=HE_GAIN):
        self.stride = stride
        self.padding = padding
        k = (kernel_size,) * 3 if np.isscalar(kernel_size) else tuple(kernel_size)
        fan_in = in_channels * k[0] * k[1] * k[2]
        self.weight = _init(rng, (out_channels, in_channels) + k, fan_in, gain)
        self.bias = _zeros((out_channels, 1, 1, 1))

    def __call__(self, x):
        y = ad.conv3d(x, self.weight, self.stride, self.padding)
        bias = self.bias if x.data.ndim == 4 else ad.reshape(self.bias, (1, -1, 1, 1, 1))
        return y + bias


class SqueezeExcite(Module):
    """Channel gating over a C x L tensor.

    The effective scale is 2 * sigmoid(logits), so zero logits leave the
    input unchanged; the gate layer is zero-initialized to start there.
    """

    def __init__(self, channels, reduction, rng):
        hidden = max(1, channels // reduction)
        self.squeeze = Linear(channels, hidden, rng)
        self.gate = Linear(hidden, channels, rng)
        self.gate.weight = _zeros(self.gate.weight.shape)

    def gates(self, x):
        pooled = ad.mean(x, axis=1)  # (C,)
        return ad.sigmoid(self.gate(ad.silu(self.squeeze(pooled))))

    def __call__(self, x):
        g = self.gates(x)
        return x * ad.reshape(2.0 * g, (-1, 1))


class FusedMBConv1d(Module):
    """Inverted bottleneck with a full (non-depthwise) expansion conv."""

    def __init__(self, in_channels, out_channels, rng, expansion=4, kernel_size=3):
        mid = in_channels * expansion
        self.expand = Conv1d(in_channels, mid, kernel_size, rng, padding=kernel_size // 2)
        self.project = Conv1d(mid, out_channels, 1, rng, gain=PROJECT_GAIN)
        self.residual = in_channels == out_channels

    def __call__(self, x):
        y = self.project(ad.silu(self.expand(x)))
        return x + y if self.residual else y


class MBConv1d(Module):
    """Inverted bottleneck: 1x expand, depthwise conv, SE gate, 1x project."""

    def __init__(self, in_channels, out_channels, rng, expansion=4, kernel_size=3, se_reduction=4):
        mid = in_channels * expansion
        self.expand = Conv1d(in_channels, mid, 1, rng)
        self.depthwise = DepthwiseConv1d(mid, kernel_size, rng, padding=kernel_size // 2)
        self.se = SqueezeExcite(mid, se_reduction, rng)
        self.project = Conv1d(mid, out_channels, 1, rng, gain=PROJECT_GAIN)
        self.residual = in_channels == out_channels

    def __call__(self, x):
        y = ad.silu(self.expand(x))
        y = ad.silu(self.depthwise(y))
        y = self.se(y)
        y = self.project(y)
        return x + y if self.residual else y
