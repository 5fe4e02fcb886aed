"""Learned pointwise features: per-point distillation and inter-point pooling.

Each point's (2, b, L, 3) gradient tensor is distilled by four 3-D
convolutions (RGB as channels, one stride-2 along the resampled position
axis) and a linear head. Point embeddings, concatenated with their
scene-normalized coordinates, pass through a shared per-point layer and a
channelwise max over points, which makes the scene feature exactly
permutation- and duplication-invariant.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


def normalize_xyz(xyz: np.ndarray) -> np.ndarray:
    """Center and scale point coordinates into [-1, 1]^3 per axis."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    lo = xyz.min(axis=0)
    hi = xyz.max(axis=0)
    center = (lo + hi) / 2.0
    half = np.maximum((hi - lo) / 2.0, 1e-12)
    return (xyz - center) / half


class PointDistiller(nn.Module):
    """Four conv3d layers over (sweep, bin, position) plus a linear head."""

    def __init__(self, rng, bins, length, channels=(16, 32, 32, 32), embed=64):
        c1, c2, c3, c4 = channels
        self.bins = bins
        self.length = length
        self.embed = embed
        self.convs = [
            nn.Conv3d(3, c1, 3, rng, stride=1, padding=1),
            nn.Conv3d(c1, c2, 3, rng, stride=(1, 1, 2), padding=1),
            nn.Conv3d(c2, c3, 3, rng, stride=1, padding=1),
            nn.Conv3d(c3, c4, 3, rng, stride=1, padding=1, gain=nn.PROJECT_GAIN),
        ]
        self.flat_dim = c4 * 2 * bins * ((length + 1) // 2)
        self.head = nn.Linear(self.flat_dim, embed, rng)

    def _check(self, values):
        if values.shape[-3:] != (self.bins, self.length, 3) or values.shape[-4] != 2:
            raise ValueError(
                f"expected (..., 2, {self.bins}, {self.length}, 3) tensor, got {values.shape}"
            )

    def __call__(self, values: Tensor, mask: Tensor):
        """values: (2, b, L, 3), mask: (2, b) -> (embed,) vector."""
        self._check(values.data)
        masked = values * ad.reshape(mask, (2, -1, 1, 1))
        x = _to_channels_first(masked)
        for conv in self.convs:
            x = ad.silu(conv(x))
        return self.head(ad.reshape(x, (self.flat_dim,)))

    def batch(self, values: Tensor, masks: Tensor):
        """values: (n, 2, b, L, 3), masks: (n, 2, b) -> (n, embed) matrix."""
        self._check(values.data)
        n = values.data.shape[0]
        masked = values * ad.reshape(masks, (n, 2, -1, 1, 1))
        x = _to_channels_first(masked)
        for conv in self.convs:
            x = ad.silu(conv(x))
        return self.head(ad.reshape(x, (n, self.flat_dim)))


def _to_channels_first(values: Tensor) -> Tensor:
    """(..., 2, b, L, 3) -> (..., 3, 2, b, L) via slice + concat."""
    ndim = values.data.ndim
    axis = 1 if ndim == 5 else 0
    inner = values.data.shape[:-1]
    chans = []
    for c in range(3):
        idx = (slice(None),) * (ndim - 1) + (c,)
        sliced = _slice_tensor(values, idx)  # shape inner
        shape = inner[:axis] + (1,) + inner[axis:]
        chans.append(ad.reshape(sliced, shape))
    return ad.concat(chans, axis=axis)


def _slice_tensor(t: Tensor, idx) -> Tensor:
    """Differentiable basic slice (gradient scatters back into place)."""
    data = t.data[idx]
    out = ad.Tensor(data, requires_grad=t.requires_grad, op="slice",
                    parents=(t,) if t.requires_grad else ())

    def backward(g):
        if t.requires_grad:
            gx = np.zeros_like(t.data)
            gx[idx] = g
            t._accum_grad(gx)

    out._backward = backward
    return out


class PointAggregator(nn.Module):
    """PointNet-style set feature: shared layer, channel max, linear head."""

    def __init__(self, rng, point_embed=64, hidden=128, embed=64):
        self.shared = nn.Linear(point_embed + 3, hidden, rng)
        self.head = nn.Linear(hidden, embed, rng, gain=nn.PROJECT_GAIN)
        self.embed = embed

    def __call__(self, embeddings: Tensor, xyz: np.ndarray):
        """embeddings: (n, D_p); xyz: (n, 3) raw world coordinates."""
        if embeddings.data.ndim != 2 or embeddings.data.shape[0] < 1:
            raise ValueError("aggregation needs a non-empty (n, D_p) matrix")
        coords = Tensor(normalize_xyz(xyz).astype(np.float32))
        h = ad.silu(self.shared(ad.concat([embeddings, coords], axis=1)))
        pooled = ad.amax(h, axis=0)
        return self.head(pooled)


class PointwiseNet(nn.Module):
    """Distiller + aggregator over a scene's sampled points."""

    def __init__(self, rng, bins, length, conv_channels=(16, 32, 32, 32),
                 point_embed=64, hidden=128, embed=64):
        self.distiller = PointDistiller(
            rng, bins, length, channels=conv_channels, embed=point_embed
        )
        self.aggregator = PointAggregator(
            rng, point_embed=point_embed, hidden=hidden, embed=embed
        )
        self.embed = embed

    def __call__(self, values: Tensor, masks: Tensor, xyz: np.ndarray):
        """values: (n, 2, b, L, 3); masks: (n, 2, b); xyz: (n, 3)."""
        per_point = self.distiller.batch(values, masks)
        return self.aggregator(per_point, xyz)
