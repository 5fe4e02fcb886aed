"""Per-view quality features and the inter-view extractor along the camera path.

Each view is summarized by 36 natural-scene-statistics features: a
generalized Gaussian fit (shape, variance) of the MSCN coefficients plus
asymmetric generalized Gaussian fits (shape, mean, left/right variance) of
the four neighboring-coefficient products, at two scales. The per-view
vectors, ordered along the camera trajectory, feed a 1-D stack of
(Fused-)MBConv blocks whose global max pool makes the output dimension
independent of the number of views.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import gamma as gamma_fn

from . import autodiff as ad
from . import nn

MSCN_C = 1.0 / 255.0
_GAUSS_SIGMA = 7.0 / 6.0
_GAUSS_TRUNCATE = 3.0 / _GAUSS_SIGMA  # 7x7 support

# moment-ratio lookup shared by both fits
_SHAPE_GRID = np.arange(0.2, 10.001, 0.001)
_GGD_RATIO = gamma_fn(1.0 / _SHAPE_GRID) * gamma_fn(3.0 / _SHAPE_GRID) / gamma_fn(
    2.0 / _SHAPE_GRID
) ** 2
_AGGD_RATIO = gamma_fn(2.0 / _SHAPE_GRID) ** 2 / (
    gamma_fn(1.0 / _SHAPE_GRID) * gamma_fn(3.0 / _SHAPE_GRID)
)

N_FEATURES = 36


def luminance(image: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an H x W x 3 image (pass-through when already 2-D)."""
    if image.ndim == 2:
        return image.astype(np.float64)
    return image[..., :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114])


def mscn(image: np.ndarray) -> np.ndarray:
    """Mean-subtracted contrast-normalized coefficients (7x7 Gaussian window)."""
    img = luminance(image)
    mu = gaussian_filter(img, _GAUSS_SIGMA, truncate=_GAUSS_TRUNCATE, mode="nearest")
    var = gaussian_filter(img * img, _GAUSS_SIGMA, truncate=_GAUSS_TRUNCATE, mode="nearest")
    sigma = np.sqrt(np.abs(var - mu * mu))
    return (img - mu) / (sigma + MSCN_C)


def fit_ggd(x: np.ndarray):
    """Moment-matching generalized Gaussian fit: (shape, variance).

    A degenerate (all-zero) input returns the Gaussian convention (2, 0).
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    var = np.mean(x * x)
    mean_abs = np.mean(np.abs(x))
    if var < 1e-24 or mean_abs < 1e-12:
        return 2.0, 0.0
    rho = var / (mean_abs * mean_abs)
    shape = _SHAPE_GRID[np.argmin(np.abs(_GGD_RATIO - rho))]
    return float(shape), float(var)


def fit_aggd(x: np.ndarray):
    """Asymmetric generalized Gaussian fit: (shape, mean, var_left, var_right)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    left = x[x < 0]
    right = x[x > 0]
    if left.size == 0 or right.size == 0 or np.mean(x * x) < 1e-24:
        return 2.0, 0.0, 0.0, 0.0
    sigma_l = np.sqrt(np.mean(left * left))
    sigma_r = np.sqrt(np.mean(right * right))
    gamma_hat = sigma_l / sigma_r
    rhat = np.mean(np.abs(x)) ** 2 / np.mean(x * x)
    rhat_norm = rhat * (gamma_hat**3 + 1) * (gamma_hat + 1) / (gamma_hat**2 + 1) ** 2
    shape = _SHAPE_GRID[np.argmin((_AGGD_RATIO - rhat_norm) ** 2)]
    const = np.sqrt(gamma_fn(1.0 / shape) / gamma_fn(3.0 / shape))
    mean = (sigma_r - sigma_l) * (gamma_fn(2.0 / shape) / gamma_fn(1.0 / shape)) * const
    return float(shape), float(mean), float(sigma_l**2), float(sigma_r**2)


def _halve(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    img = img[: h - h % 2, : w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


_SHIFTS = ((0, 1), (1, 0), (1, 1), (1, -1))  # horizontal, vertical, two diagonals


def nss_features(image: np.ndarray) -> np.ndarray:
    """36 natural-scene-statistics features of one view (18 per scale x 2)."""
    img = luminance(image)
    if img.shape[0] < 16 or img.shape[1] < 16:
        raise ValueError(f"image {img.shape} too small; need at least 16x16")
    features = []
    for _ in range(2):
        coeffs = mscn(img)
        shape, var = fit_ggd(coeffs)
        features.extend([shape, var])
        for dr, dc in _SHIFTS:
            rows = slice(dr, None)
            cols = slice(dc, None) if dc >= 0 else slice(None, dc)
            rows_s = slice(None, -dr) if dr else slice(None)
            cols_s = slice(None, -dc) if dc > 0 else (slice(-dc, None) if dc < 0 else slice(None))
            pair = coeffs[rows, cols] * coeffs[rows_s, cols_s]
            features.extend(fit_aggd(pair))
        img = _halve(img)
    out = np.asarray(features, dtype=np.float64)
    if out.shape != (N_FEATURES,) or not np.all(np.isfinite(out)):
        raise FloatingPointError("NSS feature vector is malformed")
    return out


def view_sequence_features(views) -> np.ndarray:
    """(36, L) feature matrix of a view sequence ordered by path_index."""
    ordered = sorted(views, key=lambda v: v.path_index)
    return np.stack([nss_features(v.image) for v in ordered], axis=1)


class ViewwiseNet(nn.Module):
    """Path-direction feature extractor with a length-independent output.

    Two Fused-MBConv pairs with a stride-2 max pool after each, two MBConv
    blocks, a global max pool over the path, and a linear head.
    """

    def __init__(self, rng, in_features=N_FEATURES, channels=(64, 128, 128),
                 embed=64, expansion=4, se_reduction=4):
        c1, c2, c3 = channels
        self.in_features = in_features
        self.embed = embed
        self.fused = [
            nn.FusedMBConv1d(in_features, c1, rng, expansion=expansion),
            nn.FusedMBConv1d(c1, c1, rng, expansion=expansion),
            nn.FusedMBConv1d(c1, c2, rng, expansion=expansion),
            nn.FusedMBConv1d(c2, c2, rng, expansion=expansion),
        ]
        self.mbconv = [
            nn.MBConv1d(c2, c3, rng, expansion=expansion, se_reduction=se_reduction),
            nn.MBConv1d(c3, c3, rng, expansion=expansion, se_reduction=se_reduction),
        ]
        self.head = nn.Linear(c3, embed, rng)

    def __call__(self, feats):
        """feats: (F, L) tensor of per-view features -> (embed,) vector."""
        if feats.data.ndim != 2 or feats.data.shape[0] != self.in_features:
            raise ValueError(
                f"expected ({self.in_features}, L) input, got {feats.data.shape}"
            )
        x = feats
        x = self.fused[1](self.fused[0](x))
        x = ad.max_pool1d(x, window=2)
        x = self.fused[3](self.fused[2](x))
        x = ad.max_pool1d(x, window=2)
        x = self.mbconv[1](self.mbconv[0](x))
        x = ad.max_pool_global(x)
        return self.head(x)
