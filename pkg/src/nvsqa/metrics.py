"""Evaluation measures for predicted vs. ground-truth quality scores.

RMSE, Spearman rank correlation (average ranks for ties), Pearson linear
correlation, and the outlier ratio by Tukey's fences on the residuals
(type-7 linear-interpolation quartiles, strict exceedance). PSNR is included
as a sanity baseline for harness plumbing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EvalReport:
    rmse: float
    srcc: float
    plcc: float
    outlier_ratio: float
    n: int

    def __post_init__(self):
        if self.rmse < 0 or not -1 <= self.srcc <= 1 or not -1 <= self.plcc <= 1:
            raise ValueError("report values out of range")
        if not 0 <= self.outlier_ratio <= 1 or self.n < 2:
            raise ValueError("report values out of range")

    def to_json(self) -> str:
        return json.dumps(
            {
                "rmse": self.rmse,
                "srcc": self.srcc,
                "plcc": self.plcc,
                "outlier_ratio": self.outlier_ratio,
                "n": self.n,
            },
            indent=2,
        )

    def to_table(self) -> str:
        rows = [
            ("RMSE", f"{self.rmse:.6f}"),
            ("SRCC", f"{self.srcc:.6f}"),
            ("PLCC", f"{self.plcc:.6f}"),
            ("OR", f"{self.outlier_ratio:.6f}"),
            ("n", str(self.n)),
        ]
        width = max(len(v) for _, v in rows)
        return "\n".join(f"{name:<6}{value:>{width}}" for name, value in rows)


def _paired(pred, truth):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.size != truth.size:
        raise ValueError(f"length mismatch: {pred.size} vs {truth.size}")
    if pred.size == 0:
        raise ValueError("empty input")
    return pred, truth


def rmse(pred, truth) -> float:
    pred, truth = _paired(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def average_ranks(x) -> np.ndarray:
    """1-based ranks, ties averaged."""
    x = np.asarray(x, dtype=np.float64).ravel()
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def plcc(pred, truth) -> float:
    pred, truth = _paired(pred, truth)
    if pred.size < 2:
        raise ValueError("correlation needs at least 2 samples")
    dp = pred - pred.mean()
    dt = truth - truth.mean()
    vp = np.dot(dp, dp)
    vt = np.dot(dt, dt)
    if vp == 0 or vt == 0:
        raise ValueError("correlation undefined for constant input")
    return float(np.dot(dp, dt) / math.sqrt(vp * vt))


def srcc(pred, truth) -> float:
    pred, truth = _paired(pred, truth)
    if pred.size < 2:
        raise ValueError("correlation needs at least 2 samples")
    return plcc(average_ranks(pred), average_ranks(truth))


def tukey_fences(values, k: float = 1.5):
    """(lower, upper) fences with type-7 (linear interpolation) quartiles."""
    values = np.asarray(values, dtype=np.float64)
    q1, q3 = np.percentile(values, [25.0, 75.0], method="linear")
    iqr = q3 - q1
    return q1 - k * iqr, q3 + k * iqr


def outlier_ratio(pred, truth) -> float:
    """Fraction of residuals strictly outside Tukey's fences."""
    pred, truth = _paired(pred, truth)
    if pred.size < 4:
        raise ValueError("outlier ratio needs at least 4 samples")
    residuals = pred - truth
    lo, hi = tukey_fences(residuals)
    return float(np.mean((residuals < lo) | (residuals > hi)))


def evaluate(pred, truth) -> EvalReport:
    pred, truth = _paired(pred, truth)
    return EvalReport(
        rmse=rmse(pred, truth),
        srcc=srcc(pred, truth),
        plcc=plcc(pred, truth),
        outlier_ratio=outlier_ratio(pred, truth),
        n=int(pred.size),
    )


def psnr(img_a, img_b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical images return +inf."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * math.log10(peak * peak / mse))
