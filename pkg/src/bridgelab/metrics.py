"""Image-quality metrics and evaluation reports.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5) with C1 = 0.01^2,
C2 = 0.03^2 on a unit dynamic range. Artifact-reduction aggregates: ARR is
the mean per-case relative reduction (clamped below at zero so a single
worsened case cannot drag the mean negative), ARSR the fraction of cases
whose residual falls under the success threshold.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    _check_shapes(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2
    x = np.arange(size) - half
    g = np.exp(-(x**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


_SSIM_WINDOW = _gaussian_window()
_C1 = (0.01) ** 2
_C2 = (0.03) ** 2


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM on [0,1]-scaled images."""
    _check_shapes(a, b)
    if min(a.shape) < _SSIM_WINDOW.shape[0]:
        raise ValueError(f"image {a.shape} smaller than the {_SSIM_WINDOW.shape} window")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    k = _SSIM_WINDOW

    mu_a = convolve2d(a, k, mode="valid")
    mu_b = convolve2d(b, k, mode="valid")
    var_a = convolve2d(a * a, k, mode="valid") - mu_a**2
    var_b = convolve2d(b * b, k, mode="valid") - mu_b**2
    cov = convolve2d(a * b, k, mode="valid") - mu_a * mu_b

    num = (2 * mu_a * mu_b + _C1) * (2 * cov + _C2)
    den = (mu_a**2 + mu_b**2 + _C1) * (var_a + var_b + _C2)
    return float(np.mean(num / den))


def dice(a: np.ndarray, b: np.ndarray, threshold: float = 0.7) -> float:
    _check_shapes(a, b)
    ma = a > threshold
    mb = b > threshold
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((ma & mb).sum()) / total


def arr_arsr(
    cases: list[tuple[float, float]], success_tau: float = 0.02
) -> tuple[float, float]:
    """Artifact reduction rate and success rate over (before, after) scores."""
    if not cases:
        raise ValueError("no cases")
    for before, _ in cases:
        if before <= 0:
            raise ValueError(f"before-score must be > 0, got {before}")
    reductions = [min(max(1.0 - after / before, 0.0), 1.0) for before, after in cases]
    arr = 100.0 * float(np.mean(reductions))
    arsr = 100.0 * float(np.mean([after < success_tau for _, after in cases]))
    return arr, arsr


def subtraction_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_shapes(a, b)
    return a - b


@dataclass
class CaseMetrics:
    subject: str
    slice_id: int
    rmse: float
    ssim: float
    dice: float
    artifact_before: float = math.nan
    artifact_after: float = math.nan


@dataclass
class MetricsReport:
    rows: list[CaseMetrics] = field(default_factory=list)
    success_tau: float = 0.02

    def aggregates(self) -> dict:
        out: dict = {}
        for name in ("rmse", "ssim", "dice"):
            vals = [getattr(r, name) for r in self.rows]
            out[name] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
        pairs = [
            (r.artifact_before, r.artifact_after)
            for r in self.rows
            if not (math.isnan(r.artifact_before) or math.isnan(r.artifact_after))
        ]
        if pairs:
            arr, arsr = arr_arsr(pairs, self.success_tau)
            out["arr"] = arr
            out["arsr"] = arsr
        return out

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["subject", "slice", "rmse", "ssim", "dice", "artifact_before", "artifact_after"]
            )
            for r in self.rows:
                w.writerow(
                    [r.subject, r.slice_id, r.rmse, r.ssim, r.dice, r.artifact_before, r.artifact_after]
                )

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.aggregates(), indent=2))
