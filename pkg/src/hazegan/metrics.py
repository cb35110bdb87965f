"""PSNR / SSIM scoring and dataset-level aggregation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03
DATA_RANGE = 1.0


def _check(reference: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(reference, dtype=np.float64), np.asarray(test, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(reference: np.ndarray, test: np.ndarray) -> float:
    """10 log10(1 / MSE) in dB; identical images give ``inf``."""
    a, b = _check(reference, test)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(DATA_RANGE**2 / mse)


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation, keeping only positions where the window fits
    k = g.size
    rows = sliding_window_view(x, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-position SSIM of two single-channel images (valid windows only)."""
    g = gaussian_window()
    c1, c2 = (K1 * DATA_RANGE) ** 2, (K2 * DATA_RANGE) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(reference: np.ndarray, test: np.ndarray) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    a, b = _check(reference, test)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < WINDOW:
        raise ValueError(f"image {a.shape[:2]} smaller than the {WINDOW}x{WINDOW} SSIM window")
    return float(np.mean([ssim_map(a[..., c], b[..., c]).mean() for c in range(a.shape[2])]))


@dataclass
class ImageScore:
    name: str
    psnr: float
    ssim: float
    baseline_psnr: float
    baseline_ssim: float


@dataclass
class MetricReport:
    scores: list[ImageScore] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.scores)

    def _mean(self, attr: str) -> float:
        if not self.scores:
            return math.nan
        return float(np.mean([getattr(s, attr) for s in self.scores]))

    @property
    def mean_psnr(self) -> float:
        return self._mean("psnr")

    @property
    def mean_ssim(self) -> float:
        return self._mean("ssim")

    @property
    def baseline_psnr(self) -> float:
        return self._mean("baseline_psnr")

    @property
    def baseline_ssim(self) -> float:
        return self._mean("baseline_ssim")

    def lines(self) -> list[str]:
        out = ["name\tpsnr\tssim\tidentity_psnr\tidentity_ssim"]
        for s in self.scores:
            out.append(f"{s.name}\t{s.psnr:.4f}\t{s.ssim:.4f}\t{s.baseline_psnr:.4f}\t{s.baseline_ssim:.4f}")
        out += [
            "",
            f"images: {self.count}",
            f"skipped: {len(self.skipped)}",
            f"mean psnr: {self.mean_psnr:.4f} dB (identity {self.baseline_psnr:.4f} dB)",
            f"mean ssim: {self.mean_ssim:.4f} (identity {self.baseline_ssim:.4f})",
        ]
        return out


def evaluate_dataset(manifest, dehazer: Callable[[np.ndarray, "object"], np.ndarray]) -> MetricReport:
    """Score ``dehazer(hazy, record)`` against the clean image for every pair.

    The identity dehazer (hazy image as-is) is scored alongside as a baseline.
    Unreadable pairs are skipped and counted.
    """
    from .io import ImageFormatError, load_image

    report = MetricReport()
    for rec in manifest:
        name = rec.hazy_path or rec.clean_path
        try:
            clean = load_image(manifest.resolve(rec.clean_path))
            hazy = load_image(manifest.resolve(rec.hazy_path)) if rec.hazy_path else clean
            if hazy.shape != clean.shape:
                raise ImageFormatError(f"size mismatch {hazy.shape} vs {clean.shape}")
            out = dehazer(hazy, rec)
        except (ImageFormatError, OSError, ValueError) as exc:
            log.warning("skipping %s: %s", name, exc)
            report.skipped.append((name, str(exc)))
            continue
        report.scores.append(ImageScore(name, psnr(clean, out), ssim(clean, out), psnr(clean, hazy), ssim(clean, hazy)))
    return report
