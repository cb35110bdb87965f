"""Atmospheric scattering: haze synthesis from depth and its analytic inverse.

Images are H x W x 3 float arrays in [0, 1]; depth maps are H x W and
non-negative. A hazy observation is a per-pixel blend of the scene radiance
and the atmospheric light, weighted by the transmission ``exp(-beta * depth)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

K_RANGE = (0.7, 1.0)
BETA_RANGE = (0.5, 1.5)
T_FLOOR = 0.05


@dataclass(frozen=True)
class HazeParams:
    """Achromatic atmospheric light ``[k, k, k]`` plus scattering coefficient."""

    k: float
    beta: float
    # per-channel override of the atmospheric light, for experiments
    rgb: tuple[float, float, float] | None = None

    @property
    def alpha(self) -> np.ndarray:
        return np.asarray(self.rgb if self.rgb is not None else (self.k,) * 3, dtype=np.float64)


@dataclass
class DepthMap:
    depth: np.ndarray
    normalized: bool = False
    # max of the raw field before normalization (0 for an all-zero map)
    source_scale: float = 1.0
    clamped: int = 0

    @classmethod
    def from_raw(cls, raw: np.ndarray, normalize: bool = True) -> "DepthMap":
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2:
            raise ValueError(f"depth map must be H x W, got shape {raw.shape}")
        bad = ~np.isfinite(raw) | (raw < 0)
        clamped = int(bad.sum())
        d = np.where(bad, 0.0, raw)
        scale = float(d.max()) if d.size else 0.0
        if normalize and scale > 0:
            d = d / scale
        return cls(d, normalized=normalize, source_scale=scale, clamped=clamped)


def _alpha_array(alpha) -> np.ndarray:
    if isinstance(alpha, HazeParams):
        return alpha.alpha
    a = np.asarray(alpha, dtype=np.float64)
    return np.full(3, float(a)) if a.ndim == 0 else a


def transmission_from_depth(depth, beta: float) -> np.ndarray:
    """exp(-beta * d), elementwise, in (0, 1]."""
    if not beta > 0:
        raise ValueError(f"scattering coefficient must be positive, got {beta}")
    d = depth.depth if isinstance(depth, DepthMap) else np.asarray(depth, dtype=np.float64)
    return np.exp(-beta * d)


def _check_pair(img: np.ndarray, t: np.ndarray) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must be H x W x 3, got shape {img.shape}")
    if t.shape != img.shape[:2]:
        raise ValueError(f"transmission shape {t.shape} does not match image {img.shape[:2]}")
    return t[..., None]


def compose_haze(clean: np.ndarray, t: np.ndarray, alpha) -> np.ndarray:
    """I = J t + alpha (1 - t), clipped to [0, 1]."""
    clean = np.asarray(clean, dtype=np.float64)
    t3 = _check_pair(clean, np.asarray(t, dtype=np.float64))
    a = _alpha_array(alpha)
    return np.clip(clean * t3 + a * (1.0 - t3), 0.0, 1.0)


def invert_haze(hazy: np.ndarray, t: np.ndarray, alpha, t_floor: float = T_FLOOR) -> np.ndarray:
    """J = (I - alpha) / max(t, t_floor) + alpha, clipped to [0, 1]."""
    if not t_floor > 0:
        raise ValueError("t_floor must be positive")
    hazy = np.asarray(hazy, dtype=np.float64)
    t3 = _check_pair(hazy, np.asarray(t, dtype=np.float64))
    a = _alpha_array(alpha)
    return np.clip((hazy - a) / np.maximum(t3, t_floor) + a, 0.0, 1.0)


def sample_haze_params(rng: np.random.Generator) -> HazeParams:
    k = rng.uniform(*K_RANGE)
    beta = rng.uniform(*BETA_RANGE)
    return HazeParams(float(k), float(beta))


def item_seed(master_seed: int, index: int) -> int:
    """Deterministic per-item seed, independent of processing order."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


@dataclass
class HazySample:
    index: int
    variant: int
    clean: np.ndarray
    hazy: np.ndarray
    params: HazeParams
    seed: int


def synthesize(corpus, variants_per_image: int, seed: int):
    """Yield ``variants_per_image`` hazy renderings per (image, depth) pair.

    Each corpus item draws its parameters from its own generator seeded by
    ``item_seed(seed, index)``, so results don't depend on iteration order.
    """
    if variants_per_image < 1:
        raise ValueError("variants_per_image must be >= 1")
    for index, (image, depth) in enumerate(corpus):
        s = item_seed(seed, index)
        rng = np.random.default_rng(s)
        dmap = depth if isinstance(depth, DepthMap) else DepthMap.from_raw(depth)
        for v in range(variants_per_image):
            params = sample_haze_params(rng)
            t = transmission_from_depth(dmap, params.beta)
            yield HazySample(index, v, image, compose_haze(image, t, params), params, s)
