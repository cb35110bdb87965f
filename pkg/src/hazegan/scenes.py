"""Procedural outdoor-like scenes with aligned depth, for desk-scale runs and demos."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .io import Manifest, Record, save_image, write_depth_png16


def make_scene(rng: np.random.Generator, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (image H x W x 3 in [0, 1], depth H x W in [0, 1]).

    Sky occupies the top band at maximum depth; the ground recedes towards
    the horizon; a few textured blocks stand on it at fixed depths.
    """
    yy, xx = np.mgrid[0:height, 0:width] / np.array([max(height - 1, 1), max(width - 1, 1)])[:, None, None]
    horizon = rng.uniform(0.2, 0.45)

    sky_top = rng.uniform([0.35, 0.5, 0.7], [0.6, 0.75, 1.0])
    sky = sky_top[None, None, :] * (1.0 - 0.25 * yy[..., None])
    ground_col = rng.uniform([0.15, 0.2, 0.05], [0.55, 0.5, 0.3])
    freq = rng.uniform(4, 10, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    texture = 0.5 + 0.25 * np.sin(2 * np.pi * freq[0] * xx + phase[0]) * np.sin(2 * np.pi * freq[1] * yy + phase[1])
    ground = ground_col[None, None, :] * (0.6 + 0.8 * texture[..., None])

    is_sky = yy < horizon
    image = np.where(is_sky[..., None], sky, ground)
    # ground depth falls from 1 at the horizon to ~0.1 at the bottom edge
    g = np.clip((yy - horizon) / max(1 - horizon, 1e-6), 0, 1)
    depth = np.where(is_sky, 1.0, 1.0 - 0.9 * g)

    for _ in range(rng.integers(2, 6)):
        base = rng.uniform(horizon + 0.1, 1.0)
        h = rng.uniform(0.15, 0.5)
        w = rng.uniform(0.1, 0.35)
        x0 = rng.uniform(0, 1 - w)
        mask = (yy <= base) & (yy >= base - h) & (xx >= x0) & (xx <= x0 + w)
        col = rng.uniform(0.05, 0.95, size=3)
        stripes = 0.75 + 0.25 * np.sign(np.sin(2 * np.pi * rng.uniform(3, 8) * (xx - x0) / w))
        image = np.where(mask[..., None], col[None, None, :] * stripes[..., None], image)
        depth = np.where(mask, 1.0 - 0.9 * np.clip((base - horizon) / max(1 - horizon, 1e-6), 0, 1), depth)

    image = np.clip(image + rng.normal(0, 0.01, size=image.shape), 0, 1)
    return image, depth


def write_scene_corpus(out_dir: str | os.PathLike, count: int, size: tuple[int, int] = (32, 32),
                       seed: int = 0) -> Path:
    """Write ``count`` scenes as PNG + 16-bit depth PNG and a corpus manifest; return the manifest path."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    m = Manifest(root=out_dir)
    for i in range(count):
        image, depth = make_scene(rng, *size)
        img_path = out_dir / "clean" / f"scene{i:05d}.png"
        depth_path = out_dir / "depth" / f"scene{i:05d}.png"
        save_image(image, img_path)
        write_depth_png16(depth, depth_path)
        m.append(Record(clean_path=m.relative(img_path), depth_path=m.relative(depth_path)))
    return m.write(out_dir / "corpus.jsonl")
