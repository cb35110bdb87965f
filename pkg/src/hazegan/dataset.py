"""Building hazy training sets on disk and assembling training batches."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import ImageFormatError, Manifest, Record, load_depth, load_image, safe_stem, save_image
from .physics import compose_haze, item_seed, sample_haze_params, transmission_from_depth

log = logging.getLogger(__name__)


@dataclass
class SynthResult:
    manifest: Manifest
    path: Path
    skipped: list[tuple[str, str]]


def _render_item(index: int, rec: Record, corpus: Manifest, out_dir: Path, variants: int, seed: int):
    clean_path = corpus.resolve(rec.clean_path)
    if rec.depth_path is None:
        return index, None, "no depth map"
    try:
        image = load_image(clean_path)
        depth = load_depth(corpus.resolve(rec.depth_path))
    except (ImageFormatError, OSError) as exc:
        return index, None, str(exc)
    if depth.depth.shape != image.shape[:2]:
        return index, None, f"depth {depth.depth.shape} misaligned with image {image.shape[:2]}"
    s = item_seed(seed, index)
    rng = np.random.default_rng(s)
    rows = []
    for v in range(variants):
        params = sample_haze_params(rng)
        hazy = compose_haze(image, transmission_from_depth(depth, params.beta), params)
        hazy_path = out_dir / "hazy" / f"{index:05d}_{safe_stem(clean_path)}_v{v}.png"
        save_image(hazy, hazy_path)
        rows.append((clean_path, hazy_path, corpus.resolve(rec.depth_path), params, s))
    return index, rows, None


def synthesize_dataset(corpus: Manifest | str | os.PathLike, out_dir: str | os.PathLike, variants: int,
                       seed: int, workers: int = 1) -> SynthResult:
    """Render ``variants`` hazy images per corpus item and write ``out_dir/manifest.jsonl``.

    Corpus records need ``clean_path`` and ``depth_path``. Items that cannot
    be read or whose depth doesn't match the image are skipped and logged.
    """
    if variants < 1:
        raise ValueError("variants must be >= 1")
    if not isinstance(corpus, Manifest):
        corpus = Manifest.read(corpus)
    if not len(corpus):
        raise ValueError("corpus is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = Manifest(root=out_dir)
    skipped: list[tuple[str, str]] = []

    def job(i):
        return _render_item(i, corpus[i], corpus, out_dir, variants, seed)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for index, rows, reason in pool.map(job, range(len(corpus))):
            if rows is None:
                log.warning("skipping corpus item %d (%s): %s", index, corpus[index].clean_path, reason)
                skipped.append((corpus[index].clean_path, reason))
                continue
            for clean_path, hazy_path, depth_path, params, s in rows:
                out.append(Record(
                    clean_path=out.relative(clean_path), hazy_path=out.relative(hazy_path),
                    depth_path=out.relative(depth_path), k=params.k, beta=params.beta, seed=s,
                ))
    path = out.write(out_dir / "manifest.jsonl")
    return SynthResult(out, path, skipped)


# ---------------------------------------------------------------- batches


def to_network(image: np.ndarray) -> np.ndarray:
    """H x W x 3 in [0, 1] -> 3 x H x W in [-1, 1]."""
    return np.transpose(image, (2, 0, 1)) * 2.0 - 1.0


def from_network(x: np.ndarray) -> np.ndarray:
    """3 x H x W in [-1, 1] -> H x W x 3 in [0, 1]."""
    return np.clip((np.transpose(x, (1, 2, 0)) + 1.0) / 2.0, 0.0, 1.0)


@dataclass
class PairSet:
    """Decoded (hazy, clean) pairs held in memory, network range, CHW."""

    hazy: list[np.ndarray]
    clean: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.hazy)

    @classmethod
    def from_manifest(cls, manifest: Manifest) -> "PairSet":
        hazy, clean = [], []
        for rec in manifest:
            if rec.hazy_path is None:
                raise ValueError(f"record {rec.clean_path} has no hazy image")
            h, c = load_image(manifest.resolve(rec.hazy_path)), load_image(manifest.resolve(rec.clean_path))
            if h.shape != c.shape:
                raise ValueError(f"hazy/clean size mismatch for {rec.hazy_path}")
            hazy.append(to_network(h))
            clean.append(to_network(c))
        return cls(hazy, clean)

    def batches(self, batch_size: int, rng: np.random.Generator, crop: int | None = None):
        """One shuffled pass; a short final batch is dropped when more than one batch fits."""
        order = rng.permutation(len(self))
        n_full = len(self) // batch_size
        if n_full == 0:
            groups = [order]
        else:
            groups = [order[i * batch_size:(i + 1) * batch_size] for i in range(n_full)]
        for idx in groups:
            hz, cl = [], []
            for i in idx:
                h, c = self.hazy[i], self.clean[i]
                if crop is not None and (h.shape[1] > crop or h.shape[2] > crop):
                    y = rng.integers(0, h.shape[1] - crop + 1) if h.shape[1] > crop else 0
                    x = rng.integers(0, h.shape[2] - crop + 1) if h.shape[2] > crop else 0
                    h, c = h[:, y:y + crop, x:x + crop], c[:, y:y + crop, x:x + crop]
                hz.append(h)
                cl.append(c)
            if len({a.shape for a in hz}) > 1:
                raise ValueError("images in a batch differ in size; set a crop size")
            yield np.stack(hz), np.stack(cl)
