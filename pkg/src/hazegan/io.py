"""Image and depth codecs plus the line-delimited dataset manifest."""

from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image

from .physics import DepthMap

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "hazegan.manifest"
MANIFEST_VERSION = 1


class ImageFormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


def load_image(path: str | os.PathLike) -> np.ndarray:
    """8-bit PNG -> H x W x 3 float64 in [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ImageFormatError(f"{path}: unsupported format {im.format}; only PNG is accepted")
            if im.mode not in ("RGB", "RGBA", "L", "P", "LA"):
                raise ImageFormatError(f"{path}: unsupported PNG mode {im.mode}; expected 8-bit RGB")
            im.load()
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: cannot decode image ({exc})") from exc
    return arr / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    # rint rounds half to even
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(image: np.ndarray, path: str | os.PathLike) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got {image.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------- depth


def read_pfm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ImageFormatError(f"{path}: not a PFM file")
        if header == b"PF":
            raise ImageFormatError(f"{path}: colour PFM given where a single-channel depth map is expected")
        dims = fh.readline().split()
        scale = float(fh.readline().strip())
        w, h = int(dims[0]), int(dims[1])
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != w * h:
        raise ImageFormatError(f"{path}: truncated PFM ({data.size} of {w * h} values)")
    # PFM stores rows bottom to top
    return data.reshape(h, w)[::-1].astype(np.float64)


def write_pfm(depth: np.ndarray, path: str | os.PathLike) -> None:
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(depth[::-1]).tobytes())


def write_depth_png16(depth: np.ndarray, path: str | os.PathLike) -> None:
    """Store a [0, 1] field as 16-bit grayscale, 1.0 -> 65535."""
    q = np.rint(np.clip(depth, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path, format="PNG")


def load_depth(path: str | os.PathLike, normalize: bool = True) -> DepthMap:
    """PFM or 16-bit grayscale PNG -> normalized :class:`DepthMap`."""
    p = Path(path)
    if p.suffix.lower() == ".pfm":
        raw = read_pfm(p)
    else:
        try:
            with Image.open(p) as im:
                if im.format != "PNG" or im.mode not in ("I;16", "I;16B", "I;16L", "I"):
                    raise ImageFormatError(f"{p}: depth must be PFM or 16-bit grayscale PNG (got {im.format} {im.mode})")
                im.load()
                raw = np.asarray(im, dtype=np.float64) / 65535.0
        except (OSError, SyntaxError) as exc:
            raise ImageFormatError(f"{p}: cannot decode depth map ({exc})") from exc
    dmap = DepthMap.from_raw(raw, normalize=normalize)
    if dmap.clamped:
        log.warning("%s: clamped %d negative or non-finite depth values to 0", p, dmap.clamped)
    return dmap


# ---------------------------------------------------------------- manifest


@dataclass
class Record:
    clean_path: str
    hazy_path: str | None = None
    depth_path: str | None = None
    k: float | None = None
    beta: float | None = None
    seed: int | None = None


class Manifest:
    """Ordered records; paths are stored relative to the manifest's directory."""

    def __init__(self, records: Iterable[Record] = (), root: str | os.PathLike = "."):
        self.root = Path(root)
        self.records: list[Record] = []
        self._keys: set[tuple[str, str | None]] = set()
        for r in records:
            self.append(r)

    def append(self, record: Record) -> None:
        key = (record.clean_path, record.hazy_path)
        if key in self._keys:
            raise ManifestError(f"duplicate manifest record {key}")
        self._keys.add(key)
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def resolve(self, rel: str | None) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def relative(self, path: str | os.PathLike) -> str:
        return Path(os.path.relpath(Path(path).resolve(), self.root.resolve())).as_posix()

    def subset(self, indices: Iterable[int]) -> "Manifest":
        return Manifest((self.records[i] for i in indices), self.root)

    def dumps(self) -> str:
        lines = [json.dumps({"schema": MANIFEST_SCHEMA, "version": MANIFEST_VERSION})]
        for r in self.records:
            lines.append(json.dumps({k: v for k, v in asdict(r).items() if v is not None}))
        return "\n".join(lines) + "\n"

    def write(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.parent.resolve() != self.root.resolve():
            # rebase so relative paths stay valid from the new location
            moved = Manifest(root=path.parent)
            for r in self.records:
                moved.append(Record(**{
                    **asdict(r),
                    **{f: moved.relative(self.resolve(getattr(r, f))) for f in ("clean_path", "hazy_path", "depth_path") if getattr(r, f)},
                }))
            return moved.write(path)
        path.write_text(self.dumps())
        return path

    @classmethod
    def read(cls, path: str | os.PathLike) -> "Manifest":
        path = Path(path)
        try:
            lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        except OSError as exc:
            raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
        if not lines:
            raise ManifestError(f"{path}: empty manifest")
        try:
            header = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: bad header line") from exc
        if header.get("schema") != MANIFEST_SCHEMA:
            raise ManifestError(f"{path}: not a dataset manifest")
        if header.get("version") != MANIFEST_VERSION:
            raise ManifestError(f"{path}: unsupported manifest version {header.get('version')}")
        names = {f.name for f in fields(Record)}
        m = cls(root=path.parent)
        for n, line in enumerate(lines[1:], start=2):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{n}: malformed record") from exc
            unknown = set(obj) - names
            if unknown or "clean_path" not in obj:
                raise ManifestError(f"{path}:{n}: bad record fields {sorted(unknown) or 'missing clean_path'}")
            m.append(Record(**obj))
        return m


def safe_stem(path: str | os.PathLike) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", Path(path).stem)
