"""Manifest ingestion, image preprocessing and seeded batch streams.

A manifest is a UTF-8 CSV with the columns ``image_path``, ``arousal`` and
``valence``; keypoints travel along as optional ``kp_<name>_x`` /
``kp_<name>_y`` column pairs. Relative image paths resolve against the
manifest's directory.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DecodeError, EmptyDatasetError, LabelRangeError, SchemaError

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("image_path", "arousal", "valence")
SPLITS = ("train", "validation")
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
CACHE_ENV = "FACECHANNEL_CACHE"

_KP_COLUMN = re.compile(r"^kp_(?P<name>.+)_(?P<axis>[xy])$")

Point = tuple[float, float]


@dataclass(frozen=True)
class Sample:
    image_path: Path
    arousal: float
    valence: float
    keypoints: Mapping[str, Point] | None = None

    def __post_init__(self):
        for name in ("arousal", "valence"):
            value = getattr(self, name)
            if not (math.isfinite(value) and -1.0 <= value <= 1.0):
                raise LabelRangeError(f"{name}={value} outside [-1, 1] for {self.image_path}")
        if self.keypoints is not None:
            for kp_name, (x, y) in self.keypoints.items():
                if not (math.isfinite(x) and math.isfinite(y)) or x < 0 or y < 0:
                    raise ValueError(f"keypoint {kp_name}=({x}, {y}) must be finite and non-negative")


@dataclass(frozen=True)
class DatasetManifest:
    samples: tuple[Sample, ...]
    split_tag: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.split_tag not in SPLITS:
            raise ValueError(f"split_tag must be one of {SPLITS}, got {self.split_tag!r}")
        seen = set()
        for s in self.samples:
            key = str(s.image_path)
            if key in seen:
                raise ValueError(f"duplicate image_path in manifest: {key}")
            seen.add(key)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def arousal(self) -> np.ndarray:
        return np.array([s.arousal for s in self.samples], dtype=np.float64)

    @property
    def valence(self) -> np.ndarray:
        return np.array([s.valence for s in self.samples], dtype=np.float64)


@dataclass(frozen=True)
class PreprocessConfig:
    size: int = 96
    channels: int = 1

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("target size must be positive")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")


def _parse_label(raw: str, column: str, row: int) -> float:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise LabelRangeError(f"row {row}: {column}={raw!r} is not a number") from None
    if not (math.isfinite(value) and -1.0 <= value <= 1.0):
        raise LabelRangeError(f"row {row}: {column}={value} outside [-1, 1]")
    return value


def parse_manifest(path: str | os.PathLike, split_tag: str = "train") -> DatasetManifest:
    """Read a manifest CSV. Rows are kept in file order; row numbers in
    errors are 1-based data rows (header excluded)."""
    path = Path(path)
    root = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise SchemaError(f"{path}: missing header row")
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise SchemaError(f"{path}: missing required column '{col}'")

        kp_names: dict[str, set[str]] = {}
        for col in header:
            m = _KP_COLUMN.match(col)
            if m:
                kp_names.setdefault(m["name"], set()).add(m["axis"])
        for name, axes in kp_names.items():
            if axes != {"x", "y"}:
                missing = ({"x", "y"} - axes).pop()
                raise SchemaError(f"{path}: missing column 'kp_{name}_{missing}'")

        samples = []
        for row_no, row in enumerate(reader, start=1):
            image_path = Path(row["image_path"])
            if not image_path.is_absolute():
                image_path = root / image_path
            keypoints = {}
            for name in kp_names:
                xs, ys = row[f"kp_{name}_x"], row[f"kp_{name}_y"]
                if xs in ("", None) or ys in ("", None):
                    continue
                keypoints[name] = (float(xs), float(ys))
            try:
                samples.append(
                    Sample(
                        image_path=image_path,
                        arousal=_parse_label(row["arousal"], "arousal", row_no),
                        valence=_parse_label(row["valence"], "valence", row_no),
                        keypoints=keypoints or None,
                    )
                )
            except ValueError as exc:
                if isinstance(exc, LabelRangeError):
                    raise
                raise ValueError(f"row {row_no}: {exc}") from None
    return DatasetManifest(tuple(samples), split_tag)


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike, relative: bool = True) -> Path:
    """Serialize a manifest so that :func:`parse_manifest` reproduces it.

    Labels are written with ``repr`` so floats round-trip exactly.
    """
    path = Path(path)
    root = path.parent.resolve()
    kp_names: list[str] = []
    for s in manifest:
        for name in s.keypoints or {}:
            if name not in kp_names:
                kp_names.append(name)
    header = list(REQUIRED_COLUMNS)
    for name in kp_names:
        header += [f"kp_{name}_x", f"kp_{name}_y"]

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in manifest:
            image_path = Path(s.image_path)
            if relative:
                try:
                    image_path = image_path.resolve().relative_to(root)
                except ValueError:
                    pass
            row = [image_path.as_posix(), repr(float(s.arousal)), repr(float(s.valence))]
            for name in kp_names:
                pt = (s.keypoints or {}).get(name)
                row += [repr(float(pt[0])), repr(float(pt[1]))] if pt else ["", ""]
            writer.writerow(row)
    return path


def load_keypoint_sidecar(path: str | os.PathLike) -> dict[str, dict[str, Point]]:
    """Read keypoint sidecar JSON: one object or a list of
    ``{"image": path, "points": {name: [x, y]}}`` entries. Keys of the
    returned map are the ``image`` strings as written."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = [data]
    out = {}
    for entry in data:
        if "image" not in entry or "points" not in entry:
            raise SchemaError(f"{path}: sidecar entries need 'image' and 'points'")
        out[str(entry["image"])] = {k: (float(v[0]), float(v[1])) for k, v in entry["points"].items()}
    return out


def preprocess_array(data: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """Bring an H x W x C array in [0, 1] to the configured size and channel
    count as float32. Conforming float32 arrays pass through untouched."""
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[:, :, None]
    if (
        data.dtype == np.float32
        and data.shape == (config.size, config.size, config.channels)
    ):
        return data
    data = data.astype(np.float64)
    if data.shape[2] == 3 and config.channels == 1:
        r, g, b = LUMA_WEIGHTS
        data = r * data[:, :, 0:1] + g * data[:, :, 1:2] + b * data[:, :, 2:3]
    elif data.shape[2] == 1 and config.channels == 3:
        data = np.repeat(data, 3, axis=2)
    if data.shape[:2] != (config.size, config.size):
        t = torch.from_numpy(np.ascontiguousarray(data.transpose(2, 0, 1)))[None]
        t = F.interpolate(t, size=(config.size, config.size), mode="bilinear", align_corners=False, antialias=True)
        data = t[0].numpy().transpose(1, 2, 0)
    return np.clip(data, 0.0, 1.0).astype(np.float32)


def decode_image(path: str | os.PathLike) -> np.ndarray:
    """Decode to an H x W x 3 float64 array in [0, 1] (or H x W x 1 for
    single-band images)."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "I;16", "I", "F"):
                arr = np.asarray(im, dtype=np.float64)
                scale = 65535.0 if im.mode in ("I;16", "I") else (1.0 if im.mode == "F" else 255.0)
                return (arr / scale)[:, :, None]
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DecodeError(path, str(exc)) from None
    return arr / 255.0


def _cache_path(sample: Sample, config: PreprocessConfig) -> Path | None:
    cache_dir = os.environ.get(CACHE_ENV)
    if not cache_dir:
        return None
    p = Path(sample.image_path)
    try:
        st = p.stat()
    except OSError:
        return None
    key = f"{p.resolve()}|{st.st_mtime_ns}|{st.st_size}|{config.size}|{config.channels}"
    return Path(cache_dir) / (hashlib.sha256(key.encode()).hexdigest() + ".npy")


def load_image(sample: Sample | str | os.PathLike, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Decode and preprocess one image to an H x W x C tensor in [0, 1].

    Honours the ``FACECHANNEL_CACHE`` directory when set.
    """
    if not isinstance(sample, Sample):
        sample = Sample(Path(sample), 0.0, 0.0)
    cached = _cache_path(sample, config)
    if cached is not None and cached.exists():
        return np.load(cached)
    data = preprocess_array(decode_image(sample.image_path), config)
    if cached is not None:
        cached.parent.mkdir(parents=True, exist_ok=True)
        tmp = cached.with_suffix(f".{os.getpid()}.tmp.npy")
        np.save(tmp, data)
        os.replace(tmp, cached)
    return data


@dataclass
class LoadedDataset:
    """Decoded images (N x C x H x W float32) with their label vectors."""

    images: torch.Tensor
    arousal: torch.Tensor
    valence: torch.Tensor
    name: str = ""
    manifest: DatasetManifest | None = field(default=None, repr=False)

    def __len__(self):
        return self.images.shape[0]


def load_dataset(
    manifest: DatasetManifest,
    config: PreprocessConfig = PreprocessConfig(),
    jobs: int = 1,
    name: str = "",
) -> LoadedDataset:
    """Decode every sample of a manifest, in manifest order."""
    if len(manifest) == 0:
        raise EmptyDatasetError("manifest has no samples")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            arrays = list(pool.map(lambda s: load_image(s, config), manifest.samples))
    else:
        arrays = [load_image(s, config) for s in manifest.samples]
    images = torch.from_numpy(np.stack([a.transpose(2, 0, 1) for a in arrays]))
    return LoadedDataset(
        images=images,
        arousal=torch.tensor(manifest.arousal, dtype=torch.float32),
        valence=torch.tensor(manifest.valence, dtype=torch.float32),
        name=name,
        manifest=manifest,
    )


def batch_stream(
    manifest: DatasetManifest | Sequence | int,
    batch_size: int,
    seed: int,
    epoch: int = 0,
) -> list[np.ndarray]:
    """Seeded permutation of sample indices chunked into batches.

    The permutation comes from numpy's PCG64 generator seeded with
    ``(seed, epoch)``, so it is the same on every platform. The final short
    batch is kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = manifest if isinstance(manifest, int) else len(manifest)
    if n == 0:
        raise EmptyDatasetError("cannot batch an empty dataset")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def sequential_batches(n: int, batch_size: int) -> Iterable[np.ndarray]:
    for start in range(0, n, batch_size):
        yield np.arange(start, min(start + batch_size, n))
