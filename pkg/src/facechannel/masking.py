"""Face-mask compositing for building masked copies of a dataset.

A mask template is an RGBA image plus four named anchor points. For every
face, an affine map from the template anchors to the face's keypoints is
fitted by least squares, the template is warped into the image with
bilinear sampling and alpha-composited over it.

Keypoints are data: any upstream landmark detector can feed this module as
long as it emits ``mouth_left``, ``mouth_right``, ``chin`` and
``nose_bridge`` in pixel coordinates (x to the right, y down).
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image

from .dataset import DatasetManifest, Sample, load_keypoint_sidecar, write_manifest
from .errors import DecodeError, DegenerateGeometryError, InsufficientCorrespondenceError

logger = logging.getLogger(__name__)

ANCHOR_NAMES = ("mouth_left", "mouth_right", "chin", "nose_bridge")
_SNAP = 1e-9


@dataclass(frozen=True)
class MaskTemplate:
    rgba: np.ndarray  # H x W x 4 float64, all channels in [0, 1]
    anchors: Mapping[str, tuple[float, float]]

    def __post_init__(self):
        rgba = np.asarray(self.rgba, dtype=np.float64)
        if rgba.ndim != 3 or rgba.shape[2] != 4:
            raise ValueError(f"template must be H x W x 4, got {rgba.shape}")
        if rgba.min() < 0 or rgba.max() > 1:
            raise ValueError("template values must lie in [0, 1]")
        if not (rgba[:, :, 3] > 0).any():
            raise ValueError("template alpha is zero everywhere")
        h, w = rgba.shape[:2]
        anchors = {k: (float(v[0]), float(v[1])) for k, v in self.anchors.items()}
        for name in ANCHOR_NAMES:
            if name not in anchors:
                raise ValueError(f"template anchor {name!r} missing")
            x, y = anchors[name]
            if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
                raise ValueError(f"anchor {name}=({x}, {y}) outside the {w}x{h} template")
        rgba.setflags(write=False)
        object.__setattr__(self, "rgba", rgba)
        object.__setattr__(self, "anchors", anchors)

    @classmethod
    def load(cls, png_path: str | os.PathLike, anchors_path: str | os.PathLike) -> "MaskTemplate":
        try:
            with Image.open(png_path) as im:
                rgba = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
        except (OSError, ValueError) as exc:
            raise DecodeError(png_path, str(exc)) from None
        with open(anchors_path, encoding="utf-8") as fh:
            anchors = json.load(fh)
        return cls(rgba, {k: tuple(v) for k, v in anchors.items()})

    def save(self, png_path: str | os.PathLike, anchors_path: str | os.PathLike):
        Image.fromarray(np.round(self.rgba * 255).astype(np.uint8), "RGBA").save(png_path)
        Path(anchors_path).write_text(json.dumps({k: list(v) for k, v in self.anchors.items()}, indent=2))


@dataclass(frozen=True)
class AffineTransform:
    """``p' = linear @ p + translation`` in pixel coordinates."""

    matrix: np.ndarray  # 2 x 3

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"affine matrix must be 2 x 3, got {m.shape}")
        if abs(np.linalg.det(m[:, :2])) < 1e-12:
            raise DegenerateGeometryError("affine transform has a singular linear part")
        object.__setattr__(self, "matrix", m)

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:, 2]

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return pts @ self.linear.T + self.translation

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.linear)
        return AffineTransform(np.hstack([inv, (-inv @ self.translation)[:, None]]))


def estimate_affine(anchors: Mapping[str, tuple], keypoints: Mapping[str, tuple]) -> AffineTransform:
    """Least-squares affine map taking anchor points onto keypoints, matched
    by name. Exact for three non-collinear pairs."""
    names = [n for n in anchors if n in keypoints]
    if len(names) < 3:
        raise InsufficientCorrespondenceError(f"need >= 3 matching point names, got {names}")
    src = np.array([anchors[n] for n in names], dtype=np.float64)
    dst = np.array([keypoints[n] for n in names], dtype=np.float64)
    centered = src - src.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise DegenerateGeometryError("anchor points are collinear")
    design = np.hstack([src, np.ones((len(names), 1))])
    solution, *_ = np.linalg.lstsq(design, dst, rcond=None)
    return AffineTransform(solution.T)


def _bilinear_rgba(premult: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample a premultiplied RGBA image at float coordinates; everything
    outside the image is transparent black."""
    h, w = premult.shape[:2]
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    out = np.zeros(xs.shape + (4,), dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = np.zeros(xs.shape + (4,), dtype=np.float64)
            vals[inside] = premult[yi[inside], xi[inside]]
            out += wx * wy * vals
    return out


def warp_template(template: MaskTemplate | np.ndarray, transform: AffineTransform, height: int, width: int):
    """Warp a template (or a raw RGBA array) into a ``height x width`` frame.

    Returns ``(premultiplied_rgb, alpha)`` as H x W x 3 and H x W arrays.
    """
    rgba = template.rgba if isinstance(template, MaskTemplate) else np.asarray(template, dtype=np.float64)
    premult = np.concatenate([rgba[:, :, :3] * rgba[:, :, 3:4], rgba[:, :, 3:4]], axis=2)
    th, tw = rgba.shape[:2]

    # only pixels inside the warped template's bounding box can receive mask
    corners = transform.apply([[-1, -1], [tw, -1], [-1, th], [tw, th]])
    x_lo = max(int(np.floor(corners[:, 0].min())), 0)
    x_hi = min(int(np.ceil(corners[:, 0].max())), width - 1)
    y_lo = max(int(np.floor(corners[:, 1].min())), 0)
    y_hi = min(int(np.ceil(corners[:, 1].max())), height - 1)

    rgb = np.zeros((height, width, 3))
    alpha = np.zeros((height, width))
    if x_lo > x_hi or y_lo > y_hi:
        return rgb, alpha
    gy, gx = np.mgrid[y_lo : y_hi + 1, x_lo : x_hi + 1]
    src = transform.inverse().apply(np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float64))
    snapped = np.round(src)
    src = np.where(np.abs(src - snapped) < _SNAP, snapped, src)
    sampled = _bilinear_rgba(premult, src[:, 0], src[:, 1]).reshape(gy.shape + (4,))
    rgb[y_lo : y_hi + 1, x_lo : x_hi + 1] = sampled[..., :3]
    alpha[y_lo : y_hi + 1, x_lo : x_hi + 1] = np.clip(sampled[..., 3], 0.0, 1.0)
    return rgb, alpha


def overlay_mask(image: np.ndarray, keypoints: Mapping[str, tuple], template: MaskTemplate) -> np.ndarray:
    """Composite ``template`` onto ``image`` so its anchors land on
    ``keypoints``: ``out = alpha * mask + (1 - alpha) * image``.

    ``image`` is H x W x C, either uint8 or float in [0, 1]; the result has
    the same shape and dtype. Pixels the warped mask does not cover are
    returned untouched.
    """
    return composite(image, template.rgba, template.anchors, keypoints)


def composite(image: np.ndarray, rgba: np.ndarray, anchors: Mapping[str, tuple], keypoints: Mapping[str, tuple]):
    """:func:`overlay_mask` on a raw RGBA array, without template validation."""
    image = np.asarray(image)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[:, :, None]
    h, w, c = image.shape
    transform = estimate_affine(anchors, keypoints)
    rgb, alpha = warp_template(rgba, transform, h, w)

    is_int = np.issubdtype(image.dtype, np.integer)
    scale = 255.0 if is_int else 1.0
    base = image.astype(np.float64) / scale
    if c == 1:
        r, g, b = 0.299, 0.587, 0.114
        rgb = (r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2])[..., None]
    elif c != 3:
        raise ValueError(f"images must have 1 or 3 channels, got {c}")
    blended = rgb + (1.0 - alpha[..., None]) * base

    out = image.copy()
    support = alpha > 0
    if is_int:
        out[support] = np.clip(np.round(blended[support] * scale), 0, 255).astype(image.dtype)
    else:
        out[support] = blended[support].astype(image.dtype)
    return out[:, :, 0] if squeeze else out


@dataclass
class GenerationReport:
    processed: int = 0
    skipped: int = 0
    skipped_paths: list[str] = field(default_factory=list)
    reasons: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"processed": self.processed, "skipped": self.skipped, "skipped_paths": self.skipped_paths}


def _keypoints_for(sample: Sample, sidecar: Mapping[str, Mapping] | None):
    if sample.keypoints:
        return sample.keypoints
    if sidecar:
        for key in (str(sample.image_path), Path(sample.image_path).name):
            if key in sidecar:
                return sidecar[key]
        resolved = str(Path(sample.image_path).resolve())
        for key, pts in sidecar.items():
            if str(Path(key).resolve()) == resolved:
                return pts
    return None


def _mask_one(index: int, sample: Sample, template: MaskTemplate, out_dir: Path, sidecar):
    kps = _keypoints_for(sample, sidecar)
    if kps is None:
        return None, "no keypoints"
    try:
        with Image.open(sample.image_path) as im:
            im.load()
            mode = "L" if im.mode in ("L", "I;16", "I", "F") else "RGB"
            arr = np.asarray(im.convert(mode))
    except (OSError, ValueError) as exc:
        return None, f"decode failed: {exc}"
    try:
        out = overlay_mask(arr, kps, template)
    except (InsufficientCorrespondenceError, DegenerateGeometryError) as exc:
        return None, str(exc)
    out_path = out_dir / f"{index:06d}_{Path(sample.image_path).stem}.png"
    Image.fromarray(out, mode).save(out_path)
    return Sample(out_path, sample.arousal, sample.valence, dict(kps)), None


def generate_masked_dataset(
    manifest: DatasetManifest,
    template: MaskTemplate,
    out_dir: str | os.PathLike,
    sidecar: str | os.PathLike | Mapping | None = None,
    jobs: int = 1,
) -> tuple[DatasetManifest, GenerationReport]:
    """Write a masked copy of every sample that has usable keypoints.

    Labels are copied unchanged. Samples that cannot be masked are listed in
    the report instead of aborting the run. ``out_dir`` receives the images,
    ``manifest.csv`` and ``report.json``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory {out_dir} is not writable")
    if isinstance(sidecar, (str, os.PathLike)):
        sidecar = load_keypoint_sidecar(sidecar)

    work = [(i, s) for i, s in enumerate(manifest.samples)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda a: _mask_one(a[0], a[1], template, out_dir, sidecar), work))
    else:
        results = [_mask_one(i, s, template, out_dir, sidecar) for i, s in work]

    report = GenerationReport()
    samples = []
    for (_, src), (sample, reason) in zip(work, results):
        if sample is None:
            report.skipped += 1
            report.skipped_paths.append(str(src.image_path))
            report.reasons[str(src.image_path)] = reason
            logger.warning("skipped %s: %s", src.image_path, reason)
        else:
            report.processed += 1
            samples.append(sample)
    masked = DatasetManifest(tuple(samples), manifest.split_tag)
    write_manifest(masked, out_dir / "manifest.csv")
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    return masked, report
