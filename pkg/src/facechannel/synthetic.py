"""Procedural cartoon faces with known affect labels and keypoints.

Used for desk-scale experiments and demos where a licensed face corpus is
unavailable. The mouth carries a strong, clean copy of both labels (opening
for arousal, corner lift for valence); the eyes and brows carry a weaker,
noisier copy, so covering the lower face removes most but not all of the
signal.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from .dataset import DatasetManifest, Sample, write_manifest
from .masking import MaskTemplate

SUPERSAMPLE = 4


def render_face(arousal: float, valence: float, rng: np.random.Generator, size: int = 96, upper_noise: float = 0.5):
    """Draw one face. Returns ``(uint8 H x W x 3 image, keypoints)``."""
    s = size * SUPERSAMPLE
    bg = rng.uniform(0.15, 0.45)
    canvas = Image.new("RGB", (s, s), tuple(int(255 * bg * c) for c in (1.0, 0.95, 0.9)))
    draw = ImageDraw.Draw(canvas)

    cx = s * (0.5 + rng.uniform(-0.04, 0.04))
    cy = s * (0.5 + rng.uniform(-0.04, 0.04))
    scale = rng.uniform(0.92, 1.08)
    skin = rng.uniform(0.65, 0.9)
    skin_rgb = tuple(int(255 * skin * c) for c in (1.0, 0.85, 0.72))
    dark = (35, 25, 25)

    def P(x, y):
        return (cx + x * s * scale, cy + y * s * scale)

    rx, ry = 0.32 * s * scale, 0.42 * s * scale
    draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=skin_rgb)

    # upper face: noisy, weaker copies of the labels
    a_up = float(np.clip(arousal + rng.normal(0, upper_noise), -1.5, 1.5))
    v_up = float(np.clip(valence + rng.normal(0, upper_noise), -1.5, 1.5))
    eye_h = 0.022 + 0.014 * a_up
    for side in (-1, 1):
        ex, ey = P(side * 0.13, -0.1)
        w = 0.06 * s * scale
        h = max(eye_h, 0.004) * s * scale
        draw.ellipse([ex - w, ey - h, ex + w, ey + h], fill=dark)
        tilt = 0.025 * v_up
        x0, y0 = P(side * 0.06, -0.19 - tilt)
        x1, y1 = P(side * 0.2, -0.19 + tilt)
        draw.line([x0, y0, x1, y1], fill=dark, width=max(1, int(0.018 * s)))

    # nose
    nx, ny = P(0.0, -0.05)
    draw.line([nx, ny, *P(0.0, 0.07)], fill=tuple(int(c * 0.8) for c in skin_rgb), width=max(1, int(0.015 * s)))

    # mouth: clean labels, large amplitude
    half_w = 0.13
    lift = 0.06 * valence
    opening = 0.012 + 0.05 * (arousal + 1.0) / 2.0
    mouth_y = 0.2
    ts = np.linspace(-1.0, 1.0, 33)
    bulge = 1.0 - ts * ts
    upper = [P(half_w * t, mouth_y + (lift - opening) * b) for t, b in zip(ts, bulge)]
    lower = [P(half_w * t, mouth_y + (lift + opening) * b) for t, b in zip(ts, bulge)]
    draw.polygon(upper + lower[::-1], fill=(90, 20, 30), outline=dark)

    img = canvas.filter(ImageFilter.GaussianBlur(SUPERSAMPLE * 0.4)).resize((size, size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float64)
    arr += rng.normal(0, 4.0, arr.shape)
    arr = np.clip(np.round(arr), 0, 255).astype(np.uint8)

    k = 1.0 / SUPERSAMPLE

    def kp(x, y):
        px, py = P(x, y)
        return (px * k - 0.5 + 0.5 * k, py * k - 0.5 + 0.5 * k)

    keypoints = {
        "mouth_left": kp(-half_w, mouth_y),
        "mouth_right": kp(half_w, mouth_y),
        "chin": kp(0.0, 0.37),
        "nose_bridge": kp(0.0, -0.07),
    }
    return arr, keypoints


def write_synthetic_dataset(
    out_dir: str | os.PathLike,
    n: int,
    seed: int = 0,
    size: int = 96,
    upper_noise: float = 0.5,
    split_tag: str = "train",
) -> DatasetManifest:
    """Render ``n`` labelled faces into ``out_dir`` with a ``manifest.csv``
    carrying labels and keypoints."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        arousal, valence = rng.uniform(-1.0, 1.0, size=2)
        img, kps = render_face(arousal, valence, rng, size, upper_noise)
        path = out_dir / f"face_{i:05d}.png"
        Image.fromarray(img, "RGB").save(path)
        samples.append(Sample(path, float(arousal), float(valence), kps))
    manifest = DatasetManifest(tuple(samples), split_tag)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def default_mask_template() -> MaskTemplate:
    """A plain surgical-style mask, 130 x 90 px, opaque with soft edges."""
    h, w = 90, 130
    s = SUPERSAMPLE
    canvas = Image.new("RGBA", (w * s, h * s), (0, 0, 0, 0))
    draw = ImageDraw.Draw(canvas)
    body = [(8, 10), (122, 10), (126, 40), (112, 72), (65, 86), (18, 72), (4, 40)]
    draw.polygon([(x * s, y * s) for x, y in body], fill=(150, 195, 225, 255))
    for y in (30, 45, 60):
        draw.line([(14 * s, y * s), (116 * s, y * s)], fill=(120, 165, 200, 255), width=s)
    canvas = canvas.resize((w, h), Image.BILINEAR)
    rgba = np.asarray(canvas, dtype=np.float64) / 255.0
    anchors = {
        "nose_bridge": (65.0, 12.0),
        "mouth_left": (37.0, 44.0),
        "mouth_right": (93.0, 44.0),
        "chin": (65.0, 80.0),
    }
    return MaskTemplate(rgba, anchors)
