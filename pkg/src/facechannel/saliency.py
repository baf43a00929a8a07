"""Saliency maps: input-gradient attribution and last-conv activation maps,
plus heatmap export over the source face."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, ShapeError

HEADS = ("arousal", "valence", "combined")
METHODS = ("input-gradient", "last-conv-activation")
HEAT_OPACITY = 0.6


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray  # H x W in [0, 1]
    head: str
    method: str

    def __post_init__(self):
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")

    def stats(self) -> dict:
        v = self.values
        return {
            "min": float(v.min()),
            "max": float(v.max()),
            "mass_above_0.5": float((v > 0.5).mean()),
        }


def _normalize(raw: np.ndarray) -> np.ndarray:
    raw = np.abs(np.asarray(raw, dtype=np.float64))
    peak = raw.max()
    if peak <= 0 or not np.isfinite(peak):
        return np.zeros_like(raw)
    return raw / peak


def _as_input(image, model) -> torch.Tensor:
    """Accept an H x W x C array or a (C, H, W) / (1, C, H, W) tensor."""
    if isinstance(image, np.ndarray):
        arr = image[:, :, None] if image.ndim == 2 else image
        x = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).float()
    else:
        x = torch.as_tensor(image).float()
    if x.dim() == 3:
        x = x.unsqueeze(0)
    cfg = getattr(model, "config", None)
    if cfg is not None and tuple(x.shape[1:]) != (cfg.input_channels, cfg.input_size, cfg.input_size):
        raise ShapeError(f"image shape {tuple(x.shape[1:])} does not match the model input")
    return x


def raw_input_gradient(model, image, head: str = "combined") -> np.ndarray:
    """Un-normalised ``max_c |d head / d x|`` for one image."""
    if head not in HEADS:
        raise ConfigError(f"head must be one of {HEADS}, got {head!r}")
    x = _as_input(image, model).clone().requires_grad_(True)
    was_training = getattr(model, "training", False)
    model.eval()
    try:
        arousal, valence = model(x)
        out = {"arousal": arousal, "valence": valence}.get(head)
        if out is None:
            out = arousal + valence
        out = out.sum()
        if not out.requires_grad:
            return np.zeros(tuple(x.shape[2:]))
        (grad,) = torch.autograd.grad(out, x, allow_unused=True)
    finally:
        if was_training:
            model.train()
    if grad is None:
        return np.zeros(tuple(x.shape[2:]))
    return grad[0].abs().amax(dim=0).double().numpy()


def input_gradient_saliency(model, image, head: str = "combined") -> SaliencyMap:
    """Absolute input gradient of the chosen head, max over channels,
    scaled so the peak is 1. ``combined`` differentiates arousal + valence."""
    return SaliencyMap(_normalize(raw_input_gradient(model, image, head)), head, "input-gradient")


@torch.no_grad()
def last_conv_activation_map(model, image) -> SaliencyMap:
    """Channel-mean of the final shunting layer's output, bilinearly
    upsampled to the input size and scaled so the peak is 1."""
    x = _as_input(image, model)
    model.eval()
    act = model.features(x)
    mean = act.mean(dim=1, keepdim=True)
    up = F.interpolate(mean, size=tuple(x.shape[2:]), mode="bilinear", align_corners=False)
    return SaliencyMap(_normalize(up[0, 0].double().numpy()), "combined", "last-conv-activation")


def saliency_mass_fraction(values: np.ndarray, rows: slice) -> float:
    total = float(np.sum(values))
    return float(np.sum(values[rows])) / total if total > 0 else 0.0


def _grayscale_rgb(base) -> np.ndarray:
    if isinstance(base, (str, os.PathLike)):
        with Image.open(base) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    else:
        arr = np.asarray(base, dtype=np.float64)
        if np.issubdtype(np.asarray(base).dtype, np.integer):
            arr = arr / 255.0
        if arr.ndim == 2:
            arr = arr[:, :, None]
    if arr.shape[2] == 3:
        gray = 0.299 * arr[:, :, 0] + 0.587 * arr[:, :, 1] + 0.114 * arr[:, :, 2]
    else:
        gray = arr[:, :, 0]
    return np.repeat(gray[:, :, None], 3, axis=2)


def blend_heatmap(saliency: SaliencyMap, base) -> np.ndarray:
    """Colour-mapped heat over a grayscale rendering of ``base``:
    ``out = (1 - k*h) * gray + k*h * colormap(h)`` with ``k = 0.6``.
    Returns uint8 H x W x 3 at the base image's size."""
    from matplotlib import colormaps

    gray = _grayscale_rgb(base)
    h, w = gray.shape[:2]
    heat = saliency.values.astype(np.float32)
    if heat.shape != (h, w):
        heat = np.asarray(Image.fromarray(heat, "F").resize((w, h), Image.BILINEAR), dtype=np.float64)
    heat = np.clip(heat, 0.0, 1.0)
    color = colormaps["jet"](heat)[:, :, :3]
    k = HEAT_OPACITY * heat[:, :, None]
    out = (1.0 - k) * gray + k * color
    return np.clip(np.round(out * 255.0), 0, 255).astype(np.uint8)


def export_heatmap(saliency: SaliencyMap, base, out_path: str | os.PathLike) -> Path:
    """Write :func:`blend_heatmap` to a PNG (no metadata, so bytes are a
    function of the inputs alone)."""
    out_path = Path(out_path)
    if not out_path.parent.exists():
        raise FileNotFoundError(f"output directory {out_path.parent} does not exist")
    Image.fromarray(blend_heatmap(saliency, base), "RGB").save(out_path, format="PNG")
    return out_path
