"""8-bit PNG previews of images, deformation fields and gradient maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from ..models import DeformationField, Image


def to_gray(values: np.ndarray, window: tuple[float, float] | None = None) -> np.ndarray:
    """uint8 rendering of ``values`` clipped to ``window`` (default: their own range)."""
    values = np.asarray(values, dtype=float)
    lo, hi = window if window is not None else (float(values.min()), float(values.max()))
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    scaled = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    return np.round(255.0 * scaled).astype(np.uint8)


def save_image(path: Path, image: Image | np.ndarray, window: tuple[float, float] | None = None) -> None:
    values = image.values if isinstance(image, Image) else image
    PILImage.fromarray(to_gray(values, window)).save(Path(path))


def field_to_rgb(field: DeformationField, scale: float | None = None) -> np.ndarray:
    """(N, N, 3) uint8 color map: hue from the displacement angle, value from its magnitude."""
    d_x, d_y = field.displacement
    magnitude = np.hypot(d_x, d_y)
    top = scale if scale is not None else float(magnitude.max())
    hue = (np.arctan2(d_y, d_x) + np.pi) / (2 * np.pi)
    value = magnitude / top if top > 0 else np.zeros_like(magnitude)
    bands = [
        np.round(255.0 * (hue % 1.0)),
        np.full(magnitude.shape, 255.0),
        np.round(255.0 * np.clip(value, 0.0, 1.0)),
    ]
    hsv = PILImage.merge("HSV", [PILImage.fromarray(b.astype(np.uint8)) for b in bands])
    return np.asarray(hsv.convert("RGB"))


def save_field(path: Path, field: DeformationField, scale: float | None = None) -> None:
    PILImage.fromarray(field_to_rgb(field, scale)).save(Path(path))


def save_gradient_map(path: Path, values: np.ndarray) -> None:
    """Signed map, zero at mid-gray and symmetric about it."""
    bound = float(np.abs(values).max())
    window = (-bound, bound) if bound > 0 else (-1.0, 1.0)
    save_image(path, values, window)
