"""Sliding-window patch extraction, resizing, and grayscale conversion."""

from dataclasses import dataclass, field
from typing import Iterator, Optional, Tuple

import numpy as np
from PIL import Image


@dataclass
class SourceImage:
    """One labeled high-resolution RGB image (a slide, for our purposes)."""

    pixels: np.ndarray  # [H,W,3] uint8
    wsi_id: str
    patient_id: str
    coarse_label: str
    fine_label: str

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"source pixels must be [H,W,3], got {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise ValueError(f"source pixels must be uint8, got {self.pixels.dtype}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class PatchRecord:
    """One extracted patch with provenance; labels inherit from the source."""

    pixels: np.ndarray  # grayscale [S,S] uint8 once the pipeline finishes
    wsi_id: str
    patient_id: str
    x: int  # top-left in source coordinates
    y: int
    coarse_label: str
    fine_label: str
    kept: bool = True


def patch_grid(width: int, height: int, window: int, stride: int) -> list:
    """Top-left (x, y) positions; both axes step by stride, window stays inside."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if window > min(width, height):
        raise ValueError(
            f"window {window} exceeds image extent {width}x{height}")
    xs = range(0, width - window + 1, stride)
    ys = range(0, height - window + 1, stride)
    return [(x, y) for y in ys for x in xs]


def patch_count(width: int, height: int, window: int, stride: int) -> int:
    """(floor((W-w)/s)+1) * (floor((H-w)/s)+1), the grid size."""
    if window > min(width, height):
        raise ValueError(
            f"window {window} exceeds image extent {width}x{height}")
    return ((width - window) // stride + 1) * ((height - window) // stride + 1)


def extract_patches(img: SourceImage, window: int, stride: int) -> Iterator[Tuple[np.ndarray, int, int]]:
    """Yield (rgb_window, x, y) over the sliding-window grid, row-major."""
    for x, y in patch_grid(img.width, img.height, window, stride):
        yield img.pixels[y:y + window, x:x + window], x, y


def resize_patch(patch: np.ndarray, out_size: int = 224) -> np.ndarray:
    """Bilinear resize of a square RGB patch."""
    if patch.ndim != 3 or patch.shape[2] != 3:
        raise ValueError(f"expected an RGB patch, got shape {patch.shape}")
    if patch.shape[0] != patch.shape[1]:
        raise ValueError(f"patch must be square, got {patch.shape[:2]}")
    if patch.shape[0] == out_size:
        return patch.copy()
    img = Image.fromarray(patch, mode="RGB")
    return np.asarray(img.resize((out_size, out_size), Image.BILINEAR))


def to_grayscale(patch: np.ndarray) -> np.ndarray:
    """Luminance 0.299 R + 0.587 G + 0.114 B, rounded to 8-bit."""
    if patch.ndim != 3 or patch.shape[2] != 3:
        raise ValueError(f"expected an RGB patch, got shape {patch.shape}")
    rgb = patch.astype(np.float64)
    gray = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.round(gray), 0, 255).astype(np.uint8)
