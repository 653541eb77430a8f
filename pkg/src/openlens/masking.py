"""Perturbation operator, baseline images, mask resizing and cropping.

The masked image is I*M + B*(1-M) with the mask broadcast across channels,
so the output is a per-pixel convex combination of image and baseline.
Bilinear resizing is implemented with explicit separable interpolation
matrices: the map is exactly linear in the input, its rows are convex
weights (values stay in [0, 1]), and the optimizer can apply the exact
adjoint when backpropagating through the upsampling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from .exceptions import OutOfBounds, ShapeMismatch, UnknownKind
from .types import BaselineImage, Image, Mask
from .validation import check_spatial_match

DEFAULT_BLUR_SIGMA = 10.0


def apply_mask(image: Image, baseline: BaselineImage, mask: Mask) -> Image:
    """Blend image and baseline: original pixels survive where mask is 1."""
    if image.shape != baseline.shape:
        raise ShapeMismatch(f"image {image.shape} vs baseline {baseline.shape}")
    check_spatial_match(image.pixels, mask.values)
    m = mask.values[:, :, None]
    blended = image.pixels * m + baseline.pixels * (1.0 - m)
    return Image(np.clip(blended, 0.0, 1.0))


def apply_mask_multiencoder(
    image: Image, baseline: BaselineImage, mask: Mask, encoder_count: int
) -> List[Image]:
    """One unified masked image shared by every encoder branch.

    The blend is computed once at raw-image resolution; the returned list
    holds ``encoder_count`` references to the same object, so all encoders
    are guaranteed to see identical pixels.
    """
    if encoder_count < 1:
        raise ValueError("encoder_count must be >= 1")
    perturbed = apply_mask(image, baseline, mask)
    return [perturbed] * encoder_count


def make_baseline(
    image: Image,
    kind: str,
    blur_sigma: float = DEFAULT_BLUR_SIGMA,
    seed: int = 0,
) -> BaselineImage:
    """Build a visually uninformative counterpart of ``image``.

    blurred: per-channel Gaussian blur (reflect padding), strong enough by
    default (sigma=10) to destroy text and fine structure while keeping
    global color statistics. blank: all zeros. noise: uniform [0,1] drawn
    from ``seed`` so runs are reproducible.
    """
    if kind == "blurred":
        if blur_sigma <= 0:
            raise ValueError("blur_sigma must be > 0 for the blurred baseline")
        blurred = np.stack(
            [
                ndimage.gaussian_filter(image.pixels[:, :, c], blur_sigma, mode="reflect")
                for c in range(image.channels)
            ],
            axis=2,
        )
        return BaselineImage(np.clip(blurred, 0.0, 1.0), kind="blurred", blur_sigma=blur_sigma)
    if kind == "blank":
        return BaselineImage(np.zeros(image.shape), kind="blank")
    if kind == "noise":
        rng = np.random.default_rng(seed)
        return BaselineImage(rng.uniform(0.0, 1.0, size=image.shape), kind="noise", seed=seed)
    raise UnknownKind(f"baseline kind {kind!r}; expected blurred, blank or noise")


# -- bilinear resizing ------------------------------------------------------


@lru_cache(maxsize=256)
def interp_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) bilinear interpolation weights, corner alignment off.

    Each row has at most two non-zero weights that are non-negative and sum
    to one, so applying the matrix preserves the [0, 1] range and constants.
    """
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    i0 = np.floor(pos).astype(int)
    frac = pos - i0
    lo = np.clip(i0, 0, src - 1)
    hi = np.clip(i0 + 1, 0, src - 1)
    w = np.zeros((dst, src))
    rows = np.arange(dst)
    w[rows, lo] += 1.0 - frac
    w[rows, hi] += frac
    w.setflags(write=False)  # cached and shared
    return w


def resize_plane(values: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a 2D array; exactly linear in the input."""
    th, tw = target
    wh = interp_matrix(values.shape[0], th)
    ww = interp_matrix(values.shape[1], tw)
    return wh @ values @ ww.T


def resize_plane_adjoint(grad: np.ndarray, source: Tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`resize_plane`: pull a cotangent back to the source grid."""
    sh, sw = source
    wh = interp_matrix(sh, grad.shape[0])
    ww = interp_matrix(sw, grad.shape[1])
    return wh.T @ grad @ ww


def resize_pixels(pixels: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    return np.stack(
        [resize_plane(pixels[:, :, c], target) for c in range(pixels.shape[2])], axis=2
    )


def upsample_mask(mask: Mask, target: Tuple[int, int]) -> Mask:
    """Bilinearly upsample a low-resolution mask to image resolution."""
    h, w = mask.shape
    th, tw = int(target[0]), int(target[1])
    if h > th or w > tw:
        raise ShapeMismatch(f"cannot upsample {mask.shape} to smaller target {target}")
    up = resize_plane(mask.values, (th, tw))
    return Mask(np.clip(up, 0.0, 1.0))


# -- multi-resolution cropping ----------------------------------------------


@dataclass(frozen=True)
class CropLayout:
    """Ordered crop rectangles, each resized to a common target resolution."""

    patches: Tuple[Tuple[int, int, int, int], ...]
    target_resolution: Tuple[int, int]

    def __post_init__(self):
        object.__setattr__(
            self, "patches", tuple(tuple(int(v) for v in p) for p in self.patches)
        )
        th, tw = self.target_resolution
        object.__setattr__(self, "target_resolution", (int(th), int(tw)))

    def to_jsonable(self) -> dict:
        return {
            "patches": [list(p) for p in self.patches],
            "target_resolution": list(self.target_resolution),
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "CropLayout":
        return cls(
            patches=tuple(tuple(p) for p in d["patches"]),
            target_resolution=tuple(d["target_resolution"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_jsonable(), sort_keys=True)


def default_crop_layout(
    image_shape: Tuple[int, int, int] | Tuple[int, int],
    target_resolution: Tuple[int, int] | None = None,
    grid: int | None = None,
) -> CropLayout:
    """Base full-image patch plus an n x n tile grid covering the image.

    Mimics the common multi-resolution input scheme: one global view plus
    local tiles. The grid defaults to 2x2 and widens to 3x3 for images far
    from square.
    """
    h, w = image_shape[0], image_shape[1]
    if grid is None:
        aspect = max(h, w) / min(h, w)
        grid = 3 if aspect >= 1.6 else 2
    if target_resolution is None:
        target_resolution = (max(1, h // grid), max(1, w // grid))
    patches = [(0, 0, h, w)]
    row_edges = np.linspace(0, h, grid + 1).astype(int)
    col_edges = np.linspace(0, w, grid + 1).astype(int)
    for i in range(grid):
        for j in range(grid):
            top, bottom = row_edges[i], row_edges[i + 1]
            left, right = col_edges[j], col_edges[j + 1]
            patches.append((int(top), int(left), int(bottom - top), int(right - left)))
    return CropLayout(patches=tuple(patches), target_resolution=tuple(target_resolution))


def _check_layout(shape: Tuple[int, int], layout: CropLayout) -> None:
    h, w = shape
    for top, left, rh, rw in layout.patches:
        if top < 0 or left < 0 or rh < 1 or rw < 1 or top + rh > h or left + rw > w:
            raise OutOfBounds(f"patch {(top, left, rh, rw)} outside {h}x{w} image")


def crop_multires(image: Image, layout: CropLayout) -> List[Image]:
    """Crop to variable-sized patches, each bilinearly resized to the target.

    Slicing plus the linear resize keeps the whole map differentiable in
    the input pixels, so a mask can undergo exactly the same transformation
    as the image patches.
    """
    _check_layout((image.height, image.width), layout)
    out = []
    for top, left, rh, rw in layout.patches:
        patch = image.pixels[top : top + rh, left : left + rw, :]
        out.append(Image(np.clip(resize_pixels(patch, layout.target_resolution), 0.0, 1.0)))
    return out


def crop_mask_multires(mask: Mask, layout: CropLayout) -> List[Mask]:
    """Apply the image crop layout to a mask (same rectangles, same resize)."""
    _check_layout(mask.shape, layout)
    out = []
    for top, left, rh, rw in layout.patches:
        patch = mask.values[top : top + rh, left : left + rw]
        out.append(Mask(np.clip(resize_plane(patch, layout.target_resolution), 0.0, 1.0)))
    return out
