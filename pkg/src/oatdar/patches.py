"""Exact, non-overlapping image patching and reassembly.

Patches tile the image with no padding and no blending; split followed by
merge is a bit-exact identity. Patch order is row-major over the grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class PatchGrid:
    patch_h: int
    patch_w: int
    rows: int
    cols: int

    def __post_init__(self):
        if min(self.patch_h, self.patch_w, self.rows, self.cols) < 1:
            raise ValueError("all PatchGrid fields must be >= 1")

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    @property
    def image_shape(self) -> tuple:
        return (self.rows * self.patch_h, self.cols * self.patch_w)

    @classmethod
    def for_image(cls, image_shape, patch_h: int, patch_w: int) -> "PatchGrid":
        h, w = image_shape
        if h % patch_h or w % patch_w:
            raise ShapeError(
                f"patch {patch_h}x{patch_w} does not tile image {h}x{w}")
        return cls(patch_h, patch_w, h // patch_h, w // patch_w)


def split_patches(img: np.ndarray, grid: PatchGrid) -> list:
    """Split ``img`` into grid.rows * grid.cols patches, row-major."""
    img = np.asarray(img)
    if img.shape != grid.image_shape:
        raise ShapeError(f"image {img.shape} does not match grid "
                         f"{grid.image_shape}")
    out = []
    for r in range(grid.rows):
        for c in range(grid.cols):
            out.append(img[r * grid.patch_h:(r + 1) * grid.patch_h,
                           c * grid.patch_w:(c + 1) * grid.patch_w].copy())
    return out


def merge_patches(patches, grid: PatchGrid) -> np.ndarray:
    """Inverse of :func:`split_patches`."""
    if len(patches) != grid.n_patches:
        raise ShapeError(f"expected {grid.n_patches} patches, got {len(patches)}")
    first = np.asarray(patches[0])
    img = np.empty(grid.image_shape, dtype=first.dtype)
    for idx, p in enumerate(patches):
        p = np.asarray(p)
        if p.shape != (grid.patch_h, grid.patch_w):
            raise ShapeError(f"patch {idx} has shape {p.shape}, expected "
                             f"({grid.patch_h}, {grid.patch_w})")
        r, c = divmod(idx, grid.cols)
        img[r * grid.patch_h:(r + 1) * grid.patch_h,
            c * grid.patch_w:(c + 1) * grid.patch_w] = p
    return img
