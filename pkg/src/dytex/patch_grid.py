"""Overlapping patch extraction and Gaussian-weighted merging.

Origins are (x, y) with x the column of the top-left corner; patch
grids enumerate origins row-major (y outer, x inner). A grid is only
valid when the stride tiles the image exactly; callers pad first
(see ``pipeline.pad_to_grid``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CoverageGapError, DimensionMismatchError


@dataclass(frozen=True)
class PatchSpec:
    """Patch edge length and grid stride."""

    patch_size: int = 16
    stride: int = 1

    def __post_init__(self):
        if self.patch_size < 2:
            raise ValueError("patch_size must be at least 2")
        if not 1 <= self.stride <= self.patch_size:
            raise ValueError("stride must satisfy 1 <= stride <= patch_size (no gaps)")

    def grid_shape(self, height: int, width: int) -> tuple[int, int]:
        """Number of patch origins (rows, cols) for an image of this size."""
        p, s = self.patch_size, self.stride
        if height < p or width < p:
            raise DimensionMismatchError(
                f"image {height}x{width} smaller than patch size {p}")
        if (height - p) % s or (width - p) % s:
            raise DimensionMismatchError(
                f"({height}-{p}) and ({width}-{p}) must be divisible by stride {s}; pad first")
        return (height - p) // s + 1, (width - p) // s + 1


@dataclass(frozen=True)
class MergeConfig:
    """Gaussian merge kernel width."""

    sigma: float = 4.0

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma <= 0:
            raise ValueError("sigma must be finite and positive")


@dataclass
class PatchSet:
    """Patches plus their origins on a fixed source canvas."""

    patches: np.ndarray          # (n, p, p, C) float32
    origins: np.ndarray          # (n, 2) int32, (x, y)
    frame_index: int
    source_dims: tuple[int, int]  # (H, W)

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float32)
        self.origins = np.asarray(self.origins, dtype=np.int32)
        if len(self.patches) != len(self.origins):
            raise ValueError("patches and origins must have equal length")
        p = self.patches.shape[1]
        h, w = self.source_dims
        if len(self.origins):
            xs, ys = self.origins[:, 0], self.origins[:, 1]
            if xs.min() < 0 or ys.min() < 0 or (xs + p > w).any() or (ys + p > h).any():
                raise ValueError("an origin places its patch outside source_dims")

    @property
    def patch_size(self) -> int:
        return self.patches.shape[1]


def cut_patches(image: np.ndarray, spec: PatchSpec, frame_index: int = 0) -> PatchSet:
    """Slice an image into its full overlapping patch grid, row-major."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[..., None]
    h, w, _ = image.shape
    rows, cols = spec.grid_shape(h, w)
    p, s = spec.patch_size, spec.stride
    patches = np.empty((rows * cols, p, p, image.shape[2]), dtype=np.float32)
    origins = np.empty((rows * cols, 2), dtype=np.int32)
    i = 0
    for gy in range(rows):
        y = gy * s
        for gx in range(cols):
            x = gx * s
            patches[i] = image[y:y + p, x:x + p]
            origins[i] = (x, y)
            i += 1
    return PatchSet(patches=patches, origins=origins, frame_index=frame_index,
                    source_dims=(h, w))


def gaussian_weight(px: tuple[float, float], center: tuple[float, float],
                    sigma: float) -> float:
    """Isotropic Gaussian weight of a pixel relative to a patch center."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    dx = px[0] - center[0]
    dy = px[1] - center[1]
    return float(np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
                 / (2.0 * np.pi * sigma * sigma))


def gaussian_kernel(patch_size: int, sigma: float) -> np.ndarray:
    """(p, p) table of ``gaussian_weight`` values about the patch center.

    The center sits at ((p-1)/2, (p-1)/2) in patch-local coordinates, so
    even patch sizes get symmetric weights.
    """
    c = (patch_size - 1) / 2.0
    coords = np.arange(patch_size, dtype=np.float64) - c
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    return (np.exp(-(xx * xx + yy * yy) / (2.0 * sigma * sigma))
            / (2.0 * np.pi * sigma * sigma))


def merge_patches(patch_set: PatchSet, spec: PatchSpec, cfg: MergeConfig) -> np.ndarray:
    """Blend overlapping patches into one image by Gaussian-weighted average.

    Every output pixel is sum(w * v) / sum(w) over the patches covering
    it, with w from the shared kernel table. Returns float64 (the full
    accumulation precision); cast to float32 for storage if needed.
    Raises ``CoverageGapError`` when some pixel is covered by no patch.
    """
    p = patch_set.patch_size
    if p != spec.patch_size:
        raise DimensionMismatchError(
            f"patch set has size {p}, spec expects {spec.patch_size}")
    h, w = patch_set.source_dims
    channels = patch_set.patches.shape[3]
    kernel = gaussian_kernel(p, cfg.sigma)
    num = np.zeros((h, w, channels), dtype=np.float64)
    den = np.zeros((h, w), dtype=np.float64)
    covered = np.zeros((h, w), dtype=bool)
    kc = kernel[..., None]
    for patch, (x, y) in zip(patch_set.patches, patch_set.origins):
        num[y:y + p, x:x + p] += kc * patch.astype(np.float64)
        den[y:y + p, x:x + p] += kernel
        covered[y:y + p, x:x + p] = True
    if not covered.all():
        raise CoverageGapError(f"{int((~covered).sum())} pixels not covered by any patch")
    return num / den[..., None]
