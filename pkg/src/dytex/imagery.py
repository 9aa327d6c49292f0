"""Frame and mask I/O, mask extraction, and the contour distance transform.

Images are float32 numpy arrays of shape (H, W, C) with values in
[0, 1]; frame sequences stack them as (F+1, H, W, C) with frame 0 the
initial frame. Semantic masks are uint8 (H, W) arrays of {0, 1};
distance fields are float64 (H, W) arrays in [0, 1].
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (DimensionMismatchError, NoContourError, NoFramesError,
                     NonFiniteValueError, UndecodableFileError)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

FRAME_PATTERN = "frame_%04d.png"


def validate_image(image: np.ndarray) -> np.ndarray:
    """Check RasterImage invariants; returns the array as float32."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise DimensionMismatchError(f"image must be (H, W, 1|3), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteValueError("image contains non-finite pixels")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return arr


def load_image(path: str | Path) -> np.ndarray:
    """Decode an 8-bit PNG into a float32 (H, W, C) image in [0, 1]."""
    try:
        with Image.open(path) as im:
            if im.mode in ("L", "LA"):
                arr = np.asarray(im.convert("L"), dtype=np.float32)[..., None]
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except OSError as exc:
        raise UndecodableFileError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write a [0, 1] float image as an 8-bit PNG (grayscale or RGB)."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.rint(arr * 255.0).astype(np.uint8)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path)


def load_frame_sequence(directory: str | Path, pattern: str = FRAME_PATTERN) -> np.ndarray:
    """Load numbered frames matching a zero-padded template, in order.

    Returns a (F+1, H, W, C) float32 array. Raises ``NoFramesError``
    when nothing matches and ``DimensionMismatchError`` when frames
    disagree on size.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise NoFramesError(f"frame directory does not exist: {directory}")
    m = re.fullmatch(r"(.*)%0(\d+)d(.*)", pattern)
    if m is None:
        raise ValueError(f"pattern must contain a %0Nd field: {pattern!r}")
    prefix, width, suffix = m.group(1), int(m.group(2)), m.group(3)
    rx = re.compile(re.escape(prefix) + rf"(\d{{{width}}})" + re.escape(suffix))
    numbered = []
    for entry in directory.iterdir():
        match = rx.fullmatch(entry.name)
        if match:
            numbered.append((int(match.group(1)), entry))
    if not numbered:
        raise NoFramesError(f"no files matching {pattern!r} in {directory}")
    numbered.sort(key=lambda pair: pair[0])
    frames = [load_image(p) for _, p in numbered]
    first = frames[0].shape
    for idx, frame in enumerate(frames):
        if frame.shape != first:
            raise DimensionMismatchError(
                f"frame {numbered[idx][1].name} has shape {frame.shape}, expected {first}")
    return np.stack(frames, axis=0)


def save_frame_sequence(directory: str | Path, frames: np.ndarray,
                        pattern: str = FRAME_PATTERN) -> list[Path]:
    """Write frames as 8-bit PNGs named by the zero-padded template."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(np.asarray(frames)):
        p = directory / (pattern % i)
        save_image(p, frame)
        paths.append(p)
    return paths


def load_mask(path: str | Path) -> np.ndarray:
    """Load a single-channel mask PNG (0 = background, 255 = foreground)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.uint8)


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask, dtype=np.uint8) * 255)).save(path)


def save_distance_field(path: str | Path, field: np.ndarray) -> None:
    """Export a distance field as 16-bit grayscale PNG for inspection."""
    data = np.rint(np.asarray(field, dtype=np.float64) * 65535.0).astype(np.uint16)
    Image.fromarray(data).save(path)


def binarize(image: np.ndarray, threshold: float) -> np.ndarray:
    """Threshold an image into a {0, 1} semantic mask.

    3-channel input is reduced to luminance (0.299/0.587/0.114) first;
    a pixel is foreground iff its luminance is >= threshold.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    if not np.isfinite(arr).all():
        raise NonFiniteValueError("image contains non-finite pixels")
    if arr.shape[2] == 3:
        luma = arr @ np.asarray(LUMA_WEIGHTS, dtype=np.float64)
    elif arr.shape[2] == 1:
        luma = arr[:, :, 0]
    else:
        raise DimensionMismatchError(f"expected 1 or 3 channels, got {arr.shape[2]}")
    return (luma >= threshold).astype(np.uint8)


def contour_pixels(mask: np.ndarray) -> np.ndarray:
    """Boolean map of contour pixels.

    A contour pixel is foreground with a 4-adjacent background pixel,
    or foreground on the image border.
    """
    fg = np.asarray(mask) != 0
    bg = np.pad(~fg, 1, constant_values=True)
    near_bg = bg[:-2, 1:-1] | bg[2:, 1:-1] | bg[1:-1, :-2] | bg[1:-1, 2:]
    return fg & near_bg


def _edt_1d(f: np.ndarray) -> np.ndarray:
    """1-D squared distance transform (lower envelope of parabolas)."""
    n = f.shape[0]
    d = np.empty(n, dtype=np.float64)
    v = np.zeros(n, dtype=np.int64)
    z = np.empty(n + 1, dtype=np.float64)
    k = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


_FAR = 1.0e18  # sentinel cost for non-contour seeds; exceeds any image distance


def contour_distances(mask: np.ndarray) -> np.ndarray:
    """Exact (un-normalized) Euclidean distance to the nearest contour pixel.

    Two-pass transform on squared distances; the squared values stay
    exact small integers, so results match an all-pairs scan bit for
    bit.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DimensionMismatchError(f"mask must be 2-D, got shape {mask.shape}")
    if not (mask != 0).any():
        raise NoContourError("mask has no foreground; no contour exists")
    contour = contour_pixels(mask)
    h, w = mask.shape
    cost = np.where(contour, 0.0, _FAR)
    for x in range(w):
        cost[:, x] = _edt_1d(cost[:, x])
    for y in range(h):
        cost[y, :] = _edt_1d(cost[y, :])
    return np.sqrt(cost)


def distance_map(mask: np.ndarray) -> np.ndarray:
    """Normalized contour distance field: contour pixels map to 0, the
    farthest pixel to 1 (an all-contour mask yields all zeros)."""
    dist = contour_distances(mask)
    peak = dist.max()
    if peak > 0.0:
        dist = dist / peak
    return dist
