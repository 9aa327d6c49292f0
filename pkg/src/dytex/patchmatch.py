"""Guidance-driven randomized nearest-neighbor field search and voting.

The NNF maps every stride-1 target patch origin to a source patch
origin. Matching cost is a weighted SSD over the two guidance
channels (semantic mask and distance field); the style image itself
never enters the cost. Search follows the classic scheme: seeded
random init, then scanline propagation alternating direction per
iteration, interleaved with exponentially shrinking random search.
All replacement is strictly-better, so per-position cost never
increases and a fixed seed gives a bit-identical field.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError
from .patch_grid import MergeConfig, PatchSet, PatchSpec, merge_patches


@dataclass
class GuidanceStack:
    """Per-pixel matching guidance: semantic mask + distance field."""

    semantic: np.ndarray          # (H, W) uint8 {0,1}
    distance: np.ndarray          # (H, W) float64 in [0,1]
    w_sem: float = 1.0
    w_dist: float = 1.0
    _planes: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.semantic = np.asarray(self.semantic, dtype=np.uint8)
        self.distance = np.asarray(self.distance, dtype=np.float64)
        if self.semantic.shape != self.distance.shape:
            raise DimensionMismatchError(
                f"semantic {self.semantic.shape} vs distance {self.distance.shape}")
        if self.w_sem < 0 or self.w_dist < 0 or self.w_sem + self.w_dist <= 0:
            raise ValueError("channel weights must be non-negative with positive sum")

    @property
    def shape(self) -> tuple[int, int]:
        return self.semantic.shape

    @property
    def planes(self) -> np.ndarray:
        """(2, H, W) float64 stack of the two guidance channels."""
        if self._planes is None:
            self._planes = np.stack([self.semantic.astype(np.float64), self.distance])
        return self._planes


@dataclass(frozen=True)
class PatchMatchConfig:
    patch_size: int = 16
    iterations: int = 5
    random_search_decay: float = 0.5
    rng_seed: int = 0
    w_sem: float = 1.0
    w_dist: float = 1.0

    def __post_init__(self):
        if self.patch_size < 2:
            raise ValueError("patch_size must be at least 2")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if not 0.0 < self.random_search_decay < 1.0:
            raise ValueError("random_search_decay must lie in (0, 1)")


@dataclass
class NearestNeighborField:
    """Target-origin-grid correspondence into source patch origins.

    ``offsets[gy, gx]`` holds (dx, dy): the source origin for the
    target origin (gx, gy) is (gx + dx, gy + dy). ``costs`` caches
    ``patch_cost`` at each stored correspondence.
    """

    offsets: np.ndarray    # (H, W, 2) int32
    costs: np.ndarray      # (H, W) float64
    patch_size: int
    iteration: int = 0

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.costs.shape

    def total_cost(self) -> float:
        return float(self.costs.sum())

    def source_origin(self, gx: int, gy: int) -> tuple[int, int]:
        dx, dy = self.offsets[gy, gx]
        return gx + int(dx), gy + int(dy)


def patch_cost(source: GuidanceStack, target: GuidanceStack,
               src_origin: tuple[int, int], tgt_origin: tuple[int, int],
               patch_size: int) -> float:
    """Weighted SSD between guidance windows; 0 iff the windows match."""
    sx, sy = src_origin
    tx, ty = tgt_origin
    p = patch_size
    sh, sw = source.shape
    th, tw = target.shape
    if not (0 <= sx <= sw - p and 0 <= sy <= sh - p):
        raise ValueError(f"source window {src_origin} out of bounds for {source.shape}")
    if not (0 <= tx <= tw - p and 0 <= ty <= th - p):
        raise ValueError(f"target window {tgt_origin} out of bounds for {target.shape}")
    sp = source.planes[:, sy:sy + p, sx:sx + p]
    tp = target.planes[:, ty:ty + p, tx:tx + p]
    d = sp - tp
    sq = d * d
    return float(target.w_sem * sq[0].sum() + target.w_dist * sq[1].sum())


def _origin_bounds(source: GuidanceStack, patch_size: int) -> tuple[int, int]:
    sh, sw = source.shape
    if sh < patch_size or sw < patch_size:
        raise DimensionMismatchError(
            f"source {source.shape} smaller than patch size {patch_size}")
    return sw - patch_size, sh - patch_size


def _stack_with_weights(stack: GuidanceStack, config: PatchMatchConfig) -> GuidanceStack:
    if stack.w_sem == config.w_sem and stack.w_dist == config.w_dist:
        return stack
    return GuidanceStack(stack.semantic, stack.distance, config.w_sem, config.w_dist)


def nnf_random_init(source: GuidanceStack, target: GuidanceStack,
                    config: PatchMatchConfig) -> NearestNeighborField:
    """Assign every target origin a uniform random valid source origin."""
    source = _stack_with_weights(source, config)
    target = _stack_with_weights(target, config)
    p = config.patch_size
    sx_max, sy_max = _origin_bounds(source, p)
    th, tw = target.shape
    if th < p or tw < p:
        raise DimensionMismatchError(f"target {target.shape} smaller than patch size {p}")
    gh, gw = th - p + 1, tw - p + 1
    rng = np.random.default_rng(config.rng_seed)
    src_x = rng.integers(0, sx_max + 1, size=(gh, gw))
    src_y = rng.integers(0, sy_max + 1, size=(gh, gw))
    offsets = np.empty((gh, gw, 2), dtype=np.int32)
    offsets[..., 0] = src_x - np.arange(gw)[None, :]
    offsets[..., 1] = src_y - np.arange(gh)[:, None]
    costs = np.empty((gh, gw), dtype=np.float64)
    for gy in range(gh):
        for gx in range(gw):
            costs[gy, gx] = patch_cost(source, target,
                                       (int(src_x[gy, gx]), int(src_y[gy, gx])),
                                       (gx, gy), p)
    return NearestNeighborField(offsets=offsets, costs=costs, patch_size=p)


def nnf_iterate(nnf: NearestNeighborField, source: GuidanceStack,
                target: GuidanceStack, config: PatchMatchConfig) -> NearestNeighborField:
    """One propagation + random-search sweep; costs never increase.

    Odd iterations scan forward (top-left to bottom-right, pulling from
    left/up neighbors); even iterations scan in reverse. Random search
    samples around the current best with radius decaying by
    ``random_search_decay`` until it drops below one pixel.
    """
    source = _stack_with_weights(source, config)
    target = _stack_with_weights(target, config)
    p = nnf.patch_size
    sx_max, sy_max = _origin_bounds(source, p)
    gh, gw = nnf.grid_shape
    offsets = nnf.offsets.copy()
    costs = nnf.costs.copy()
    iteration = nnf.iteration + 1
    forward = iteration % 2 == 1
    rng = np.random.default_rng((config.rng_seed, iteration))
    radius0 = float(max(sx_max, sy_max))

    ys = range(gh) if forward else range(gh - 1, -1, -1)
    xs = range(gw) if forward else range(gw - 1, -1, -1)
    step = 1 if forward else -1
    for gy in ys:
        for gx in xs:
            best_cost = costs[gy, gx]
            best = offsets[gy, gx]
            # propagation: adopt a scan-neighbor's offset if strictly better
            for nx, ny in ((gx - step, gy), (gx, gy - step)):
                if not (0 <= nx < gw and 0 <= ny < gh):
                    continue
                dx, dy = offsets[ny, nx]
                cx, cy = gx + int(dx), gy + int(dy)
                if not (0 <= cx <= sx_max and 0 <= cy <= sy_max):
                    continue
                c = patch_cost(source, target, (cx, cy), (gx, gy), p)
                if c < best_cost:
                    best_cost = c
                    best = offsets[ny, nx]
            # exponential random search around the current best
            bx, by = gx + int(best[0]), gy + int(best[1])
            r = radius0
            while int(r) >= 1:
                ri = int(r)
                cx = int(np.clip(bx + rng.integers(-ri, ri + 1), 0, sx_max))
                cy = int(np.clip(by + rng.integers(-ri, ri + 1), 0, sy_max))
                c = patch_cost(source, target, (cx, cy), (gx, gy), p)
                if c < best_cost:
                    best_cost = c
                    best = np.array((cx - gx, cy - gy), dtype=np.int32)
                    bx, by = cx, cy
                r *= config.random_search_decay
            offsets[gy, gx] = best
            costs[gy, gx] = best_cost
    return NearestNeighborField(offsets=offsets, costs=costs, patch_size=p,
                                iteration=iteration)


def nnf_search(source: GuidanceStack, target: GuidanceStack,
               config: PatchMatchConfig) -> NearestNeighborField:
    """Random init followed by the configured number of sweeps."""
    nnf = nnf_random_init(source, target, config)
    for _ in range(config.iterations):
        nnf = nnf_iterate(nnf, source, target, config)
    return nnf


def synthesize_initial(source_style_frame0: np.ndarray, nnf: NearestNeighborField,
                       merge_sigma: float) -> np.ndarray:
    """Vote the matched style patches into the stylized initial frame."""
    style = np.asarray(source_style_frame0, dtype=np.float32)
    if style.ndim == 2:
        style = style[..., None]
    p = nnf.patch_size
    gh, gw = nnf.grid_shape
    sh, sw, channels = style.shape
    src_x = nnf.offsets[..., 0] + np.arange(gw)[None, :]
    src_y = nnf.offsets[..., 1] + np.arange(gh)[:, None]
    if src_x.min() < 0 or src_y.min() < 0 or (src_x > sw - p).any() or (src_y > sh - p).any():
        raise DimensionMismatchError("NNF source origins fall outside the style frame")
    patches = np.empty((gh * gw, p, p, channels), dtype=np.float32)
    origins = np.empty((gh * gw, 2), dtype=np.int32)
    i = 0
    for gy in range(gh):
        for gx in range(gw):
            patches[i] = style[src_y[gy, gx]:src_y[gy, gx] + p,
                               src_x[gy, gx]:src_x[gy, gx] + p]
            origins[i] = (gx, gy)
            i += 1
    patch_set = PatchSet(patches=patches, origins=origins, frame_index=0,
                         source_dims=(gh + p - 1, gw + p - 1))
    return merge_patches(patch_set, PatchSpec(patch_size=p, stride=1),
                         MergeConfig(sigma=merge_sigma))


# ------------------------------------------------------------------
# debug dump (DXNF)
# ------------------------------------------------------------------

_NNF_MAGIC = b"DXNF"
_NNF_VERSION = 1


def save_nnf(path: str | Path, nnf: NearestNeighborField) -> None:
    """Write the field as a little-endian DXNF binary dump."""
    gh, gw = nnf.grid_shape
    with open(path, "wb") as fh:
        fh.write(_NNF_MAGIC)
        fh.write(struct.pack("<HIII", _NNF_VERSION, gh, gw, nnf.patch_size))
        rec = np.empty((gh, gw), dtype=np.dtype([("dx", "<i4"), ("dy", "<i4"), ("cost", "<f4")]))
        rec["dx"] = nnf.offsets[..., 0]
        rec["dy"] = nnf.offsets[..., 1]
        rec["cost"] = nnf.costs
        fh.write(rec.tobytes())


def load_nnf(path: str | Path) -> NearestNeighborField:
    """Read a DXNF dump; costs come back as the stored float32 values."""
    with open(path, "rb") as fh:
        if fh.read(4) != _NNF_MAGIC:
            raise ValueError(f"{path}: not a DXNF dump")
        version, gh, gw, p = struct.unpack("<HIII", fh.read(14))
        if version != _NNF_VERSION:
            raise ValueError(f"{path}: unsupported DXNF version {version}")
        rec = np.frombuffer(fh.read(gh * gw * 12),
                            dtype=np.dtype([("dx", "<i4"), ("dy", "<i4"), ("cost", "<f4")]))
    rec = rec.reshape(gh, gw)
    offsets = np.stack([rec["dx"], rec["dy"]], axis=-1).astype(np.int32)
    costs = rec["cost"].astype(np.float64)
    return NearestNeighborField(offsets=offsets, costs=costs, patch_size=p)
