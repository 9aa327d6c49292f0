"""Patch codec: convolutional encoder/decoder with a learned codebook.

Each 16x16 patch is encoded to a 4x4 grid of embeddings, quantized to
the nearest codebook entries (16 indices per patch), and decoded back.
Training minimizes reconstruction + codebook + commitment terms with a
straight-through estimator across the quantization step.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, NonFiniteGradientError
from .ncore import (Tape, Tensor, adam_step, backward, conv2d,
                    conv2d_transpose, embedding, init_adam, leaf, relu,
                    stop_gradient)
from .ncore.tensor import tensor_mean
from .patch_grid import PatchSet

PATCH_EDGE = 16
GRID_EDGE = 4
GRID_CELLS = GRID_EDGE * GRID_EDGE


@dataclass(frozen=True)
class VqvaeConfig:
    channels: int = 3
    hidden: int = 32
    embed_dim: int = 64          # D
    codebook_size: int = 256     # number of entries
    beta: float = 0.25           # commitment coefficient

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ValueError("codebook needs at least 2 entries")
        if self.codebook_size > 65535:
            raise ValueError("codebook too large for u16 token files")


@dataclass
class ResBlockParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class VqvaeParams:
    config: VqvaeConfig
    enc_in_w: Tensor
    enc_in_b: Tensor
    enc_down_w: Tensor
    enc_down_b: Tensor
    enc_res: list[ResBlockParams]
    dec_res: list[ResBlockParams]
    dec_up_w: Tensor
    dec_up_b: Tensor
    dec_out_w: Tensor
    dec_out_b: Tensor
    codebook: Tensor

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("vqvae/enc_in_w", self.enc_in_w), ("vqvae/enc_in_b", self.enc_in_b),
               ("vqvae/enc_down_w", self.enc_down_w), ("vqvae/enc_down_b", self.enc_down_b)]
        for i, blk in enumerate(self.enc_res):
            for nm in ("w1", "b1", "w2", "b2"):
                out.append((f"vqvae/enc_res{i}_{nm}", getattr(blk, nm)))
        for i, blk in enumerate(self.dec_res):
            for nm in ("w1", "b1", "w2", "b2"):
                out.append((f"vqvae/dec_res{i}_{nm}", getattr(blk, nm)))
        out += [("vqvae/dec_up_w", self.dec_up_w), ("vqvae/dec_up_b", self.dec_up_b),
                ("vqvae/dec_out_w", self.dec_out_w), ("vqvae/dec_out_b", self.dec_out_b),
                ("vqvae/codebook", self.codebook)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]


def init_vqvae(config: VqvaeConfig, rng: np.random.Generator) -> VqvaeParams:
    """Fresh parameters: normal(0, 0.02) weights, zero biases,
    normal(0, 1/sqrt(D)) codebook."""
    c, h, d = config.channels, config.hidden, config.embed_dim

    def w(shape):
        return leaf(rng.normal(0.0, 0.02, size=shape).astype(np.float32))

    def b(n):
        return leaf(np.zeros(n, dtype=np.float32))

    def res(width):
        return ResBlockParams(w1=w((width, width, 3, 3)), b1=b(width),
                              w2=w((width, width, 3, 3)), b2=b(width))

    codebook = leaf((rng.normal(0.0, 1.0, size=(config.codebook_size, d))
                     / np.sqrt(d)).astype(np.float32))
    return VqvaeParams(
        config=config,
        enc_in_w=w((h, c, 4, 4)), enc_in_b=b(h),
        enc_down_w=w((d, h, 4, 4)), enc_down_b=b(d),
        enc_res=[res(d) for _ in range(3)],
        dec_res=[res(d) for _ in range(3)],
        dec_up_w=w((d, h, 4, 4)), dec_up_b=b(h),
        dec_out_w=w((h, c, 4, 4)), dec_out_b=b(c),
        codebook=codebook,
    )


def _res_forward(x: Tensor, blk: ResBlockParams) -> Tensor:
    h = conv2d(relu(x), blk.w1, blk.b1, stride=1, padding=1)
    h = conv2d(relu(h), blk.w2, blk.b2, stride=1, padding=1)
    return x + h


def encode_graph(x: Tensor, params: VqvaeParams) -> Tensor:
    """(N, C, 16, 16) -> (N, D, 4, 4) via two stride-2 convs + 3 res blocks."""
    if x.shape[2] != PATCH_EDGE or x.shape[3] != PATCH_EDGE:
        raise DimensionMismatchError(f"expected {PATCH_EDGE}x{PATCH_EDGE} patches, got {x.shape}")
    h = relu(conv2d(x, params.enc_in_w, params.enc_in_b, stride=2, padding=1))
    h = conv2d(h, params.enc_down_w, params.enc_down_b, stride=2, padding=1)
    for blk in params.enc_res:
        h = _res_forward(h, blk)
    return h


def decode_graph(z: Tensor, params: VqvaeParams) -> Tensor:
    """(N, D, 4, 4) -> (N, C, 16, 16); mirror of the encoder."""
    h = z
    for blk in params.dec_res:
        h = _res_forward(h, blk)
    h = relu(conv2d_transpose(h, params.dec_up_w, params.dec_up_b, stride=2, padding=1))
    return conv2d_transpose(h, params.dec_out_w, params.dec_out_b, stride=2, padding=1)


def nearest_indices(cells: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Exhaustive nearest-entry indices for (M, D) cells; ties go to the
    lowest index (argmin keeps the first minimum).

    Distances are per-entry squared differences summed over D, the same
    arithmetic as a one-entry-at-a-time scan, so forced ties resolve
    identically. Cells are processed in chunks only to bound the
    temporary (chunk, entries, D) buffer.
    """
    if cells.shape[1] != codebook.shape[1]:
        raise DimensionMismatchError(
            f"cell width {cells.shape[1]} != codebook width {codebook.shape[1]}")
    out = np.empty(cells.shape[0], dtype=np.int64)
    chunk = max(1, (1 << 21) // max(1, codebook.size))
    for lo in range(0, cells.shape[0], chunk):
        diff = cells[lo:lo + chunk, None, :] - codebook[None, :, :]
        np.square(diff, out=diff)
        out[lo:lo + chunk] = diff.sum(axis=-1).argmin(axis=1)
    return out


def quantize(z_e: np.ndarray, codebook: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Snap a (4, 4, D) encoding to the codebook.

    Returns the quantized (4, 4, D) array and the flat row-major grid of
    16 indices.
    """
    z_e = np.asarray(z_e)
    if z_e.shape[:2] != (GRID_EDGE, GRID_EDGE):
        raise DimensionMismatchError(f"expected (4, 4, D) encoding, got {z_e.shape}")
    cells = z_e.reshape(GRID_CELLS, -1)
    idx = nearest_indices(cells, np.asarray(codebook))
    z_q = np.asarray(codebook)[idx].reshape(z_e.shape)
    return z_q, idx.astype(np.int64)


def encode(patch: np.ndarray, params: VqvaeParams) -> np.ndarray:
    """Encode one (16, 16, C) patch to its (4, 4, D) embedding grid."""
    x = np.asarray(patch, dtype=np.float32)
    if x.ndim == 2:
        x = x[..., None]
    z = encode_graph(Tensor(x.transpose(2, 0, 1)[None]), params)
    return z.data[0].transpose(1, 2, 0)


def decode(z_q: np.ndarray, params: VqvaeParams) -> np.ndarray:
    """Decode one (4, 4, D) grid back to a (16, 16, C) patch."""
    z = np.asarray(z_q, dtype=np.float32).transpose(2, 0, 1)[None]
    y = decode_graph(Tensor(z), params)
    return y.data[0].transpose(1, 2, 0)


def indices_to_patch(grid: np.ndarray, params: VqvaeParams) -> np.ndarray:
    """Recover a patch from its 16 codebook indices (lookup, then decode)."""
    idx = np.asarray(grid).reshape(GRID_CELLS)
    size = params.config.codebook_size
    if (idx < 0).any() or (idx >= size).any():
        raise IndexError(f"token index out of range [0, {size})")
    z_q = params.codebook.data[idx].reshape(GRID_EDGE, GRID_EDGE, -1)
    return decode(z_q, params)


def _cells_from_map(z: Tensor) -> Tensor:
    n = z.shape[0]
    return z.transpose(0, 2, 3, 1).reshape(n * GRID_CELLS, z.shape[1])


def _map_from_cells(cells: Tensor, n: int, d: int) -> Tensor:
    return cells.reshape(n, GRID_EDGE, GRID_EDGE, d).transpose(0, 3, 1, 2)


def vqvae_loss(x: Tensor, params: VqvaeParams):
    """Total training objective and its three terms (per-element means).

    Returns (total, recon, codebook_term, commit, indices,
    reconstruction). Gradient routing: the reconstruction term reaches
    the decoder and (straight-through) the encoder, the codebook term
    only the codebook, the commitment term only the encoder.
    """
    n, d = x.shape[0], params.config.embed_dim
    z_e = encode_graph(x, params)
    cells = _cells_from_map(z_e)
    idx = nearest_indices(cells.data, params.codebook.data)
    z_q = embedding(params.codebook, idx)
    codebook_term = tensor_mean((stop_gradient(cells) - z_q) ** 2.0)
    commit = tensor_mean((stop_gradient(z_q) - cells) ** 2.0)
    straight = cells + stop_gradient(z_q - cells)
    recon_map = decode_graph(_map_from_cells(straight, n, d), params)
    recon = tensor_mean((x - recon_map) ** 2.0)
    total = recon + codebook_term + params.config.beta * commit
    return total, recon, codebook_term, commit, idx, recon_map


def encode_indices(patches: np.ndarray, params: VqvaeParams,
                   batch_size: int = 256) -> np.ndarray:
    """Token grids for (n, 16, 16, C) patches; returns (n, 16) indices."""
    patches = np.asarray(patches, dtype=np.float32)
    n = patches.shape[0]
    out = np.empty((n, GRID_CELLS), dtype=np.int64)
    for lo in range(0, n, batch_size):
        chunk = patches[lo:lo + batch_size].transpose(0, 3, 1, 2)
        z = encode_graph(Tensor(chunk), params)
        cells = z.data.transpose(0, 2, 3, 1).reshape(-1, params.config.embed_dim)
        out[lo:lo + batch_size] = nearest_indices(
            cells, params.codebook.data).reshape(-1, GRID_CELLS)
    return out


def reconstruct(patches: np.ndarray, params: VqvaeParams,
                batch_size: int = 256) -> np.ndarray:
    """Round-trip patches through encode -> quantize -> decode."""
    patches = np.asarray(patches, dtype=np.float32)
    out = np.empty_like(patches)
    for lo in range(0, len(patches), batch_size):
        idx = encode_indices(patches[lo:lo + batch_size], params, batch_size=batch_size)
        z_q = params.codebook.data[idx.reshape(-1)].reshape(
            -1, GRID_EDGE, GRID_EDGE, params.config.embed_dim).transpose(0, 3, 1, 2)
        y = decode_graph(Tensor(z_q), params)
        out[lo:lo + len(idx)] = y.data.transpose(0, 2, 3, 1)
    return out


@dataclass
class VqvaeTrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    holdout_fraction: float = 0.1
    log_every: int = 50


@dataclass
class VqvaeTrainLog:
    entries: list[tuple[int, float, float, float]] = field(default_factory=list)
    holdout_mse: float = float("nan")
    codebook_usage: np.ndarray | None = None

    def final_recon(self) -> float:
        return self.entries[-1][1] if self.entries else float("nan")


def train_vqvae(patches: np.ndarray | PatchSet, model_config: VqvaeConfig,
                train_config: VqvaeTrainConfig) -> tuple[VqvaeParams, VqvaeTrainLog]:
    """Fit the codec on a patch set; deterministic for a fixed seed.

    A seeded holdout split is reserved for the reported reconstruction
    MSE. Aborts with ``NonFiniteGradientError`` (message includes the
    step) if training diverges.
    """
    if isinstance(patches, PatchSet):
        patches = patches.patches
    patches = np.asarray(patches, dtype=np.float32)
    if patches.ndim != 4 or patches.shape[1] != PATCH_EDGE or patches.shape[2] != PATCH_EDGE:
        raise DimensionMismatchError(f"expected (n, 16, 16, C) patches, got {patches.shape}")
    n = patches.shape[0]
    if n < 1:
        raise ValueError("need at least one patch")

    rng = np.random.default_rng(train_config.seed)
    params = init_vqvae(model_config, rng)
    order = rng.permutation(n)
    n_hold = min(max(int(round(n * train_config.holdout_fraction)), 0), n - 1)
    hold_idx, train_idx = order[:n_hold], order[n_hold:]
    train_set = patches[train_idx]

    plist = params.parameters()
    state = init_adam(plist, lr=train_config.lr)
    log = VqvaeTrainLog()
    for step in range(1, train_config.steps + 1):
        pick = rng.integers(0, len(train_set), size=train_config.batch_size)
        x = Tensor(train_set[pick].transpose(0, 3, 1, 2))
        for p in plist:
            p.grad = None
        with Tape() as tape:
            total, recon, cb_term, commit, _, _ = vqvae_loss(x, params)
        backward(total, tape)
        try:
            adam_step(plist, [p.grad for p in plist], state)
        except NonFiniteGradientError as exc:
            raise NonFiniteGradientError(f"step {step}: {exc}") from exc
        if step % train_config.log_every == 0 or step == train_config.steps:
            log.entries.append((step, recon.item(), cb_term.item(), commit.item()))

    holdout = patches[hold_idx] if n_hold else train_set
    rec = reconstruct(holdout, params)
    log.holdout_mse = float(np.mean((rec - holdout) ** 2))
    usage_idx = encode_indices(patches, params)
    log.codebook_usage = np.bincount(usage_idx.reshape(-1),
                                     minlength=model_config.codebook_size)
    return params, log


# ------------------------------------------------------------------
# checkpoint + token stream formats
# ------------------------------------------------------------------

def save_vqvae(path: str | Path, params: VqvaeParams) -> None:
    from .ncore.checkpoint import save_tensors
    named = {name: t.data for name, t in params.named_tensors()}
    named["vqvae/meta"] = np.asarray(
        [params.config.channels, params.config.hidden, params.config.embed_dim,
         params.config.codebook_size, params.config.beta], dtype=np.float32)
    save_tensors(path, named)


def load_vqvae(path: str | Path) -> VqvaeParams:
    from .ncore.checkpoint import load_tensors
    named = load_tensors(path)
    meta = named.pop("vqvae/meta")
    config = VqvaeConfig(channels=int(meta[0]), hidden=int(meta[1]),
                         embed_dim=int(meta[2]), codebook_size=int(meta[3]),
                         beta=float(meta[4]))
    params = init_vqvae(config, np.random.default_rng(0))
    for name, tensor in params.named_tensors():
        if name not in named:
            raise ValueError(f"checkpoint missing tensor {name}")
        if named[name].shape != tensor.data.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {named[name].shape}, "
                             f"expected {tensor.data.shape}")
        tensor.data = named[name].astype(np.float32)
    return params


TOKEN_MAGIC = b"DXTK"
TOKEN_VERSION = 1


def save_tokens(path: str | Path, indices: np.ndarray, codebook_size: int) -> None:
    """Write a (locations, frames, 16) token block as a DXTK file.

    Layout is patch-major, frame-minor: all frames of location 0, then
    all frames of location 1, and so on; u16 little-endian indices.
    """
    arr = np.asarray(indices)
    if arr.ndim != 3 or arr.shape[2] != GRID_CELLS:
        raise ValueError(f"expected (locations, frames, {GRID_CELLS}) tokens, got {arr.shape}")
    if (arr < 0).any() or (arr >= codebook_size).any():
        raise ValueError("token index out of codebook range")
    with open(path, "wb") as fh:
        fh.write(TOKEN_MAGIC)
        fh.write(struct.pack("<HIII", TOKEN_VERSION, codebook_size, arr.shape[0], arr.shape[1]))
        fh.write(np.ascontiguousarray(arr, dtype="<u2").tobytes())


def load_tokens(path: str | Path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        if fh.read(4) != TOKEN_MAGIC:
            raise ValueError(f"{path}: not a DXTK token file")
        version, size, locations, frames = struct.unpack("<HIII", fh.read(14))
        if version != TOKEN_VERSION:
            raise ValueError(f"{path}: unsupported DXTK version {version}")
        data = np.frombuffer(fh.read(locations * frames * GRID_CELLS * 2), dtype="<u2")
    return data.reshape(locations, frames, GRID_CELLS).astype(np.int64), size
