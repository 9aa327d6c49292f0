"""End-to-end orchestration: stage functions, manifest, evaluation.

Each stage reads only the config paths and artifacts written by
earlier stages, so any stage can be re-run in isolation from disk and
reproduce the full-run result exactly. Artifact layout under the
output directory:

    distance_source.npy / distance_target.npy   stage 1 (+ 16-bit PNGs)
    nnf.dxnf, frames/frame_0000.png             stage 2
    vqvae.dytx, vqvae_log.txt                   stage 3
    tokens_source.dxtk                          stage 4 (encode)
    gpt.dytx, gpt_log.txt                       stage 5 (train-forecaster)
    tokens_predicted.dxtk                       stage 6 (predict)
    frames/frame_0001.png ...                   stage 7 (merge)
    manifest.txt                                full runs only
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import forecaster as fc
from . import imagery, patchmatch, vqvae
from .config import PipelineConfig
from .errors import DytexError, NeedSubsequentFramesError, StageError
from .ncore import Tensor
from .patch_grid import MergeConfig, PatchSet, PatchSpec, cut_patches, merge_patches

STAGES = ("distance-map", "transfer-initial", "train-vqvae", "encode",
          "train-forecaster", "predict", "merge")


@dataclass(frozen=True)
class CropRecord:
    """Original dimensions to restore after grid padding."""

    height: int
    width: int

    def crop(self, image: np.ndarray) -> np.ndarray:
        return image[:self.height, :self.width]


def pad_to_grid(image: np.ndarray, spec: PatchSpec,
                mode: str = "reflect") -> tuple[np.ndarray, CropRecord]:
    """Pad right/bottom to the next size the patch grid tiles exactly."""
    arr = np.asarray(image)
    h, w = arr.shape[:2]
    p, s = spec.patch_size, spec.stride

    def pad_amount(n: int) -> int:
        if n < p:
            return p - n
        return (-(n - p)) % s

    ph, pw = pad_amount(h), pad_amount(w)
    if ph == 0 and pw == 0:
        return arr, CropRecord(h, w)
    pad_mode = mode
    if mode == "reflect" and (ph >= h or pw >= w):
        pad_mode = "edge"  # reflect needs pad < dim
    widths = [(0, ph), (0, pw)] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, widths, mode=pad_mode), CropRecord(h, w)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _frames_dir(cfg: PipelineConfig) -> Path:
    return cfg.output / "frames"


# ------------------------------------------------------------------
# stages
# ------------------------------------------------------------------

def stage_distance_maps(cfg: PipelineConfig) -> dict[str, float]:
    """Stage 1: masks -> normalized contour distance fields."""
    cfg.output.mkdir(parents=True, exist_ok=True)
    metrics = {}
    for label, mask_path in (("source", cfg.source_mask), ("target", cfg.target_mask)):
        mask = imagery.load_mask(mask_path)
        dist = imagery.distance_map(mask)
        np.save(cfg.output / f"distance_{label}.npy", dist)
        imagery.save_distance_field(cfg.output / f"distance_{label}.png", dist)
        metrics[f"{label}_mean_distance"] = float(dist.mean())
    return metrics


def _load_guidance(cfg: PipelineConfig, label: str, mask_path: Path) -> patchmatch.GuidanceStack:
    dist = np.load(cfg.output / f"distance_{label}.npy")
    return patchmatch.GuidanceStack(imagery.load_mask(mask_path), dist,
                                    cfg.patchmatch.w_sem, cfg.patchmatch.w_dist)


def stage_initial_frame(cfg: PipelineConfig) -> dict[str, float]:
    """Stage 2: guided NNF search, then vote the stylized initial frame."""
    source = _load_guidance(cfg, "source", cfg.source_mask)
    target = _load_guidance(cfg, "target", cfg.target_mask)
    frames = imagery.load_frame_sequence(cfg.source_video)
    if frames.shape[1:3] != source.shape:
        raise DytexError(f"source mask {source.shape} does not match frames "
                         f"{frames.shape[1:3]}")
    nnf = patchmatch.nnf_search(source, target, cfg.patchmatch)
    patchmatch.save_nnf(cfg.output / "nnf.dxnf", nnf)
    initial = patchmatch.synthesize_initial(frames[0], nnf, cfg.merge.sigma)
    imagery.save_image(_frames_dir(cfg) / "frame_0000.png", initial)
    return {"nnf_mean_cost": float(nnf.costs.mean())}


def _source_patch_stack(cfg: PipelineConfig) -> tuple[np.ndarray, np.ndarray, int]:
    """All source patches as (F+1, P, p, p, C) plus origins and F."""
    frames = imagery.load_frame_sequence(cfg.source_video)
    if frames.shape[0] < 2:
        raise NeedSubsequentFramesError("source video needs at least 2 frames")
    padded = [pad_to_grid(f, cfg.patches, cfg.padding)[0] for f in frames]
    sets = [cut_patches(pf, cfg.patches, frame_index=i) for i, pf in enumerate(padded)]
    stack = np.stack([s.patches for s in sets])
    return stack, sets[0].origins, frames.shape[0] - 1


def stage_train_vqvae(cfg: PipelineConfig) -> dict[str, float]:
    """Stage 3: fit the patch codec on every source frame's patches."""
    stack, _, _ = _source_patch_stack(cfg)
    all_patches = stack.reshape((-1,) + stack.shape[2:])
    model_cfg = replace(cfg.vqvae_model, channels=all_patches.shape[-1])
    params, log = vqvae.train_vqvae(all_patches, model_cfg, cfg.vqvae_train)
    vqvae.save_vqvae(cfg.output / "vqvae.dytx", params)
    lines = [f"step {s} recon {r:.6f} codebook {c:.6f} commit {m:.6f}"
             for s, r, c, m in log.entries]
    lines.append(f"holdout_mse {log.holdout_mse:.6f}")
    used = int((log.codebook_usage > 0).sum()) if log.codebook_usage is not None else 0
    lines.append(f"codebook_used {used}")
    (cfg.output / "vqvae_log.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"vqvae_holdout_mse": log.holdout_mse,
            "vqvae_final_recon": log.final_recon(),
            "vqvae_codebook_used": float(used)}


def stage_encode(cfg: PipelineConfig) -> dict[str, float]:
    """Stage 4: encode all source patches into the token stream."""
    stack, _, n_subsequent = _source_patch_stack(cfg)
    params = vqvae.load_vqvae(cfg.output / "vqvae.dytx")
    n_frames, locations = stack.shape[0], stack.shape[1]
    block = np.empty((locations, n_frames, vqvae.GRID_CELLS), dtype=np.int64)
    for f in range(n_frames):
        block[:, f] = vqvae.encode_indices(stack[f], params)
    vqvae.save_tokens(cfg.output / "tokens_source.dxtk", block,
                      params.config.codebook_size)
    return {"token_locations": float(locations),
            "token_frames": float(n_frames),
            "subsequent_frames": float(n_subsequent)}


def _forecaster_model_config(cfg: PipelineConfig, codebook_size: int,
                             n_frames: int) -> fc.ForecasterConfig:
    return replace(cfg.forecaster_model, vocab=codebook_size,
                   max_len=n_frames * vqvae.GRID_CELLS)


def stage_train_forecaster(cfg: PipelineConfig) -> dict[str, float]:
    """Stage 5: teacher-forced training on the source token sequences."""
    block, codebook_size = vqvae.load_tokens(cfg.output / "tokens_source.dxtk")
    dataset = fc.build_dataset(block)
    model_cfg = _forecaster_model_config(cfg, codebook_size, block.shape[1])
    params, log = fc.train_forecaster(dataset, model_cfg, cfg.forecaster_train)
    fc.save_forecaster(cfg.output / "gpt.dytx", params)
    (cfg.output / "gpt_log.txt").write_text("\n".join(log.lines()) + "\n", encoding="utf-8")
    return {"forecaster_accuracy": log.final_accuracy,
            "forecaster_steps": float(log.steps_run)}


def stage_predict(cfg: PipelineConfig) -> dict[str, float]:
    """Stage 6: encode the synthesized initial frame, forecast the rest."""
    block, codebook_size = vqvae.load_tokens(cfg.output / "tokens_source.dxtk")
    n_frames = block.shape[1]
    if n_frames < 2:
        raise NeedSubsequentFramesError("need at least one subsequent frame to predict")
    params = vqvae.load_vqvae(cfg.output / "vqvae.dytx")
    initial = imagery.load_image(_frames_dir(cfg) / "frame_0000.png")
    padded, _ = pad_to_grid(initial, cfg.patches, cfg.padding)
    patches = cut_patches(padded, cfg.patches)
    grids = vqvae.encode_indices(patches.patches, params)
    gpt = fc.load_forecaster(cfg.output / "gpt.dytx")
    sampler = cfg.sampler
    predicted = np.empty((len(grids), n_frames, vqvae.GRID_CELLS), dtype=np.int64)
    chunk = 64
    for lo in range(0, len(grids), chunk):
        rows = fc.predict_batch(grids[lo:lo + chunk], n_frames - 1, gpt,
                                replace(sampler, rng_seed=sampler.rng_seed + lo))
        predicted[lo:lo + chunk] = rows.reshape(-1, n_frames, vqvae.GRID_CELLS)
    vqvae.save_tokens(cfg.output / "tokens_predicted.dxtk", predicted, codebook_size)
    return {"predicted_locations": float(len(grids))}


def stage_merge(cfg: PipelineConfig) -> dict[str, float]:
    """Stage 7: decode predicted tokens and merge frames 1..F."""
    block, _ = vqvae.load_tokens(cfg.output / "tokens_predicted.dxtk")
    params = vqvae.load_vqvae(cfg.output / "vqvae.dytx")
    target_mask = imagery.load_mask(cfg.target_mask)
    padded_mask, crop = pad_to_grid(target_mask, cfg.patches, cfg.padding)
    rows, cols = cfg.patches.grid_shape(*padded_mask.shape)
    if rows * cols != block.shape[0]:
        raise DytexError(f"token file has {block.shape[0]} locations, target grid "
                         f"needs {rows * cols}")
    origins = np.array([(gx * cfg.patches.stride, gy * cfg.patches.stride)
                        for gy in range(rows) for gx in range(cols)], dtype=np.int32)
    n_frames = block.shape[1]
    for f in range(1, n_frames):
        idx = block[:, f]
        z_q = params.codebook.data[idx.reshape(-1)].reshape(
            -1, vqvae.GRID_EDGE, vqvae.GRID_EDGE, params.config.embed_dim).transpose(0, 3, 1, 2)
        decoded = []
        for lo in range(0, len(z_q), 256):
            out = vqvae.decode_graph(Tensor(z_q[lo:lo + 256]), params)
            decoded.append(out.data.transpose(0, 2, 3, 1))
        patches = np.clip(np.concatenate(decoded), 0.0, 1.0)
        patch_set = PatchSet(patches=patches, origins=origins, frame_index=f,
                             source_dims=padded_mask.shape)
        merged = merge_patches(patch_set, cfg.patches, cfg.merge)
        imagery.save_image(_frames_dir(cfg) / f"frame_{f:04d}.png", crop.crop(merged))
    return {"merged_frames": float(n_frames - 1)}


_STAGE_FUNCS = {
    "distance-map": stage_distance_maps,
    "transfer-initial": stage_initial_frame,
    "train-vqvae": stage_train_vqvae,
    "encode": stage_encode,
    "train-forecaster": stage_train_forecaster,
    "predict": stage_predict,
    "merge": stage_merge,
}


def run_stage(name: str, cfg: PipelineConfig) -> dict[str, float]:
    if name not in _STAGE_FUNCS:
        raise ValueError(f"unknown stage {name!r}; choose from {STAGES}")
    return _STAGE_FUNCS[name](cfg)


# ------------------------------------------------------------------
# full run + manifest
# ------------------------------------------------------------------

_DIGEST_FILES = ("nnf.dxnf", "vqvae.dytx", "tokens_source.dxtk", "gpt.dytx",
                 "tokens_predicted.dxtk")


def write_manifest(cfg: PipelineConfig, metrics: dict[str, float],
                   timings: dict[str, float], status: str = "ok",
                   failed_stage: str | None = None, threads: int = 1) -> Path:
    """Emit manifest.txt; ``time.*`` lines are excluded from byte-identity."""
    lines = [f"status = {status}"]
    if failed_stage:
        lines.append(f"failed_stage = {failed_stage}")
    lines.append(f"threads = {threads}")
    lines += [f"{k} = {v}" for k, v in cfg.manifest_items()]
    for key in sorted(metrics):
        lines.append(f"metric.{key} = {metrics[key]:.10g}")
    frames = sorted(_frames_dir(cfg).glob("frame_*.png")) if _frames_dir(cfg).is_dir() else []
    for path in [cfg.output / f for f in _DIGEST_FILES] + frames:
        if path.is_file():
            lines.append(f"digest.{path.name} = {_sha256(path)}")
    for key in sorted(timings):
        lines.append(f"time.{key} = {timings[key]:.3f}")
    manifest = cfg.output / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if " = " in line:
            key, value = line.split(" = ", 1)
            out[key] = value
    return out


def run_transfer(cfg: PipelineConfig, threads: int = 1) -> tuple[np.ndarray, Path]:
    """Execute every stage in order; returns output frames and manifest path.

    Any stage failure is re-raised as ``StageError`` after a manifest
    flagging the partial outputs is written.
    """
    cfg.validate_paths()
    frames = imagery.load_frame_sequence(cfg.source_video)
    if frames.shape[0] < 2:
        raise NeedSubsequentFramesError(
            f"source video has {frames.shape[0]} frame(s); need an initial frame "
            "plus at least one subsequent frame")
    cfg.output.mkdir(parents=True, exist_ok=True)
    metrics: dict[str, float] = {}
    timings: dict[str, float] = {}
    for name in STAGES:
        started = time.perf_counter()
        try:
            metrics.update(run_stage(name, cfg))
        except Exception as exc:
            write_manifest(cfg, metrics, timings, status="failed",
                           failed_stage=name, threads=threads)
            raise StageError(name, exc) from exc
        timings[name] = time.perf_counter() - started
    manifest = write_manifest(cfg, metrics, timings, threads=threads)
    out_frames = imagery.load_frame_sequence(_frames_dir(cfg))
    return out_frames, manifest


# ------------------------------------------------------------------
# evaluation
# ------------------------------------------------------------------

@dataclass
class EvalReport:
    forecaster_accuracy: float
    vqvae_holdout_mse: float
    nnf_mean_cost: float
    output_frame_delta: float
    source_frame_delta: float

    def lines(self) -> list[str]:
        return [
            f"forecaster_validation_accuracy = {self.forecaster_accuracy:.4f}",
            f"vqvae_holdout_mse = {self.vqvae_holdout_mse:.6f}",
            f"nnf_mean_final_cost = {self.nnf_mean_cost:.6f}",
            f"temporal_delta_output = {self.output_frame_delta:.6f}",
            f"temporal_delta_source = {self.source_frame_delta:.6f}",
        ]


def _mean_frame_delta(frames: np.ndarray) -> float:
    if frames.shape[0] < 2:
        return 0.0
    return float(np.abs(np.diff(frames.astype(np.float64), axis=0)).mean())


def evaluate(cfg: PipelineConfig) -> EvalReport:
    """Recompute run metrics from the artifacts in the output directory."""
    for artifact in ("vqvae.dytx", "gpt.dytx", "tokens_source.dxtk", "nnf.dxnf"):
        if not (cfg.output / artifact).is_file():
            raise DytexError(f"missing artifact for evaluation: {artifact}")

    block, _ = vqvae.load_tokens(cfg.output / "tokens_source.dxtk")
    gpt = fc.load_forecaster(cfg.output / "gpt.dytx")
    dataset = fc.build_dataset(block)
    rng = np.random.default_rng(cfg.forecaster_train.seed)
    _ = fc.init_forecaster(gpt.config, rng)  # consume init draws as training did
    order = rng.permutation(len(dataset))
    n_val = min(int(round(len(dataset) * cfg.forecaster_train.val_fraction)),
                len(dataset) - 1)
    val = [dataset[i] for i in order[:n_val]] if n_val else dataset
    acc = fc.accuracy(gpt, val)

    stack, _, _ = _source_patch_stack(cfg)
    all_patches = stack.reshape((-1,) + stack.shape[2:])
    vq = vqvae.load_vqvae(cfg.output / "vqvae.dytx")
    vq_rng = np.random.default_rng(cfg.vqvae_train.seed)
    _ = vqvae.init_vqvae(vq.config, vq_rng)
    vq_order = vq_rng.permutation(len(all_patches))
    n_hold = min(max(int(round(len(all_patches) * cfg.vqvae_train.holdout_fraction)), 0),
                 len(all_patches) - 1)
    holdout = all_patches[vq_order[:n_hold]] if n_hold else all_patches
    rec = vqvae.reconstruct(holdout, vq)
    mse = float(np.mean((rec - holdout) ** 2))

    nnf = patchmatch.load_nnf(cfg.output / "nnf.dxnf")
    out_frames = imagery.load_frame_sequence(_frames_dir(cfg))
    src_frames = imagery.load_frame_sequence(cfg.source_video)
    return EvalReport(
        forecaster_accuracy=acc,
        vqvae_holdout_mse=mse,
        nnf_mean_cost=float(nnf.costs.mean()),
        output_frame_delta=_mean_frame_delta(out_frames),
        source_frame_delta=_mean_frame_delta(src_frames),
    )
