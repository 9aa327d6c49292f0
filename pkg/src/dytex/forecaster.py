"""Autoregressive forecasting of per-location patch-token sequences.

Every patch location contributes one training sequence: the 16 tokens
of each frame, frame-major, frame 0 first. A small causal transformer
(pre-norm blocks, learned positional embeddings) is trained with
teacher forcing; the 16 initial-frame tokens are conditioning context
and are excluded from the loss. Generation runs incrementally with a
per-layer key/value cache, greedy by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NonFiniteGradientError
from .ncore import (AttentionParams, Tape, Tensor, adam_step, backward,
                    cross_entropy, embedding, gelu, init_adam, layer_norm,
                    leaf, linear, multi_head_attention)
from .vqvae import GRID_CELLS

_LN_EPS = 1e-5


@dataclass(frozen=True)
class ForecasterConfig:
    vocab: int = 256
    layers: int = 6
    heads: int = 8
    d_model: int = 128
    max_len: int = 512

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttentionParams
    ln2_g: Tensor
    ln2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


@dataclass
class ForecasterParams:
    config: ForecasterConfig
    tok_emb: Tensor
    pos_emb: Tensor
    blocks: list[BlockParams]
    lnf_g: Tensor
    lnf_b: Tensor
    head_w: Tensor
    head_b: Tensor

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("gpt/tok_emb", self.tok_emb), ("gpt/pos_emb", self.pos_emb)]
        for i, blk in enumerate(self.blocks):
            out += [(f"gpt/b{i}_ln1_g", blk.ln1_g), (f"gpt/b{i}_ln1_b", blk.ln1_b)]
            out += [(f"gpt/b{i}_attn_{nm}", t) for nm, t in blk.attn.tensors()]
            out += [(f"gpt/b{i}_ln2_g", blk.ln2_g), (f"gpt/b{i}_ln2_b", blk.ln2_b),
                    (f"gpt/b{i}_mlp_w1", blk.mlp_w1), (f"gpt/b{i}_mlp_b1", blk.mlp_b1),
                    (f"gpt/b{i}_mlp_w2", blk.mlp_w2), (f"gpt/b{i}_mlp_b2", blk.mlp_b2)]
        out += [("gpt/lnf_g", self.lnf_g), ("gpt/lnf_b", self.lnf_b),
                ("gpt/head_w", self.head_w), ("gpt/head_b", self.head_b)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]


def init_forecaster(config: ForecasterConfig, rng: np.random.Generator) -> ForecasterParams:
    d = config.d_model

    def w(shape):
        return leaf(rng.normal(0.0, 0.02, size=shape).astype(np.float32))

    def zeros(n):
        return leaf(np.zeros(n, dtype=np.float32))

    def ones(n):
        return leaf(np.ones(n, dtype=np.float32))

    def block():
        attn = AttentionParams(wq=w((d, d)), bq=zeros(d), wk=w((d, d)), bk=zeros(d),
                               wv=w((d, d)), bv=zeros(d), wo=w((d, d)), bo=zeros(d))
        return BlockParams(ln1_g=ones(d), ln1_b=zeros(d), attn=attn,
                           ln2_g=ones(d), ln2_b=zeros(d),
                           mlp_w1=w((d, 4 * d)), mlp_b1=zeros(4 * d),
                           mlp_w2=w((4 * d, d)), mlp_b2=zeros(d))

    return ForecasterParams(
        config=config,
        tok_emb=w((config.vocab, d)),
        pos_emb=w((config.max_len, d)),
        blocks=[block() for _ in range(config.layers)],
        lnf_g=ones(d), lnf_b=zeros(d),
        head_w=w((d, config.vocab)), head_b=zeros(config.vocab),
    )


@dataclass
class TokenSequence:
    """One location's frame-major token stream (16 tokens per frame)."""

    tokens: np.ndarray
    patch_location: tuple[int, int] | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        if len(self.tokens) % GRID_CELLS != 0:
            raise ValueError(f"token count {len(self.tokens)} not divisible by {GRID_CELLS}")

    @property
    def frame_count(self) -> int:
        return len(self.tokens) // GRID_CELLS

    def frame_grid(self, f: int) -> np.ndarray:
        return self.tokens[f * GRID_CELLS:(f + 1) * GRID_CELLS]


def build_dataset(token_block: np.ndarray,
                  origins: np.ndarray | None = None) -> list[TokenSequence]:
    """One TokenSequence per patch location from a (P, F+1, 16) block."""
    if isinstance(token_block, (list, tuple)):
        lengths = {np.asarray(b).shape for b in token_block}
        if len(lengths) > 1:
            raise ValueError(f"ragged frame coverage across locations: {sorted(lengths)}")
        token_block = np.stack([np.asarray(b) for b in token_block])
    block = np.asarray(token_block, dtype=np.int64)
    if block.ndim != 3 or block.shape[2] != GRID_CELLS:
        raise ValueError(f"expected (locations, frames, {GRID_CELLS}) tokens, got {block.shape}")
    sequences = []
    for loc in range(block.shape[0]):
        where = None
        if origins is not None:
            where = (int(origins[loc][0]), int(origins[loc][1]))
        sequences.append(TokenSequence(tokens=block[loc].reshape(-1), patch_location=where))
    return sequences


def _check_tokens(tokens: np.ndarray, config: ForecasterConfig) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab):
        raise ValueError(f"token outside vocabulary [0, {config.vocab})")
    if tokens.shape[-1] > config.max_len:
        raise ValueError(f"sequence length {tokens.shape[-1]} exceeds max_len {config.max_len}")
    return tokens


def forward_graph(tokens: np.ndarray, params: ForecasterParams) -> Tensor:
    """Causal logits for a (B, T) token batch; differentiable."""
    tokens = _check_tokens(tokens, params.config)
    t = tokens.shape[1]
    x = embedding(params.tok_emb, tokens) + embedding(params.pos_emb, np.arange(t))
    for blk in params.blocks:
        h = layer_norm(x, blk.ln1_g, blk.ln1_b, eps=_LN_EPS)
        x = x + multi_head_attention(h, blk.attn, params.config.heads, causal=True)
        h = layer_norm(x, blk.ln2_g, blk.ln2_b, eps=_LN_EPS)
        x = x + linear(gelu(linear(h, blk.mlp_w1, blk.mlp_b1)), blk.mlp_w2, blk.mlp_b2)
    x = layer_norm(x, params.lnf_g, params.lnf_b, eps=_LN_EPS)
    return linear(x, params.head_w, params.head_b)


def forward_logits(tokens: np.ndarray, params: ForecasterParams) -> np.ndarray:
    """(T, vocab) logits for one prefix; row t scores token t+1."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    return forward_graph(tokens, params).data[0]


def _loss_weights(shape: tuple[int, int], dtype=np.float32) -> np.ndarray:
    """Per-position loss weights: predict subsequent-frame tokens only."""
    b, t = shape
    w = np.zeros((b, t), dtype=dtype)
    w[:, GRID_CELLS - 1:t - 1] = 1.0
    return w


def _next_token_targets(tokens: np.ndarray) -> np.ndarray:
    tgt = np.zeros_like(tokens)
    tgt[:, :-1] = tokens[:, 1:]
    return tgt


def accuracy(params: ForecasterParams, validation: list[TokenSequence],
             batch_size: int = 64) -> float:
    """Percent of subsequent-frame positions predicted exactly (argmax)."""
    if not validation:
        raise ValueError("validation set is empty")
    tokens = np.stack([s.tokens for s in validation])
    hits = 0
    total = 0
    for lo in range(0, len(tokens), batch_size):
        chunk = tokens[lo:lo + batch_size]
        logits = forward_graph(chunk, params).data
        pred = logits[:, GRID_CELLS - 1:-1].argmax(axis=-1)
        truth = chunk[:, GRID_CELLS:]
        hits += int((pred == truth).sum())
        total += truth.size
    return 100.0 * hits / total


@dataclass
class ForecasterTrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 2.5e-6
    warmup_steps: int = 0
    seed: int = 0
    val_fraction: float = 0.1
    eval_every: int = 25
    target_accuracy: float | None = None  # percent; early-stop when reached


@dataclass
class ForecasterTrainLog:
    entries: list[tuple[int, float, float]] = field(default_factory=list)
    final_accuracy: float = float("nan")
    steps_run: int = 0

    def lines(self) -> list[str]:
        return [f"step {s} loss {l:.6f} acc {a:.4f}" for s, l, a in self.entries]


def train_forecaster(dataset: list[TokenSequence], model_config: ForecasterConfig,
                     train_config: ForecasterTrainConfig
                     ) -> tuple[ForecasterParams, ForecasterTrainLog]:
    """Teacher-forced next-token training over subsequent-frame positions.

    The dataset is split 90/10 by patch location with the run seed;
    datasets too small to spare a location validate on the training
    split. Logs ``step / loss / validation accuracy`` every
    ``eval_every`` steps and can stop early at ``target_accuracy``.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    lengths = {len(s.tokens) for s in dataset}
    if len(lengths) != 1:
        raise ValueError(f"sequences must share a length, got {sorted(lengths)}")
    (seq_len,) = lengths
    if seq_len > model_config.max_len:
        raise ValueError(f"sequence length {seq_len} exceeds max_len {model_config.max_len}")

    rng = np.random.default_rng(train_config.seed)
    params = init_forecaster(model_config, rng)
    order = rng.permutation(len(dataset))
    n_val = int(round(len(dataset) * train_config.val_fraction))
    n_val = min(n_val, len(dataset) - 1)
    val = [dataset[i] for i in order[:n_val]] if n_val else list(dataset)
    train = [dataset[i] for i in order[n_val:]]
    train_tokens = np.stack([_check_tokens(s.tokens, model_config) for s in train])

    plist = params.parameters()
    state = init_adam(plist, lr=train_config.lr)
    log = ForecasterTrainLog()
    for step in range(1, train_config.steps + 1):
        pick = rng.integers(0, len(train_tokens), size=train_config.batch_size)
        batch = train_tokens[pick]
        for p in plist:
            p.grad = None
        with Tape() as tape:
            logits = forward_graph(batch, params)
            flat = logits.reshape((-1, model_config.vocab))
            loss = cross_entropy(flat, _next_token_targets(batch).reshape(-1),
                                 _loss_weights(batch.shape).reshape(-1))
        backward(loss, tape)
        lr = train_config.lr
        if train_config.warmup_steps:
            lr *= min(1.0, step / train_config.warmup_steps)
        try:
            adam_step(plist, [p.grad for p in plist], state, lr=lr)
        except NonFiniteGradientError as exc:
            raise NonFiniteGradientError(f"step {step}: {exc}") from exc
        log.steps_run = step
        if step % train_config.eval_every == 0 or step == train_config.steps:
            acc = accuracy(params, val)
            log.entries.append((step, loss.item(), acc))
            if train_config.target_accuracy is not None and acc >= train_config.target_accuracy:
                break
    log.final_accuracy = accuracy(params, val)
    return params, log


# ------------------------------------------------------------------
# generation (incremental, cached keys/values)
# ------------------------------------------------------------------

@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "greedy"          # "greedy" | "sample"
    temperature: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if not np.isfinite(self.temperature) or self.temperature <= 0:
            raise ValueError("temperature must be finite and positive")


def _ln_np(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + _LN_EPS) * g + b


def _gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x ** 3)))


class _DecoderCache:
    """Per-layer key/value buffers for incremental decoding."""

    def __init__(self, params: ForecasterParams, batch: int, max_t: int):
        cfg = params.config
        hd = cfg.d_model // cfg.heads
        self.k = [np.zeros((batch, cfg.heads, max_t, hd), dtype=np.float32)
                  for _ in range(cfg.layers)]
        self.v = [np.zeros((batch, cfg.heads, max_t, hd), dtype=np.float32)
                  for _ in range(cfg.layers)]


def _decode_step(tokens_t: np.ndarray, t: int, params: ForecasterParams,
                 cache: _DecoderCache) -> np.ndarray:
    """Feed the tokens at position ``t``; return (B, vocab) logits."""
    cfg = params.config
    heads, hd = cfg.heads, cfg.d_model // cfg.heads
    b = tokens_t.shape[0]
    x = params.tok_emb.data[tokens_t] + params.pos_emb.data[t]
    scale = 1.0 / np.sqrt(hd)
    for i, blk in enumerate(params.blocks):
        h = _ln_np(x, blk.ln1_g.data, blk.ln1_b.data)
        q = (h @ blk.attn.wq.data + blk.attn.bq.data).reshape(b, heads, hd)
        cache.k[i][:, :, t] = (h @ blk.attn.wk.data + blk.attn.bk.data).reshape(b, heads, hd)
        cache.v[i][:, :, t] = (h @ blk.attn.wv.data + blk.attn.bv.data).reshape(b, heads, hd)
        keys = cache.k[i][:, :, :t + 1]
        vals = cache.v[i][:, :, :t + 1]
        scores = np.einsum("bhd,bhtd->bht", q, keys) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=-1, keepdims=True)
        ctx = np.einsum("bht,bhtd->bhd", attn, vals).reshape(b, cfg.d_model)
        x = x + ctx @ blk.attn.wo.data + blk.attn.bo.data
        h = _ln_np(x, blk.ln2_g.data, blk.ln2_b.data)
        x = x + _gelu_np(h @ blk.mlp_w1.data + blk.mlp_b1.data) @ blk.mlp_w2.data + blk.mlp_b2.data
    x = _ln_np(x, params.lnf_g.data, params.lnf_b.data)
    return x @ params.head_w.data + params.head_b.data


def predict_batch(initial_grids: np.ndarray, frame_count: int,
                  params: ForecasterParams, sampler: SamplerConfig) -> np.ndarray:
    """Generate (F+1)*16 token rows for a (B, 16) batch of initial grids."""
    grids = np.asarray(initial_grids, dtype=np.int64)
    if grids.ndim != 2 or grids.shape[1] != GRID_CELLS:
        raise ValueError(f"expected (B, {GRID_CELLS}) initial grids, got {grids.shape}")
    if frame_count < 1:
        raise ValueError("frame_count must be at least 1")
    total = (frame_count + 1) * GRID_CELLS
    if total > params.config.max_len:
        raise ValueError(f"context overflow: {total} tokens exceed max_len "
                         f"{params.config.max_len}")
    _check_tokens(grids, params.config)
    b = grids.shape[0]
    tokens = np.zeros((b, total), dtype=np.int64)
    tokens[:, :GRID_CELLS] = grids
    cache = _DecoderCache(params, b, total)
    rng = np.random.default_rng(sampler.rng_seed)
    for t in range(total - 1):
        logits = _decode_step(tokens[:, t], t, params, cache)
        if t < GRID_CELLS - 1:
            continue  # conditioning prefix is given
        if sampler.mode == "greedy":
            nxt = logits.argmax(axis=-1)
        else:
            scaled = logits / sampler.temperature
            scaled -= scaled.max(axis=-1, keepdims=True)
            probs = np.exp(scaled)
            probs /= probs.sum(axis=-1, keepdims=True)
            u = rng.random((b, 1))
            nxt = (probs.cumsum(axis=-1) < u).sum(axis=-1)
        tokens[:, t + 1] = nxt
    return tokens


def predict(initial_grid: np.ndarray, frame_count: int, params: ForecasterParams,
            sampler: SamplerConfig = SamplerConfig()) -> TokenSequence:
    """Autoregressively continue one initial grid for ``frame_count`` frames."""
    row = predict_batch(np.asarray(initial_grid).reshape(1, GRID_CELLS),
                        frame_count, params, sampler)
    return TokenSequence(tokens=row[0])


# ------------------------------------------------------------------
# checkpointing
# ------------------------------------------------------------------

def save_forecaster(path: str | Path, params: ForecasterParams) -> None:
    from .ncore.checkpoint import save_tensors
    named = {name: t.data for name, t in params.named_tensors()}
    cfg = params.config
    named["gpt/meta"] = np.asarray(
        [cfg.vocab, cfg.layers, cfg.heads, cfg.d_model, cfg.max_len], dtype=np.float32)
    save_tensors(path, named)


def load_forecaster(path: str | Path) -> ForecasterParams:
    from .ncore.checkpoint import load_tensors
    named = load_tensors(path)
    meta = named.pop("gpt/meta")
    config = ForecasterConfig(vocab=int(meta[0]), layers=int(meta[1]), heads=int(meta[2]),
                              d_model=int(meta[3]), max_len=int(meta[4]))
    params = init_forecaster(config, np.random.default_rng(0))
    for name, tensor in params.named_tensors():
        if name not in named:
            raise ValueError(f"checkpoint missing tensor {name}")
        if named[name].shape != tensor.data.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {named[name].shape}, "
                             f"expected {tensor.data.shape}")
        tensor.data = named[name].astype(np.float32)
    return params
