"""The three architectures: vanilla MLM and the two late-mask variants.

``late_self`` runs the encoder on the mask-free stream, reinserts a learned
latent vector at the masked slots, and decodes the full-length sequence with
self-attention blocks. ``late_cross`` keeps the decoder queries down to the
masked slots, cross-attending into the encoder output, and scores
replaced/kept tokens straight off the encoder. Both share the vanilla
encoder; the decoder is dropped for fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from masklab import nn
from masklab.corruption import ALL_TARGET_KINDS, CorruptedBatch, Kind, encoder_view, loss_targets
from masklab.nn import BlockConfig, BlockWeights, Dense, LayerNormWeights
from masklab.tensor import (
    Tensor,
    TensorError,
    add,
    broadcast_rows,
    embedding_lookup,
    gather_positions,
    masked_cross_entropy,
    mul,
    reshape,
    scatter_positions,
    tanh,
)

ARCH_VANILLA = "vanilla"
ARCH_LATE_SELF = "late_self"
ARCH_LATE_CROSS = "late_cross"
ARCHITECTURES = (ARCH_VANILLA, ARCH_LATE_SELF, ARCH_LATE_CROSS)

FFN_RATIO = 4


class ConfigError(ValueError):
    """Rejected model configuration."""


@dataclass
class ModelConfig:
    arch: str
    vocab_size: int
    n: int  # sequence length the model is trained on
    l_en: int = 4
    d_en: int = 128
    h_en: int = 4
    l_de: int = 2
    d_de: int = 64
    h_de: int = 2
    ln_mode: str = nn.LN_PRE
    dropout_p: float = 0.1
    attn_dropout_p: float = 0.1
    max_positions: int = 0  # 0 -> n

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"arch must be one of {ARCHITECTURES}, got {self.arch!r}")
        if self.ln_mode not in (nn.LN_PRE, nn.LN_POST):
            raise ConfigError(f"ln_mode must be 'pre' or 'post', got {self.ln_mode!r}")
        if self.arch == ARCH_LATE_CROSS and self.ln_mode == nn.LN_POST:
            raise ConfigError(
                "late_cross does not train stably under post-LN; configure ln_mode='pre'"
            )
        if self.max_positions == 0:
            self.max_positions = self.n
        if self.max_positions < self.n:
            raise ConfigError(f"max_positions {self.max_positions} below sequence length {self.n}")

    @property
    def uses_decoder(self) -> bool:
        return self.arch != ARCH_VANILLA

    def encoder_block_config(self) -> BlockConfig:
        return BlockConfig(
            d=self.d_en, h=self.h_en, ffn_inner=FFN_RATIO * self.d_en,
            ln_mode=self.ln_mode, dropout_p=self.dropout_p, attn_dropout_p=self.attn_dropout_p,
        )

    def decoder_block_config(self) -> BlockConfig:
        return BlockConfig(
            d=self.d_de, h=self.h_de, ffn_inner=FFN_RATIO * self.d_de,
            ln_mode=self.ln_mode, dropout_p=self.dropout_p, attn_dropout_p=self.attn_dropout_p,
        )


class ModelState:
    """All learnable weights for one architecture.

    The word embedding is a single storage tied into every prediction head;
    the latent mask vector (late architectures) is its own parameter, not a
    row of the embedding. Construction order fixes the rng stream, so equal
    seeds give bitwise-equal states.
    """

    def __init__(self, cfg: ModelConfig, seed: int, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)

        def table(rows, cols):
            return Tensor(rng.normal(0.0, nn.INIT_STD, (rows, cols)), requires_grad=True, dtype=dtype)

        self.embedding = table(cfg.vocab_size, cfg.d_en)
        self.enc_pos = table(cfg.max_positions, cfg.d_en)
        enc_cfg = cfg.encoder_block_config()
        self.enc_blocks = [BlockWeights(enc_cfg, rng, dtype) for _ in range(cfg.l_en)]

        if cfg.uses_decoder:
            self.dec_pos = table(cfg.max_positions, cfg.d_de)
            self.latent_mask = Tensor(
                rng.normal(0.0, nn.INIT_STD, cfg.d_de), requires_grad=True, dtype=dtype
            )
            self.projection = (
                Dense.create(rng, cfg.d_en, cfg.d_de, dtype) if cfg.d_en != cfg.d_de else None
            )
            dec_cfg = cfg.decoder_block_config()
            cross = cfg.arch == ARCH_LATE_CROSS
            self.dec_blocks = [BlockWeights(dec_cfg, rng, dtype, cross=cross) for _ in range(cfg.l_de)]
            head_in = cfg.d_de
        else:
            self.dec_pos = None
            self.latent_mask = None
            self.projection = None
            self.dec_blocks = []
            head_in = cfg.d_en

        self.head_dense = Dense.create(rng, head_in, cfg.d_en, dtype)
        self.head_norm = LayerNormWeights.create(cfg.d_en, dtype)
        if cfg.arch == ARCH_LATE_CROSS:
            self.enc_head_dense = Dense.create(rng, cfg.d_en, cfg.d_en, dtype)
            self.enc_head_norm = LayerNormWeights.create(cfg.d_en, dtype)
        else:
            self.enc_head_dense = None
            self.enc_head_norm = None

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "embedding", self.embedding
        yield "enc_pos", self.enc_pos
        for i, blk in enumerate(self.enc_blocks):
            yield from blk.named(f"enc.{i}")
        if self.cfg.uses_decoder:
            yield "dec_pos", self.dec_pos
            yield "latent_mask", self.latent_mask
            if self.projection is not None:
                yield from self.projection.named("projection")
            for i, blk in enumerate(self.dec_blocks):
                yield from blk.named(f"dec.{i}")
        yield from self.head_dense.named("head.dense")
        yield from self.head_norm.named("head.norm")
        if self.enc_head_dense is not None:
            yield from self.enc_head_dense.named("enc_head.dense")
            yield from self.enc_head_norm.named("enc_head.norm")

    def parameter_count(self) -> int:
        return nn.count_parameters(self.named_parameters())


def init(cfg: ModelConfig, seed: int, dtype=np.float32) -> ModelState:
    return ModelState(cfg, seed, dtype=dtype)


@dataclass
class PredictionPath:
    """Logits over one set of target positions, with their labels."""

    logits: Tensor  # [B, m, |V|]
    positions: np.ndarray  # [B, m] original indices
    target_ids: np.ndarray  # [B, m]
    kinds: np.ndarray  # [B, m]


@dataclass
class ForwardResult:
    loss: Tensor
    paths: list[PredictionPath]
    encoder_states: Optional[list[np.ndarray]] = None
    decoder_states: Optional[list[np.ndarray]] = None

    @property
    def logits(self) -> Tensor:
        return self.paths[0].logits


def _rectangular_positions(mask: np.ndarray) -> np.ndarray:
    """Row-wise true positions as a [B, m] grid; counts must agree per row."""
    counts = mask.sum(axis=1)
    if not (counts == counts[0]).all():
        raise TensorError(
            f"target counts differ across rows ({counts.tolist()}); "
            "batch rows must share an eligible-token count"
        )
    if counts[0] == 0:
        raise TensorError("no target positions in batch")
    return np.nonzero(mask)[1].reshape(mask.shape[0], int(counts[0]))


def _positions_grid(batch: int, n: int) -> np.ndarray:
    return np.broadcast_to(np.arange(n), (batch, n))


def _embed(state: ModelState, ids: np.ndarray, positions: np.ndarray,
           rng: Optional[np.random.Generator]) -> Tensor:
    x = embedding_lookup(state.embedding, ids)
    x = nn.add_positions(x, state.enc_pos, positions)
    return nn.dropout(x, state.cfg.dropout_p, rng)


def _run_encoder(state: ModelState, x: Tensor, attend: np.ndarray,
                 rng, capture: Optional[list]) -> Tensor:
    cfg = state.cfg.encoder_block_config()
    if capture is not None:
        capture.append(x.data)
    for blk in state.enc_blocks:
        x = nn.self_attention_block(x, blk, cfg, pad_mask=attend, rng=rng)
        if capture is not None:
            capture.append(x.data)
    return x


def _tied_head(state: ModelState, hidden: Tensor) -> Tensor:
    return nn.prediction_head(hidden, state.head_dense, state.head_norm, state.embedding)


def forward_vanilla(
    state: ModelState,
    cb: CorruptedBatch,
    categories=ALL_TARGET_KINDS,
    rng: Optional[np.random.Generator] = None,
    capture: bool = False,
) -> ForwardResult:
    """Full-sequence encoder over the corrupted ids; head at target positions."""
    if state.cfg.arch != ARCH_VANILLA:
        raise ConfigError(f"forward_vanilla called on a {state.cfg.arch} model")
    batch, n = cb.original_ids.shape
    enc_states = [] if capture else None
    x = _embed(state, cb.corrupted_ids, _positions_grid(batch, n), rng)
    x = _run_encoder(state, x, ~cb.pad, rng, enc_states)

    target_pos = _rectangular_positions(loss_targets(cb, categories))
    rows = np.arange(batch)[:, None]
    logits = _tied_head(state, gather_positions(x, target_pos))
    target_ids = cb.original_ids[rows, target_pos]
    loss = masked_cross_entropy(logits, target_ids, np.ones(target_pos.shape, bool))
    path = PredictionPath(logits, target_pos, target_ids, cb.kind[rows, target_pos])
    return ForwardResult(loss, [path], encoder_states=enc_states)


def _encode_mask_free(state: ModelState, cb: CorruptedBatch, rng, capture):
    view = encoder_view(cb)
    if view.masked_positions.shape[1] == 0:
        raise TensorError(
            "corruption produced no masked positions; late-mask architectures need at least one"
        )
    x = _embed(state, view.encoder_ids, view.encoder_positions, rng)
    enc_out = _run_encoder(state, x, ~view.encoder_pad, rng, capture)
    return view, enc_out


def forward_late_self(
    state: ModelState,
    cb: CorruptedBatch,
    rng: Optional[np.random.Generator] = None,
    capture: bool = False,
) -> ForwardResult:
    """Encode the mask-free stream, reinsert latents, decode at full length."""
    if state.cfg.arch != ARCH_LATE_SELF:
        raise ConfigError(f"forward_late_self called on a {state.cfg.arch} model")
    batch, n = cb.original_ids.shape
    enc_states = [] if capture else None
    dec_states = [] if capture else None

    view, enc_out = _encode_mask_free(state, cb, rng, enc_states)
    projected = nn.projection(enc_out, state.projection)

    n_mask = view.masked_positions.shape[1]
    latents = broadcast_rows(state.latent_mask, batch, n_mask)
    full = add(
        scatter_positions(projected, view.encoder_positions, n),
        scatter_positions(latents, view.masked_positions, n),
    )
    full = nn.add_positions(full, state.dec_pos, _positions_grid(batch, n))
    full = nn.dropout(full, state.cfg.dropout_p, rng)

    dec_cfg = state.cfg.decoder_block_config()
    if dec_states is not None:
        dec_states.append(full.data)
    for blk in state.dec_blocks:
        full = nn.self_attention_block(full, blk, dec_cfg, pad_mask=~cb.pad, rng=rng)
        if dec_states is not None:
            dec_states.append(full.data)

    target_pos = _rectangular_positions(loss_targets(cb))
    rows = np.arange(batch)[:, None]
    logits = _tied_head(state, gather_positions(full, target_pos))
    target_ids = cb.original_ids[rows, target_pos]
    loss = masked_cross_entropy(logits, target_ids, np.ones(target_pos.shape, bool))
    path = PredictionPath(logits, target_pos, target_ids, cb.kind[rows, target_pos])
    return ForwardResult(loss, [path], encoder_states=enc_states, decoder_states=dec_states)


def forward_late_cross(
    state: ModelState,
    cb: CorruptedBatch,
    rng: Optional[np.random.Generator] = None,
    capture: bool = False,
) -> ForwardResult:
    """Masked slots query the encoder output; replaced/kept tokens are scored
    from the raw encoder states. One pooled mean over all corrupted positions."""
    if state.cfg.arch != ARCH_LATE_CROSS:
        raise ConfigError(f"forward_late_cross called on a {state.cfg.arch} model")
    batch, n = cb.original_ids.shape
    enc_states = [] if capture else None
    dec_states = [] if capture else None

    view, enc_out = _encode_mask_free(state, cb, rng, enc_states)
    memory = nn.projection(enc_out, state.projection)

    n_mask = view.masked_positions.shape[1]
    queries = broadcast_rows(state.latent_mask, batch, n_mask)
    queries = nn.add_positions(queries, state.dec_pos, view.masked_positions)
    queries = nn.dropout(queries, state.cfg.dropout_p, rng)

    dec_cfg = state.cfg.decoder_block_config()
    if dec_states is not None:
        dec_states.append(queries.data)
    memory_attend = ~view.encoder_pad
    for blk in state.dec_blocks:
        queries = nn.cross_attention_block(
            queries, memory, blk, dec_cfg, memory_pad_mask=memory_attend, rng=rng
        )
        if dec_states is not None:
            dec_states.append(queries.data)

    rows = np.arange(batch)[:, None]
    dec_logits = _tied_head(state, queries)
    dec_targets = cb.original_ids[rows, view.masked_positions]
    dec_loss = masked_cross_entropy(
        dec_logits, dec_targets, np.ones(view.masked_positions.shape, bool)
    )
    paths = [
        PredictionPath(
            dec_logits, view.masked_positions, dec_targets,
            cb.kind[rows, view.masked_positions],
        )
    ]

    enc_target_mask = loss_targets(cb, (Kind.REPLACED, Kind.KEPT))
    dec_count = batch * n_mask
    if enc_target_mask.any():
        enc_target_pos = _rectangular_positions(enc_target_mask)
        # map original indices to their slots in the encoder stream
        inverse = np.zeros((batch, n), dtype=np.int64)
        np.put_along_axis(inverse, view.encoder_positions, np.arange(view.n_en)[None, :], axis=1)
        stream_pos = inverse[rows, enc_target_pos]
        enc_logits = nn.prediction_head(
            gather_positions(enc_out, stream_pos),
            state.enc_head_dense, state.enc_head_norm, state.embedding,
        )
        enc_targets = cb.original_ids[rows, enc_target_pos]
        enc_loss = masked_cross_entropy(enc_logits, enc_targets, np.ones(enc_target_pos.shape, bool))
        enc_count = int(enc_target_mask.sum())
        total = dec_count + enc_count
        loss = add(mul(dec_loss, dec_count / total), mul(enc_loss, enc_count / total))
        paths.append(
            PredictionPath(enc_logits, enc_target_pos, enc_targets, cb.kind[rows, enc_target_pos])
        )
    else:
        loss = dec_loss

    return ForwardResult(loss, paths, encoder_states=enc_states, decoder_states=dec_states)


_FORWARDS = {
    ARCH_VANILLA: forward_vanilla,
    ARCH_LATE_SELF: forward_late_self,
    ARCH_LATE_CROSS: forward_late_cross,
}


def forward(state: ModelState, cb: CorruptedBatch, rng=None, capture=False) -> ForwardResult:
    """Architecture dispatch for the pre-training loss."""
    return _FORWARDS[state.cfg.arch](state, cb, rng=rng, capture=capture)


# ---------------------------------------------------------------------------
# fine-tuning


class ClassifierState:
    """Encoder kept from pre-training plus a fresh pooled classification head."""

    def __init__(self, source: ModelState, num_classes: int, seed: int):
        self.cfg = source.cfg
        self.dtype = source.dtype
        self.embedding = source.embedding
        self.enc_pos = source.enc_pos
        self.enc_blocks = source.enc_blocks
        rng = np.random.default_rng(seed)
        self.pooler = Dense.create(rng, self.cfg.d_en, self.cfg.d_en, self.dtype)
        self.classifier = Dense.create(rng, self.cfg.d_en, num_classes, self.dtype)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "embedding", self.embedding
        yield "enc_pos", self.enc_pos
        for i, blk in enumerate(self.enc_blocks):
            yield from blk.named(f"enc.{i}")
        yield from self.pooler.named("pooler")
        yield from self.classifier.named("classifier")

    def parameter_count(self) -> int:
        return nn.count_parameters(self.named_parameters())


def strip_for_finetune(state: ModelState, num_classes: int, seed: int) -> ClassifierState:
    """Drop decoder, projection, latent vector and prediction heads; keep the
    encoder (same storages, not copies) and attach a pooled classifier."""
    return ClassifierState(state, num_classes, seed)


def classify_forward(
    cstate: ClassifierState,
    ids: np.ndarray,
    pad: np.ndarray,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Encoder over the uncorrupted sequence, pooled at the leading <s> token."""
    ids = np.asarray(ids)
    pad = np.asarray(pad, dtype=bool)
    batch, n = ids.shape
    x = embedding_lookup(cstate.embedding, ids)
    x = nn.add_positions(x, cstate.enc_pos, _positions_grid(batch, n))
    x = nn.dropout(x, cstate.cfg.dropout_p, rng)
    cfg = cstate.cfg.encoder_block_config()
    for blk in cstate.enc_blocks:
        x = nn.self_attention_block(x, blk, cfg, pad_mask=~pad, rng=rng)
    pooled = gather_positions(x, np.zeros((batch, 1), dtype=np.int64))
    hidden = tanh(cstate.pooler(pooled))
    return reshape(cstate.classifier(hidden), (batch, -1))
