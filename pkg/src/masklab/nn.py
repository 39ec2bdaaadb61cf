"""Transformer building blocks.

Multi-head self- and cross-attention, feed-forward layers, residual block
assembly with pre- or post-layer-norm, learned positional tables, and the
weight-tied prediction head. Everything is stateless given its weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from masklab.tensor import (
    MASK_SENTINEL,
    Tensor,
    TensorError,
    add,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    softmax_lastdim,
    transpose,
    transpose_last2,
)

LN_PRE = "pre"
LN_POST = "post"

INIT_STD = 0.02
LAYER_NORM_EPS = 1e-5


@dataclass
class BlockConfig:
    """Shape and regularization settings shared by every block of a stack."""

    d: int
    h: int
    ffn_inner: int
    ln_mode: str = LN_PRE
    dropout_p: float = 0.1
    attn_dropout_p: float = 0.1

    def __post_init__(self):
        if self.d % self.h != 0:
            raise ValueError(f"hidden size {self.d} not divisible by {self.h} heads")
        if self.ln_mode not in (LN_PRE, LN_POST):
            raise ValueError(f"ln_mode must be '{LN_PRE}' or '{LN_POST}', got {self.ln_mode!r}")

    @property
    def head_size(self) -> int:
        return self.d // self.h


class Dense:
    """Affine layer y = x @ w + b."""

    def __init__(self, w: Tensor, b: Tensor):
        self.w = w
        self.b = b

    @classmethod
    def create(cls, rng: np.random.Generator, d_in: int, d_out: int, dtype) -> "Dense":
        w = Tensor(rng.normal(0.0, INIT_STD, (d_in, d_out)), requires_grad=True, dtype=dtype)
        b = Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype)
        return cls(w, b)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class LayerNormWeights:
    """Gain/offset pair for one layer-norm site."""

    def __init__(self, gain: Tensor, offset: Tensor):
        self.gain = gain
        self.offset = offset

    @classmethod
    def create(cls, d: int, dtype) -> "LayerNormWeights":
        return cls(
            Tensor(np.ones(d), requires_grad=True, dtype=dtype),
            Tensor(np.zeros(d), requires_grad=True, dtype=dtype),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.offset, eps=LAYER_NORM_EPS)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.offset", self.offset


class BlockWeights:
    """Weights for one transformer block; optionally with a cross-attention sublayer."""

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator, dtype, cross: bool = False):
        d = cfg.d
        self.q = Dense.create(rng, d, d, dtype)
        self.k = Dense.create(rng, d, d, dtype)
        self.v = Dense.create(rng, d, d, dtype)
        self.o = Dense.create(rng, d, d, dtype)
        self.fc1 = Dense.create(rng, d, cfg.ffn_inner, dtype)
        self.fc2 = Dense.create(rng, cfg.ffn_inner, d, dtype)
        self.ln1 = LayerNormWeights.create(d, dtype)
        self.ln2 = LayerNormWeights.create(d, dtype)
        self.cross = cross
        if cross:
            self.cq = Dense.create(rng, d, d, dtype)
            self.ck = Dense.create(rng, d, d, dtype)
            self.cv = Dense.create(rng, d, d, dtype)
            self.co = Dense.create(rng, d, d, dtype)
            self.ln3 = LayerNormWeights.create(d, dtype)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for name, part in (("q", self.q), ("k", self.k), ("v", self.v), ("o", self.o),
                           ("fc1", self.fc1), ("fc2", self.fc2), ("ln1", self.ln1), ("ln2", self.ln2)):
            yield from part.named(f"{prefix}.{name}")
        if self.cross:
            for name, part in (("cq", self.cq), ("ck", self.ck), ("cv", self.cv), ("co", self.co),
                               ("ln3", self.ln3)):
                yield from part.named(f"{prefix}.{name}")


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None (evaluation) or p == 0."""
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)
    return mul(x, Tensor(keep))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.data.shape
    return transpose(reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.data.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _additive_mask(key_pad: np.ndarray, dtype) -> Tensor:
    # [B, n_k] attendable flags -> [B, 1, 1, n_k] additive scores
    add_mask = np.where(key_pad, 0.0, MASK_SENTINEL).astype(dtype)
    return Tensor(add_mask[:, None, None, :])


def multi_head_attention(
    query_in: Tensor,
    kv_in: Tensor,
    wq: Dense,
    wk: Dense,
    wv: Dense,
    wo: Dense,
    heads: int,
    key_pad_mask: Optional[np.ndarray] = None,
    attn_dropout_p: float = 0.0,
    rng: Optional[np.random.Generator] = None,
):
    """Scaled dot-product attention over ``heads`` heads.

    ``key_pad_mask`` is True where keys may be attended. Returns the output
    (before residual) and the attention weights [B, h, n_q, n_k].
    """
    dh = query_in.data.shape[-1] // heads
    q = _split_heads(wq(query_in), heads)
    k = _split_heads(wk(kv_in), heads)
    v = _split_heads(wv(kv_in), heads)
    scores = mul(matmul(q, transpose_last2(k)), 1.0 / np.sqrt(dh))
    mask = None if key_pad_mask is None else _additive_mask(key_pad_mask, query_in.data.dtype)
    attn = softmax_lastdim(scores, additive_mask=mask)
    dropped = dropout(attn, attn_dropout_p, rng)
    out = wo(_merge_heads(matmul(dropped, v)))
    return out, attn


def _feed_forward(x: Tensor, w: BlockWeights) -> Tensor:
    return w.fc2(gelu(w.fc1(x)))


def self_attention_block(
    x: Tensor,
    w: BlockWeights,
    cfg: BlockConfig,
    pad_mask: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Attention + feed-forward with residuals; pre- or post-LN per config.

    ``pad_mask`` is True at attendable positions. Output rows at padded query
    positions are unspecified and must be excluded from any loss.
    """
    if pad_mask is not None and not pad_mask.any(axis=1).all():
        raise TensorError("self-attention block given a fully padded sequence")

    def attend(h):
        out, _ = multi_head_attention(
            h, h, w.q, w.k, w.v, w.o, cfg.h, pad_mask, cfg.attn_dropout_p, rng
        )
        return dropout(out, cfg.dropout_p, rng)

    def ffn(h):
        return dropout(_feed_forward(h, w), cfg.dropout_p, rng)

    if cfg.ln_mode == LN_PRE:
        x = add(x, attend(w.ln1(x)))
        x = add(x, ffn(w.ln2(x)))
    else:
        x = w.ln1(add(x, attend(x)))
        x = w.ln2(add(x, ffn(x)))
    return x


def cross_attention_block(
    q_x: Tensor,
    memory: Tensor,
    w: BlockWeights,
    cfg: BlockConfig,
    memory_pad_mask: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Decoder block: self-attention over queries (no causal mask), then
    cross-attention into ``memory``, then feed-forward."""
    if memory.data.shape[1] == 0:
        raise TensorError("cross-attention block needs a non-empty memory")
    if not w.cross:
        raise TensorError("block weights were built without cross-attention sublayer")

    def self_attend(h):
        out, _ = multi_head_attention(h, h, w.q, w.k, w.v, w.o, cfg.h, None, cfg.attn_dropout_p, rng)
        return dropout(out, cfg.dropout_p, rng)

    def cross_attend(h, mem):
        out, _ = multi_head_attention(
            h, mem, w.cq, w.ck, w.cv, w.co, cfg.h, memory_pad_mask, cfg.attn_dropout_p, rng
        )
        return dropout(out, cfg.dropout_p, rng)

    def ffn(h):
        return dropout(_feed_forward(h, w), cfg.dropout_p, rng)

    if cfg.ln_mode == LN_PRE:
        q_x = add(q_x, self_attend(w.ln1(q_x)))
        q_x = add(q_x, cross_attend(w.ln2(q_x), memory))
        q_x = add(q_x, ffn(w.ln3(q_x)))
    else:
        q_x = w.ln1(add(q_x, self_attend(q_x)))
        q_x = w.ln2(add(q_x, cross_attend(q_x, memory)))
        q_x = w.ln3(add(q_x, ffn(q_x)))
    return q_x


def prediction_head(hidden: Tensor, head_dense: Dense, head_norm: LayerNormWeights,
                    tied_embedding: Tensor) -> Tensor:
    """Dense -> GELU -> layer norm -> product with the transposed embedding.

    The embedding argument is the same storage as the input embedding, so
    gradients from lookup and scoring accumulate into one matrix.
    """
    h = head_norm(gelu(head_dense(hidden)))
    return matmul(h, transpose_last2(tied_embedding))


def add_positions(x: Tensor, table: Tensor, positions: np.ndarray) -> Tensor:
    """Add gathered positional rows; positions index the learned table."""
    return add(x, embedding_lookup(table, positions))


def projection(enc_out: Tensor, proj: Optional[Dense]) -> Tensor:
    """Dimension-change projection; identity passthrough when absent."""
    return enc_out if proj is None else proj(enc_out)


def count_parameters(named_params) -> int:
    return sum(int(t.data.size) for _, t in named_params)
