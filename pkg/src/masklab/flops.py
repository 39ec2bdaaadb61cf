"""Closed-form pre-training FLOPs accounting and a measured-counter oracle.

Every formula counts fused multiply-adds as 2 FLOPs and ignores bias,
activation, norm and dropout work. The leading factor 2 on totals covers
forward plus backward. Sequence lengths stay real-valued in the algebra; the
counter-equality tests pick configs where they are integers. All helpers are
plain arithmetic, so exact types (int, Fraction) pass through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from masklab import models as _models
from masklab.corruption import CorruptedBatch
from masklab.models import ARCH_LATE_CROSS, ARCH_LATE_SELF, ARCH_VANILLA, ModelState
from masklab.tensor import FlopCounter

MASK_SHARE = (4, 5)  # 80% of corrupted tokens become [MASK]


def _masked_tokens(n, rate):
    # ordered so exact numeric types (Fraction) survive the arithmetic
    num, den = MASK_SHARE
    return n * rate * num / den


def encoder_length(n, rate):
    """Mask-free stream length: n minus the masked share."""
    return n - _masked_tokens(n, rate)


def decoder_query_length(n, rate):
    """Number of masked slots."""
    return _masked_tokens(n, rate)


def self_attention_flops(n, d):
    # qkv + output projections 8nd^2, score and value products 4n^2d
    return 8 * n * d * d + 4 * n * n * d


def ffn_flops(n, d):
    # two dense layers d -> 4d -> d
    return 16 * n * d * d


def block_flops(n, d):
    return self_attention_flops(n, d) + ffn_flops(n, d)


def prediction_flops(n, rate, d, vocab):
    # dense d -> d plus tied d -> |V|, at the rate*n scored positions
    return 2 * n * rate * (d * d + d * vocab)


def projected_prediction_flops(n, rate, d_en, d_de, vocab):
    # first dense maps the decoder width back to the tied matrix's width
    return 2 * n * rate * (d_de * d_en + d_en * vocab)


def cross_attention_flops(n_mem, n_q, d):
    # k/v from memory, q/output from queries, score and value products
    return 4 * n_mem * d * d + 4 * n_q * d * d + 4 * n_mem * n_q * d


def cross_block_flops(n_mem, n_q, d):
    return block_flops(n_q, d) + cross_attention_flops(n_mem, n_q, d)


@dataclass
class FlopsConfig:
    """Symbolic training shape; decoder fields are ignored for vanilla."""

    arch: str
    n: int
    vocab_size: int
    rate: float
    l_en: int
    d_en: int
    l_de: int = 0
    d_de: int = 0
    batch_size: int = 1
    updates: int = 1

    def __post_init__(self):
        if self.arch not in (ARCH_VANILLA, ARCH_LATE_SELF, ARCH_LATE_CROSS):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if not 0 <= self.rate <= 1:
            raise ValueError(f"masking rate must be in [0, 1], got {self.rate}")
        for name in ("n", "vocab_size", "l_en", "d_en", "batch_size", "updates"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.arch != ARCH_VANILLA and (self.l_de <= 0 or self.d_de <= 0):
            raise ValueError("decoder extents must be positive for late-mask architectures")


@dataclass
class FlopsReport:
    """Per-term training FLOPs; terms already carry the 2*b*u factor."""

    arch: str
    breakdown: dict
    config: FlopsConfig

    @property
    def total(self):
        return sum(self.breakdown.values())

    @property
    def forward_per_sequence(self):
        return self.total / (2 * self.config.batch_size * self.config.updates)


def _vanilla_report(cfg: FlopsConfig) -> FlopsReport:
    scale = 2 * cfg.batch_size * cfg.updates
    breakdown = {
        "encoder_blocks": scale * cfg.l_en * block_flops(cfg.n, cfg.d_en),
        "prediction": scale * prediction_flops(cfg.n, cfg.rate, cfg.d_en, cfg.vocab_size),
    }
    return FlopsReport(cfg.arch, breakdown, cfg)


def _late_self_report(cfg: FlopsConfig) -> FlopsReport:
    scale = 2 * cfg.batch_size * cfg.updates
    n_en = encoder_length(cfg.n, cfg.rate)
    breakdown = {
        "projection": scale * 2 * n_en * cfg.d_en * cfg.d_de,
        "encoder_blocks": scale * cfg.l_en * block_flops(n_en, cfg.d_en),
        "decoder_blocks": scale * cfg.l_de * block_flops(cfg.n, cfg.d_de),
        "prediction": scale
        * projected_prediction_flops(cfg.n, cfg.rate, cfg.d_en, cfg.d_de, cfg.vocab_size),
    }
    return FlopsReport(cfg.arch, breakdown, cfg)


def _late_cross_report(cfg: FlopsConfig) -> FlopsReport:
    scale = 2 * cfg.batch_size * cfg.updates
    n_en = encoder_length(cfg.n, cfg.rate)
    n_de = decoder_query_length(cfg.n, cfg.rate)
    # replaced+kept tokens as a fraction of the encoder stream
    enc_side_rate = (cfg.n * cfg.rate - n_de) / n_en
    breakdown = {
        "projection": scale * 2 * n_en * cfg.d_en * cfg.d_de,
        "encoder_blocks": scale * cfg.l_en * block_flops(n_en, cfg.d_en),
        "decoder_blocks": scale * cfg.l_de * cross_block_flops(n_en, n_de, cfg.d_de),
        "encoder_prediction": scale
        * prediction_flops(n_en, enc_side_rate, cfg.d_en, cfg.vocab_size),
        "decoder_prediction": scale
        * projected_prediction_flops(n_de, 1, cfg.d_en, cfg.d_de, cfg.vocab_size),
    }
    return FlopsReport(cfg.arch, breakdown, cfg)


_REPORTS = {
    ARCH_VANILLA: _vanilla_report,
    ARCH_LATE_SELF: _late_self_report,
    ARCH_LATE_CROSS: _late_cross_report,
}


def pretraining_flops(cfg: FlopsConfig) -> FlopsReport:
    return _REPORTS[cfg.arch](cfg)


def speedup(baseline: FlopsConfig, target: FlopsConfig) -> float:
    """Training-FLOPs ratio baseline/target; >1 means the target is cheaper."""
    return float(pretraining_flops(baseline).total) / float(pretraining_flops(target).total)


def masking_rate_sweep(target: FlopsConfig, baseline: FlopsConfig, rates) -> list[tuple[float, float]]:
    """Speedup at each masking rate, holding everything else fixed."""
    out = []
    for r in rates:
        swept = FlopsConfig(**{**target.__dict__, "rate": r})
        out.append((float(r), speedup(baseline, swept)))
    return out


def count_matmul_flops(state: ModelState, cb: CorruptedBatch) -> int:
    """Measured matmul FLOPs (2*M*N*K summed) of one forward pass on ``cb``.

    Dropout off, no gradients; bias/activation/norm work is excluded by
    construction, mirroring the closed forms.
    """
    with FlopCounter() as counter:
        _models.forward(state, cb, rng=None)
    return counter.total
