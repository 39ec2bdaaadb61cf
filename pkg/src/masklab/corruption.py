"""Token corruption: build corrupted batches and the mask-free encoder view.

Selection is uniform without replacement among eligible positions (regular,
non-pad tokens). With deterministic counts on, every row gets exactly
round(p * rate * n_eligible) positions per category, which keeps batches
rectangular and matches the symbolic sequence-length model of the FLOPs
accounting.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable

import numpy as np

from masklab.data import MASK_ID, NUM_SPECIAL

DEFAULT_STRATEGY = (0.8, 0.1, 0.1)


class CorruptionError(ValueError):
    """Contract violation in the corruption pipeline."""


class Kind(IntEnum):
    NONE = 0
    MASKED = 1
    REPLACED = 2
    KEPT = 3


ALL_TARGET_KINDS = (Kind.MASKED, Kind.REPLACED, Kind.KEPT)


@dataclass
class MaskingConfig:
    """Masking rate and the (mask, random, keep) split of corrupted tokens."""

    rate: float = 0.15
    strategy: tuple[float, float, float] = DEFAULT_STRATEGY
    deterministic_counts: bool = True

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise CorruptionError(f"masking rate must be in [0, 1], got {self.rate}")
        if len(self.strategy) != 3 or any(p < 0 for p in self.strategy):
            raise CorruptionError(f"strategy must be three nonnegative shares, got {self.strategy}")
        if abs(sum(self.strategy) - 1.0) > 1e-9:
            raise CorruptionError(f"strategy shares must sum to 1, got {self.strategy}")


@dataclass
class CorruptedBatch:
    """Original/corrupted token grids plus the per-position corruption kind."""

    original_ids: np.ndarray  # [B, n]
    corrupted_ids: np.ndarray  # [B, n]
    kind: np.ndarray  # [B, n], Kind values
    pad: np.ndarray  # [B, n] bool
    n_mask: np.ndarray  # [B]
    n_rand: np.ndarray  # [B]
    n_keep: np.ndarray  # [B]

    @property
    def batch_size(self) -> int:
        return self.original_ids.shape[0]

    @property
    def length(self) -> int:
        return self.original_ids.shape[1]


@dataclass
class EncoderView:
    """The batch as the encoder sees it: MASKED positions excluded."""

    encoder_ids: np.ndarray  # [B, n_en]
    encoder_positions: np.ndarray  # [B, n_en], original indices, increasing
    encoder_pad: np.ndarray  # [B, n_en] bool
    masked_positions: np.ndarray  # [B, n_mask], original indices, increasing

    @property
    def n_en(self) -> int:
        return self.encoder_ids.shape[1]


def corrupt(
    original_ids: np.ndarray,
    pad: np.ndarray,
    cfg: MaskingConfig,
    vocab_size: int,
    seed: int,
) -> CorruptedBatch:
    """Corrupt a batch; fully reproducible from ``seed``.

    Special tokens and pads are never eligible. Replacement tokens are drawn
    uniformly from the regular vocabulary, redrawn once on a collision with
    the original token. Selection and category draws depend only on the
    eligibility pattern, never on token identities.
    """
    ids = np.asarray(original_ids, dtype=np.int64)
    pad = np.asarray(pad, dtype=bool)
    if ids.shape != pad.shape or ids.ndim != 2:
        raise CorruptionError(f"ids {ids.shape} and pad {pad.shape} must be matching 2-D grids")
    eligible = (~pad) & (ids >= NUM_SPECIAL)
    rng = np.random.default_rng(seed)
    p_mask, p_rand, p_keep = cfg.strategy

    corrupted = ids.copy()
    kind = np.zeros_like(ids, dtype=np.int8)
    batch = ids.shape[0]
    n_mask = np.zeros(batch, dtype=np.int64)
    n_rand = np.zeros(batch, dtype=np.int64)
    n_keep = np.zeros(batch, dtype=np.int64)

    for b in range(batch):
        row_eligible = np.nonzero(eligible[b])[0]
        n_elig = row_eligible.size
        if cfg.deterministic_counts:
            counts = [round(p * cfg.rate * n_elig) for p in (p_mask, p_rand, p_keep)]
            overshoot = sum(counts) - n_elig
            for i in (2, 1, 0):  # rounding can overshoot by one; trim keep, then rand
                if overshoot <= 0:
                    break
                trim = min(overshoot, counts[i])
                counts[i] -= trim
                overshoot -= trim
            nm, nr, nk = counts
            selected = rng.permutation(row_eligible)[: nm + nr + nk]
            masked = selected[:nm]
            replaced = selected[nm : nm + nr]
            kept = selected[nm + nr :]
        else:
            hit = row_eligible[rng.random(n_elig) < cfg.rate]
            category = rng.choice(3, size=hit.size, p=(p_mask, p_rand, p_keep))
            masked, replaced, kept = hit[category == 0], hit[category == 1], hit[category == 2]

        kind[b, masked] = Kind.MASKED
        kind[b, replaced] = Kind.REPLACED
        kind[b, kept] = Kind.KEPT
        corrupted[b, masked] = MASK_ID
        if replaced.size:
            if vocab_size <= NUM_SPECIAL:
                raise CorruptionError("vocabulary has no regular tokens to draw replacements from")
            draws = rng.integers(NUM_SPECIAL, vocab_size, size=(replaced.size, 2))
            pick = np.where(draws[:, 0] == ids[b, replaced], draws[:, 1], draws[:, 0])
            corrupted[b, replaced] = pick
        n_mask[b], n_rand[b], n_keep[b] = masked.size, replaced.size, kept.size

    return CorruptedBatch(ids, corrupted, kind, pad, n_mask, n_rand, n_keep)


def encoder_view(cb: CorruptedBatch) -> EncoderView:
    """Exclude MASKED positions in stable order; replaced/kept tokens stay."""
    nm = int(cb.n_mask[0])
    if not (cb.n_mask == nm).all():
        raise CorruptionError(
            f"ragged masked counts across rows ({cb.n_mask.tolist()}); "
            "use deterministic counts with equal eligible lengths"
        )
    is_masked = cb.kind == Kind.MASKED
    n = cb.length
    keep = ~is_masked
    encoder_positions = np.nonzero(keep)[1].reshape(cb.batch_size, n - nm)
    masked_positions = (
        np.nonzero(is_masked)[1].reshape(cb.batch_size, nm)
        if nm
        else np.zeros((cb.batch_size, 0), dtype=np.int64)
    )
    rows = np.arange(cb.batch_size)[:, None]
    return EncoderView(
        encoder_ids=cb.corrupted_ids[rows, encoder_positions],
        encoder_positions=encoder_positions,
        encoder_pad=cb.pad[rows, encoder_positions],
        masked_positions=masked_positions,
    )


def reassemble(view: EncoderView, length: int, mask_id: int = MASK_ID) -> np.ndarray:
    """Inverse of encoder_view on the corrupted grid: reinsert mask tokens."""
    batch = view.encoder_ids.shape[0]
    out = np.full((batch, length), mask_id, dtype=np.int64)
    rows = np.arange(batch)[:, None]
    out[rows, view.encoder_positions] = view.encoder_ids
    return out


def loss_targets(cb: CorruptedBatch, categories: Iterable[Kind] = ALL_TARGET_KINDS) -> np.ndarray:
    """Boolean grid of positions whose prediction enters the loss."""
    categories = set(int(c) for c in categories)
    if not categories <= {int(k) for k in ALL_TARGET_KINDS}:
        raise CorruptionError(f"categories must be corruption kinds, got {categories}")
    return np.isin(cb.kind, list(categories))
