"""Evaluation probes: masked-LM perplexity and the layerwise mutual-information
profile between masked-position hidden states and the original token identities.

MI is the plug-in estimator on the empirical joint of (token label, cluster),
reported in bits. The estimator is biased upward for large cluster counts, so
sample counts ride along with every profile entry and profiles are only ever
compared under one (k, samples) setting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from masklab.corruption import ALL_TARGET_KINDS, Kind, MaskingConfig, corrupt
from masklab.data import PAD_ID, CorpusDataset
from masklab.models import ARCH_VANILLA, ModelState, forward
from masklab.train import per_position_nll, usable_row_groups


class ProbeError(ValueError):
    """Unusable probe configuration or input."""


@dataclass
class MIProbeConfig:
    """Desk-scale defaults; scale labels/clusters/samples together."""

    num_token_labels: int = 50
    k: int = 200
    max_samples: int = 50_000
    kmeans_batch: int = 1024
    kmeans_iters: int = 150
    lloyd_iters: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ProbeError(f"need at least 2 clusters, got {self.k}")
        if self.max_samples < self.k:
            raise ProbeError(f"max_samples {self.max_samples} below cluster count {self.k}")


@dataclass
class MIPoint:
    layer: int
    mi_bits: float
    samples: int
    k: int


@dataclass
class MIProfile:
    arch: str
    points: list[MIPoint]


def _batches(dataset: CorpusDataset, masking_cfg: MaskingConfig, arch: str, batch_size: int):
    groups = usable_row_groups(dataset, masking_cfg, arch)
    for rows in groups:
        for start in range(0, len(rows), batch_size):
            yield rows[start : start + batch_size]


def perplexity(
    state: ModelState,
    dataset: CorpusDataset,
    masking_cfg: MaskingConfig,
    categories: Iterable[Kind] = ALL_TARGET_KINDS,
    seed: int = 0,
    batch_size: int = 32,
) -> float:
    """exp(mean NLL) over target positions of the given corruption categories.

    Corruption is seeded per batch, so the number is reproducible. For the
    cross architecture, masked slots are scored by the decoder path and
    replaced/kept tokens by the encoder path, as in training.
    """
    wanted = {int(c) for c in categories}
    if not wanted:
        raise ProbeError("empty category filter")
    if len(dataset) == 0:
        raise ProbeError("empty corpus")
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    for rows in _batches(dataset, masking_cfg, state.cfg.arch, batch_size):
        ids = dataset.ids[rows]
        cb = corrupt(ids, ids == PAD_ID, masking_cfg, state.cfg.vocab_size,
                     seed=int(rng.integers(2**63)))
        result = forward(state, cb)
        for path in result.paths:
            hit = np.isin(path.kinds, list(wanted))
            if hit.any():
                total += per_position_nll(path.logits.data, path.target_ids)[hit].sum()
                count += int(hit.sum())
    if count == 0:
        raise ProbeError("no target positions matched the category filter")
    return float(np.exp(total / count))


def per_category_perplexity(state, dataset, masking_cfg, seed=0, batch_size=32) -> dict[str, float]:
    """The masked/replaced/kept breakdown plus the pooled number."""
    out = {}
    for name, cats in (
        ("masked", [Kind.MASKED]),
        ("replaced", [Kind.REPLACED]),
        ("kept", [Kind.KEPT]),
        ("all", ALL_TARGET_KINDS),
    ):
        try:
            out[name] = perplexity(state, dataset, masking_cfg, cats, seed=seed,
                                   batch_size=batch_size)
        except ProbeError:
            out[name] = float("nan")  # e.g. no replaced tokens under (1,0,0)
    return out


# ---------------------------------------------------------------------------
# hidden-state collection


def eligible_layers(state: ModelState) -> list[int]:
    """Layer 0 is the stack input; late architectures probe decoder layers only."""
    if state.cfg.arch == ARCH_VANILLA:
        return list(range(state.cfg.l_en + 1))
    return list(range(state.cfg.l_de + 1))


def collect_hidden(
    state: ModelState,
    dataset: CorpusDataset,
    layer: int,
    cfg: MIProbeConfig,
    masking_cfg: MaskingConfig,
    label_ids: np.ndarray,
    seed: int = 0,
):
    """Hidden states at masked positions whose original token is a label token.

    Returns (vectors [N, d], labels [N]) with N <= cfg.max_samples. Raises if
    fewer samples than clusters turn up.
    """
    if layer not in eligible_layers(state):
        raise ProbeError(
            f"layer {layer} not probeable for {state.cfg.arch}; choose from {eligible_layers(state)}"
        )
    allowed = np.zeros(state.cfg.vocab_size, dtype=bool)
    allowed[np.asarray(label_ids)] = True
    rng = np.random.default_rng(seed)
    vectors, labels = [], []
    collected = 0
    for rows in _batches(dataset, masking_cfg, state.cfg.arch, batch_size=32):
        ids = dataset.ids[rows]
        cb = corrupt(ids, ids == PAD_ID, masking_cfg, state.cfg.vocab_size,
                     seed=int(rng.integers(2**63)))
        result = forward(state, cb, capture=True)
        if state.cfg.arch == ARCH_VANILLA:
            states = result.encoder_states[layer]
            grid_b, grid_p = np.nonzero(cb.kind == Kind.MASKED)
            vecs = states[grid_b, grid_p]
            outs = cb.original_ids[grid_b, grid_p]
        else:
            states = result.decoder_states[layer]
            mask_path = result.paths[0]  # decoder path targets are the masked slots
            if states.shape[1] == cb.length:  # full-length decoder: pick the masked slots
                rows_idx = np.arange(states.shape[0])[:, None]
                vecs = states[rows_idx, mask_path.positions].reshape(-1, states.shape[-1])
            else:
                vecs = states.reshape(-1, states.shape[-1])
            outs = mask_path.target_ids.reshape(-1)
        keep = allowed[outs]
        if keep.any():
            room = cfg.max_samples - collected
            vecs, outs = vecs[keep][:room], outs[keep][:room]
            vectors.append(vecs)
            labels.append(outs)
            collected += len(outs)
        if collected >= cfg.max_samples:
            break
    if collected < cfg.k:
        raise ProbeError(
            f"collected {collected} samples but need at least k={cfg.k}; "
            "use a larger corpus or fewer clusters"
        )
    return np.concatenate(vectors).astype(np.float64), np.concatenate(labels)


# ---------------------------------------------------------------------------
# mini-batch k-means


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    objective_history: list[float]  # full-assignment evaluations, non-increasing


def _squared_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return (
        (x**2).sum(axis=1, keepdims=True)
        - 2.0 * x @ centers.T
        + (centers**2).sum(axis=1)[None, :]
    )


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    sample = x[rng.choice(len(x), size=min(len(x), max(10 * k, 2048)), replace=False)]
    centers = np.empty((k, x.shape[1]))
    centers[0] = sample[rng.integers(len(sample))]
    closest = ((sample - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:  # all remaining mass identical to a chosen center
            centers[i:] = centers[0]
            break
        probs = closest / total
        centers[i] = sample[rng.choice(len(sample), p=probs)]
        closest = np.minimum(closest, ((sample - centers[i]) ** 2).sum(axis=1))
    return centers


def minibatch_kmeans(vectors: np.ndarray, k: int, cfg: MIProbeConfig) -> KMeansResult:
    """k-means++ seeding, per-center 1/count mini-batch updates, Lloyd polish.

    Deterministic given cfg.seed. The objective history holds the
    full-assignment evaluations of the polish phase, which Lloyd steps make
    non-increasing; empty clusters are allowed and simply keep their center.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if len(x) < k:
        raise ProbeError(f"{len(x)} vectors cannot fill {k} clusters")
    rng = np.random.default_rng(cfg.seed)
    centers = _kmeanspp(x, k, rng)

    counts = np.zeros(k)
    for _ in range(cfg.kmeans_iters):
        batch = x[rng.choice(len(x), size=min(cfg.kmeans_batch, len(x)), replace=False)]
        assign = _squared_distances(batch, centers).argmin(axis=1)
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, batch)
        members = np.bincount(assign, minlength=k).astype(np.float64)
        hit = members > 0
        # closed form of the sequential 1/count updates for this batch
        centers[hit] = (counts[hit, None] * centers[hit] + sums[hit]) / (
            counts[hit] + members[hit]
        )[:, None]
        counts += members

    history = []
    assignments = None
    for _ in range(max(1, cfg.lloyd_iters)):
        distances = _squared_distances(x, centers)
        new_assign = distances.argmin(axis=1)
        history.append(float(distances[np.arange(len(x)), new_assign].mean()))
        if assignments is not None and (new_assign == assignments).all():
            assignments = new_assign
            break
        assignments = new_assign
        sums = np.zeros_like(centers)
        np.add.at(sums, assignments, x)
        members = np.bincount(assignments, minlength=k).astype(np.float64)
        hit = members > 0
        centers[hit] = sums[hit] / members[hit][:, None]
    return KMeansResult(assignments, centers, history)


# ---------------------------------------------------------------------------
# mutual information


def entropy_bits(values: np.ndarray) -> float:
    _, counts = np.unique(values, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def mutual_information(labels: np.ndarray, clusters: np.ndarray) -> float:
    """Plug-in MI (bits) on the empirical joint distribution, 0*log 0 = 0."""
    labels = np.asarray(labels)
    clusters = np.asarray(clusters)
    if labels.size == 0 or labels.shape != clusters.shape:
        raise ProbeError(f"label/cluster sequences unusable: {labels.shape} vs {clusters.shape}")
    _, li = np.unique(labels, return_inverse=True)
    _, ci = np.unique(clusters, return_inverse=True)
    n_l, n_c = li.max() + 1, ci.max() + 1
    joint = np.bincount(li * n_c + ci, minlength=n_l * n_c).reshape(n_l, n_c) / labels.size
    pl = joint.sum(axis=1, keepdims=True)
    pc = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log2(joint[nz] / (pl @ pc)[nz])).sum())


def mi_profile(
    state: ModelState,
    dataset: CorpusDataset,
    cfg: MIProbeConfig,
    masking_cfg: MaskingConfig,
    label_ids: np.ndarray,
) -> MIProfile:
    """Collect -> cluster -> MI for every probeable layer of the architecture."""
    points = []
    for layer in eligible_layers(state):
        vectors, labels = collect_hidden(state, dataset, layer, cfg, masking_cfg,
                                         label_ids, seed=cfg.seed + layer)
        result = minibatch_kmeans(vectors, cfg.k, cfg)
        points.append(MIPoint(layer, mutual_information(labels, result.assignments),
                              len(labels), cfg.k))
    return MIProfile(state.cfg.arch, points)
