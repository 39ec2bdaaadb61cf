"""Optimizer, learning-rate schedule, training loops, deterministic checkpoints.

The whole loop draws from one seeded generator (batch choice, corruption
seeds, dropout), and checkpoints serialize that generator's state, so a run
resumed from disk continues the exact bitwise trajectory.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from masklab import models
from masklab.corruption import Kind, MaskingConfig, corrupt
from masklab.data import PAD_ID, CorpusDataset, Vocabulary
from masklab.models import ClassifierState, ForwardResult, ModelConfig, ModelState, forward
from masklab.tensor import Tape, Tensor, backward, masked_cross_entropy, reshape


class TrainingError(RuntimeError):
    """Aborted training step (non-finite gradients, bad configuration)."""


class CheckpointError(RuntimeError):
    """Unreadable or incompatible checkpoint file."""


@dataclass
class OptimizerConfig:
    peak_lr: float
    total_steps: int
    warmup_proportion: float = 0.06
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    weight_decay: float = 0.01
    grad_clip: float = 0.0  # 0 = off; set 1.0 if gradients explode

    def __post_init__(self):
        if not 0.0 <= self.warmup_proportion < 1.0:
            raise TrainingError(f"warmup proportion must be in [0, 1), got {self.warmup_proportion}")
        if self.peak_lr <= 0:
            raise TrainingError(f"peak learning rate must be positive, got {self.peak_lr}")


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_steps: int = 1000
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0  # 0 = only final
    dropout_override: Optional[float] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainingError(f"batch size must be >= 1, got {self.batch_size}")


def lr_at(step: int, cfg: OptimizerConfig) -> float:
    """Linear 0 -> peak over the warmup steps, then linear peak -> 0."""
    warmup = round(cfg.warmup_proportion * cfg.total_steps)
    if step <= 0:
        return 0.0 if warmup > 0 else cfg.peak_lr
    if step <= warmup:
        return cfg.peak_lr * step / warmup
    if step >= cfg.total_steps:
        return 0.0
    return cfg.peak_lr * (cfg.total_steps - step) / (cfg.total_steps - warmup)


def decays(name: str) -> bool:
    """Weight decay hits dense kernels only: no biases, norms, or embeddings."""
    return name.endswith(".w")


class AdamMoments:
    """First/second moment accumulators keyed by parameter name."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def ensure(self, name: str, like: np.ndarray):
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)


def adam_update(
    named_params: list[tuple[str, Tensor]],
    moments: AdamMoments,
    step: int,
    cfg: OptimizerConfig,
    lr: Optional[float] = None,
) -> None:
    """Bias-corrected Adam with decoupled weight decay; updates in place.

    Optional global-norm clipping runs first. Gradients are consumed (set to
    None) so the next backward starts clean.
    """
    if step < 1:
        raise TrainingError(f"adam step numbers start at 1, got {step}")
    lr = cfg.peak_lr if lr is None else lr
    beta1, beta2 = cfg.betas

    grads = []
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        grads.append(g)

    if cfg.grad_clip > 0.0:
        total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
        if total > cfg.grad_clip:
            scale = cfg.grad_clip / (total + 1e-6)
            grads = [g * g.dtype.type(scale) for g in grads]

    bias1 = 1.0 - beta1**step
    bias2 = 1.0 - beta2**step
    for (name, p), g in zip(named_params, grads):
        moments.ensure(name, p.data)
        m, v = moments.m[name], moments.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bias1) / (np.sqrt(v / bias2) + p.data.dtype.type(cfg.eps))
        if cfg.weight_decay > 0.0 and decays(name):
            update = update + cfg.weight_decay * p.data
        p.data = p.data - p.data.dtype.type(lr) * update
        p.grad = None


# ---------------------------------------------------------------------------
# batch sampling


def usable_row_groups(dataset: CorpusDataset, masking_cfg: MaskingConfig, arch: str):
    """Row-index groups that corrupt into rectangular, non-empty batches.

    Rows are grouped by eligible-token count (so deterministic counts stay
    equal within a batch); groups whose target set would come out empty for
    the given architecture are dropped.
    """
    groups = []
    for n_elig, rows in dataset.rows_by_eligibility().items():
        counts = [round(p * masking_cfg.rate * n_elig) for p in masking_cfg.strategy]
        if arch == models.ARCH_VANILLA:
            usable = sum(counts) >= 1
        else:
            usable = counts[0] >= 1
        if usable:
            groups.append(rows)
    if not groups:
        raise TrainingError(
            "no usable training rows: masking rate and sequence lengths give empty target sets"
        )
    return groups


def _sample_batch(groups, rng: np.random.Generator, batch_size: int) -> np.ndarray:
    sizes = np.array([len(g) for g in groups], dtype=np.float64)
    gi = int(rng.choice(len(groups), p=sizes / sizes.sum()))
    return rng.choice(groups[gi], size=batch_size, replace=True)


# ---------------------------------------------------------------------------
# metrics


METRICS_HEADER = "step,lr,loss,ppl_masked,wall_ms"


@dataclass
class MetricsRow:
    step: int
    lr: float
    loss: float
    ppl_masked: float
    wall_ms: float

    def format(self) -> str:
        return f"{self.step},{self.lr:.10g},{self.loss:.8g},{self.ppl_masked:.8g},{self.wall_ms:.3f}"


def per_position_nll(logits_data: np.ndarray, target_ids: np.ndarray) -> np.ndarray:
    """Negative log-likelihood per target position, computed outside the graph."""
    z = logits_data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, target_ids[..., None], axis=-1)[..., 0]
    return lse - picked


def masked_token_perplexity(result: ForwardResult) -> float:
    """exp(mean NLL) over MASKED positions of one forward result."""
    total, count = 0.0, 0
    for path in result.paths:
        hit = path.kinds == Kind.MASKED
        if hit.any():
            total += per_position_nll(path.logits.data, path.target_ids)[hit].sum()
            count += int(hit.sum())
    return float(np.exp(total / count)) if count else float("nan")


# ---------------------------------------------------------------------------
# pre-training loop


@dataclass
class TrainResult:
    metrics: list[MetricsRow]
    state: ModelState
    moments: AdamMoments
    rng: np.random.Generator


def pretrain(
    state: ModelState,
    dataset: CorpusDataset,
    opt_cfg: OptimizerConfig,
    train_cfg: TrainConfig,
    masking_cfg: MaskingConfig,
    *,
    moments: Optional[AdamMoments] = None,
    rng: Optional[np.random.Generator] = None,
    start_step: int = 0,
    out_dir=None,
    vocab: Optional[Vocabulary] = None,
    clock: Callable[[], float] = time.perf_counter,
) -> TrainResult:
    """Seeded pre-training: sample, corrupt, forward, backward, Adam, log.

    Pass ``moments``/``rng``/``start_step`` from a loaded checkpoint to resume;
    the continued run is bitwise identical to one that never stopped.
    """
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    if train_cfg.dropout_override is not None:
        state.cfg.dropout_p = train_cfg.dropout_override
        state.cfg.attn_dropout_p = train_cfg.dropout_override

    rng = rng if rng is not None else np.random.default_rng(train_cfg.seed)
    moments = moments if moments is not None else AdamMoments()
    named = list(state.named_parameters())
    groups = usable_row_groups(dataset, masking_cfg, state.cfg.arch)

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        fresh = start_step == 0
        metrics_fh = open(out_dir / "metrics.csv", "w" if fresh else "a")
        if fresh:
            metrics_fh.write(METRICS_HEADER + "\n")

    rows: list[MetricsRow] = []
    last_tick = clock()
    try:
        for step in range(start_step + 1, train_cfg.max_steps + 1):
            lr = lr_at(step, opt_cfg)
            batch_rows = _sample_batch(groups, rng, train_cfg.batch_size)
            ids = dataset.ids[batch_rows]
            cb = corrupt(ids, ids == PAD_ID, masking_cfg, state.cfg.vocab_size,
                         seed=int(rng.integers(2**63)))
            with Tape() as tape:
                result = forward(state, cb, rng=rng)
            backward(result.loss, tape)
            adam_update(named, moments, step, opt_cfg, lr=lr)

            now = clock()
            row = MetricsRow(step, lr, float(result.loss.data),
                             masked_token_perplexity(result), (now - last_tick) * 1000.0)
            last_tick = now
            rows.append(row)
            if metrics_fh is not None:
                metrics_fh.write(row.format() + "\n")
            if (
                out_dir is not None
                and train_cfg.checkpoint_every
                and step % train_cfg.checkpoint_every == 0
            ):
                checkpoint_save(out_dir / f"step{step}.ckpt", state, moments, step, rng, vocab=vocab)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if out_dir is not None:
        checkpoint_save(out_dir / "final.ckpt", state, moments, train_cfg.max_steps, rng, vocab=vocab)
    return TrainResult(rows, state, moments, rng)


# ---------------------------------------------------------------------------
# fine-tuning loop


def classification_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    batch = logits.data.shape[0]
    shaped = reshape(logits, (batch, 1, logits.data.shape[-1]))
    return masked_cross_entropy(shaped, labels.reshape(batch, 1), np.ones((batch, 1), bool))


def evaluate_classifier(cstate: ClassifierState, ids, pad, labels, batch_size=64) -> float:
    correct = 0
    for start in range(0, len(ids), batch_size):
        logits = models.classify_forward(cstate, ids[start : start + batch_size],
                                         pad[start : start + batch_size])
        correct += int((logits.data.argmax(-1) == labels[start : start + batch_size]).sum())
    return correct / len(ids)


def finetune_classifier(
    cstate: ClassifierState,
    ids: np.ndarray,
    pad: np.ndarray,
    labels: np.ndarray,
    opt_cfg: OptimizerConfig,
    train_cfg: TrainConfig,
    eval_every: int = 50,
    target_accuracy: Optional[float] = None,
) -> list[tuple[int, float]]:
    """Adam fine-tuning of the stripped encoder on a classification task.

    Returns (step, accuracy) checkpoints; stops early once ``target_accuracy``
    is reached, when given.
    """
    rng = np.random.default_rng(train_cfg.seed)
    named = list(cstate.named_parameters())
    moments = AdamMoments()
    trace = []
    for step in range(1, train_cfg.max_steps + 1):
        pick = rng.choice(len(ids), size=min(train_cfg.batch_size, len(ids)), replace=False)
        with Tape() as tape:
            logits = models.classify_forward(cstate, ids[pick], pad[pick], rng=rng)
            loss = classification_loss(logits, labels[pick])
        backward(loss, tape)
        adam_update(named, moments, step, opt_cfg, lr=lr_at(step, opt_cfg))
        if step % eval_every == 0 or step == train_cfg.max_steps:
            acc = evaluate_classifier(cstate, ids, pad, labels)
            trace.append((step, acc))
            if target_accuracy is not None and acc >= target_accuracy:
                break
    return trace


# ---------------------------------------------------------------------------
# checkpointing

_MAGIC = b"MLCK"
_VERSION = 1


@dataclass
class CheckpointBundle:
    state: ModelState
    moments: AdamMoments
    step: int
    rng: np.random.Generator
    vocab: Optional[Vocabulary]


def _array_entries(state: ModelState, moments: AdamMoments):
    for name, p in state.named_parameters():
        moments.ensure(name, p.data)
        yield f"param:{name}", p.data
        yield f"adam_m:{name}", moments.m[name]
        yield f"adam_v:{name}", moments.v[name]


def checkpoint_save(path, state: ModelState, moments: AdamMoments, step: int,
                    rng: np.random.Generator, vocab: Optional[Vocabulary] = None) -> None:
    """Versioned container: manifest JSON plus named little-endian f32 arrays."""
    if state.dtype != np.float32:
        raise CheckpointError(f"checkpoints store float32 states, model is {state.dtype}")
    entries = list(_array_entries(state, moments))
    manifest = {
        "version": _VERSION,
        "model_config": asdict(state.cfg),
        "step": int(step),
        "rng_state": rng.bit_generator.state,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in entries],
    }
    if vocab is not None:
        manifest["vocab"] = vocab.to_manifest()
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def checkpoint_load(path) -> CheckpointBundle:
    """Rebuild a resumable bundle; bit-exact round trip with checkpoint_save."""
    with open(path, "rb") as fh:
        head = fh.read(len(_MAGIC))
        if head != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
        version, blob_len = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {_VERSION}")
        blob = fh.read(blob_len)
        if len(blob) != blob_len:
            raise CheckpointError(f"{path}: truncated manifest")
        manifest = json.loads(blob.decode("utf-8"))

        cfg = ModelConfig(**manifest["model_config"])
        state = ModelState(cfg, seed=0, dtype=np.float32)
        moments = AdamMoments()
        params = dict(state.named_parameters())
        for entry in manifest["arrays"]:
            shape = tuple(entry["shape"])
            want = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
            raw = fh.read(want)
            if len(raw) != want:
                raise CheckpointError(f"{path}: truncated array {entry['name']!r}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            kind, name = entry["name"].split(":", 1)
            if kind == "param":
                params[name].data = arr
            elif kind == "adam_m":
                moments.m[name] = arr
            elif kind == "adam_v":
                moments.v[name] = arr
            else:
                raise CheckpointError(f"{path}: unknown array kind {kind!r}")
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after arrays")

    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng_state"]
    vocab = Vocabulary.from_manifest(manifest["vocab"]) if "vocab" in manifest else None
    return CheckpointBundle(state, moments, manifest["step"], rng, vocab)
