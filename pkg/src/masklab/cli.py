"""Command-line surface: pretrain, eval-ppl, probe-mi, flops, finetune,
corrupt-dump, synth.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command echoes
its resolved configuration and seed so outputs are reproducible from the
printed text alone.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from pathlib import Path

import numpy as np

from masklab import models, probes, train
from masklab.config import DEFAULT_FLOPS_VOCAB, ConfigFileError, load_run_config
from masklab.corruption import CorruptedBatch, Kind, MaskingConfig, corrupt
from masklab.data import PAD_ID, Vocabulary, build_vocab, encode_corpus, synth_corpus
from masklab.flops import FlopsConfig, masking_rate_sweep, pretraining_flops, speedup


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); route to exit code 1
        raise UsageError(message)


_KIND_LETTERS = {Kind.NONE: "N", Kind.MASKED: "M", Kind.REPLACED: "R", Kind.KEPT: "K"}
_LETTER_KINDS = {v: k for k, v in _KIND_LETTERS.items()}


def write_corruption_dump(path, cb: CorruptedBatch) -> None:
    """One record per sequence: original ids, corrupted ids, kind letters."""
    with open(path, "w", encoding="utf-8") as fh:
        for b in range(cb.batch_size):
            original = " ".join(str(i) for i in cb.original_ids[b])
            corrupted = " ".join(str(i) for i in cb.corrupted_ids[b])
            kinds = "".join(_KIND_LETTERS[Kind(k)] for k in cb.kind[b])
            fh.write(f"{original}\t{corrupted}\t{kinds}\n")


def read_corruption_dump(path) -> CorruptedBatch:
    originals, correcteds, kinds = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            orig, corr, kind = line.rstrip("\n").split("\t")
            originals.append([int(t) for t in orig.split()])
            correcteds.append([int(t) for t in corr.split()])
            kinds.append([int(_LETTER_KINDS[c]) for c in kind])
    original = np.asarray(originals, dtype=np.int64)
    corrupted = np.asarray(correcteds, dtype=np.int64)
    kind = np.asarray(kinds, dtype=np.int8)
    return CorruptedBatch(
        original, corrupted, kind, original == PAD_ID,
        (kind == Kind.MASKED).sum(axis=1), (kind == Kind.REPLACED).sum(axis=1),
        (kind == Kind.KEPT).sum(axis=1),
    )


def _echo(args, run_config=None):
    print(f"command: {args.command}")
    if getattr(args, "seed", None) is not None:
        print(f"seed: {args.seed}")
    if run_config is not None:
        print(run_config.render())


def _load_corpus_for_checkpoint(bundle, corpus_path):
    if bundle.vocab is None:
        raise UsageError("checkpoint carries no vocabulary; cannot encode the corpus")
    return encode_corpus(corpus_path, bundle.vocab, bundle.state.cfg.n)


def _masking_from_args(args) -> MaskingConfig:
    return MaskingConfig(rate=args.rate, strategy=tuple(args.strategy))


def _strategy(text: str):
    parts = [float(p) for p in text.replace(",", " ").split()]
    if len(parts) != 3:
        raise UsageError(f"strategy needs three shares, got {text!r}")
    return parts


# ---------------------------------------------------------------------------
# commands


def _cmd_synth(args) -> int:
    _echo(args)
    out = synth_corpus(args.kind, args.size, args.seed, out_dir=args.out)
    lines = out[0] if isinstance(out, tuple) else out
    print(f"wrote {len(lines)} documents to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    run = load_run_config(args.config)
    if args.seed is not None:
        run.values["train"]["seed"] = args.seed
    args.seed = run.values["train"]["seed"]
    _echo(args, run)

    corpus = run["data"]["corpus"]
    if not corpus:
        raise UsageError("config [data] corpus is required for pretrain")
    if run["data"]["vocab"]:
        vocab = Vocabulary.load(run["data"]["vocab"])
    else:
        vocab = build_vocab(corpus, min_count=run["data"]["min_count"],
                            max_size=run["data"]["max_size"] or None)
    dataset = encode_corpus(corpus, vocab, run["model"]["n"])
    state = models.init(run.model_config(len(vocab)), seed=run["train"]["seed"])

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab.save(out_dir / "vocab.txt")
    (out_dir / "config.resolved.txt").write_text(run.render())
    result = train.pretrain(
        state, dataset, run.optimizer_config(), run.train_config(), run.masking_config(),
        out_dir=out_dir, vocab=vocab,
    )
    final = result.metrics[-1]
    print(f"finished step {final.step}: loss {final.loss:.4f}, masked ppl {final.ppl_masked:.2f}")
    print(f"checkpoint: {out_dir / 'final.ckpt'}")
    return 0


def _cmd_eval_ppl(args) -> int:
    _echo(args)
    bundle = train.checkpoint_load(args.ckpt)
    dataset = _load_corpus_for_checkpoint(bundle, args.corpus)
    categories = {
        "masked": [Kind.MASKED],
        "replaced": [Kind.REPLACED],
        "kept": [Kind.KEPT],
        "all": [Kind.MASKED, Kind.REPLACED, Kind.KEPT],
    }[args.category]
    value = probes.perplexity(bundle.state, dataset, _masking_from_args(args),
                              categories, seed=args.seed)
    print(f"perplexity[{args.category}] = {value:.6g}")
    return 0


def _cmd_probe_mi(args) -> int:
    _echo(args)
    bundle = train.checkpoint_load(args.ckpt)
    dataset = _load_corpus_for_checkpoint(bundle, args.corpus)
    cfg = probes.MIProbeConfig(num_token_labels=args.labels, k=args.k,
                               max_samples=args.samples, seed=args.seed)
    label_ids = bundle.vocab.top_frequent_ids(args.labels)
    profile = probes.mi_profile(bundle.state, dataset, cfg, _masking_from_args(args), label_ids)
    lines = ["layer,mi_bits,samples,k"]
    lines += [f"{p.layer},{p.mi_bits:.6f},{p.samples},{p.k}" for p in profile.points]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    print(text, end="")
    return 0


def _render_flops_report(report, baseline_cfg, ratio, sweep):
    lines = ["term                          flops"]
    for term, value in report.breakdown.items():
        lines.append(f"{term:<28}{float(value):>18.6g}")
    lines.append(f"{'total':<28}{float(report.total):>18.6g}")
    lines.append(f"{'forward_per_sequence':<28}{float(report.forward_per_sequence):>18.6g}")
    if ratio is not None:
        lines.append(f"speedup vs baseline ({baseline_cfg.arch} r={baseline_cfg.rate}): {ratio:.4f}")
    lines.append("")
    lines.append("[machine]")
    lines.append(f"arch={report.config.arch}")
    lines.append(f"rate={report.config.rate}")
    lines.append(f"total={float(report.total):.6f}")
    for term, value in report.breakdown.items():
        lines.append(f"{term}={float(value):.6f}")
    if ratio is not None:
        lines.append(f"speedup={ratio:.6f}")
    for r, s in sweep:
        lines.append(f"sweep_r_{r:g}={s:.6f}")
    return "\n".join(lines) + "\n"


def _cmd_flops(args) -> int:
    run = load_run_config(args.config)
    _echo(args, run)
    target = run.flops_config()
    report = pretraining_flops(target)
    if args.baseline:
        baseline = load_run_config(args.baseline).flops_config()
    else:
        baseline = FlopsConfig(
            arch=models.ARCH_VANILLA, n=target.n, vocab_size=target.vocab_size, rate=0.15,
            l_en=target.l_en, d_en=target.d_en,
            batch_size=target.batch_size, updates=target.updates,
        )
    ratio = speedup(baseline, target)
    sweep = []
    if args.sweep_r:
        try:
            start, stop, step = (float(p) for p in args.sweep_r.split(":"))
        except ValueError:
            raise UsageError(f"--sweep-r wants start:stop:step, got {args.sweep_r!r}")
        rates = np.arange(start, stop + 1e-9, step)
        sweep = masking_rate_sweep(target, baseline, [round(float(r), 6) for r in rates])
    text = _render_flops_report(report, baseline, ratio, sweep)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    print(text, end="")
    return 0


def _cmd_finetune(args) -> int:
    _echo(args)
    bundle = train.checkpoint_load(args.ckpt)
    task_dir = Path(args.task)
    corpus = task_dir / "corpus.txt"
    labels_file = task_dir / "labels.txt"
    if not corpus.exists() or not labels_file.exists():
        raise UsageError(f"task directory {task_dir} needs corpus.txt and labels.txt")
    labels = np.array([int(l) for l in labels_file.read_text().split()], dtype=np.int64)
    dataset = _load_corpus_for_checkpoint(bundle, corpus)
    if len(dataset) != len(labels):
        raise UsageError(f"{len(dataset)} sequences vs {len(labels)} labels; documents must be single-chunk")

    stripped = models.strip_for_finetune(bundle.state, int(labels.max()) + 1, seed=args.seed)
    opt = train.OptimizerConfig(peak_lr=args.lr, total_steps=args.steps, weight_decay=0.01)
    tc = train.TrainConfig(batch_size=32, max_steps=args.steps, seed=args.seed)
    trace = train.finetune_classifier(stripped, dataset.ids, dataset.pad, labels, opt, tc,
                                      target_accuracy=args.target_accuracy)
    for step, acc in trace:
        print(f"step {step}: accuracy {acc:.4f}")
    print(f"final accuracy: {trace[-1][1]:.4f}")
    return 0


def _cmd_corrupt_dump(args) -> int:
    _echo(args)
    if args.vocab:
        vocab = Vocabulary.load(args.vocab)
    else:
        vocab = build_vocab(args.corpus)
    dataset = encode_corpus(args.corpus, vocab, args.n)
    cb = corrupt(dataset.ids, dataset.pad, _masking_from_args(args), len(vocab), seed=args.seed)
    write_corruption_dump(args.out, cb)
    print(f"wrote {cb.batch_size} records to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="masklab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--kind", choices=["trigram_grammar", "separable_classification"], required=True)
    p.add_argument("--size", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("pretrain", help="pre-train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="run")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("eval-ppl", help="masked-LM perplexity of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--category", choices=["masked", "replaced", "kept", "all"], default="all")
    p.add_argument("--rate", type=float, default=0.4)
    p.add_argument("--strategy", type=_strategy, default=[0.8, 0.1, 0.1])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_eval_ppl)

    p = sub.add_parser("probe-mi", help="layerwise mutual-information profile")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--k", type=int, default=200)
    p.add_argument("--labels", type=int, default=50)
    p.add_argument("--samples", type=int, default=50000)
    p.add_argument("--rate", type=float, default=0.4)
    p.add_argument("--strategy", type=_strategy, default=[0.8, 0.1, 0.1])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="")
    p.set_defaults(func=_cmd_probe_mi)

    p = sub.add_parser("flops", help="closed-form training FLOPs and speedups")
    p.add_argument("--config", required=True)
    p.add_argument("--baseline", default="")
    p.add_argument("--sweep-r", dest="sweep_r", default="")
    p.add_argument("--out", default="")
    p.set_defaults(func=_cmd_flops)

    p = sub.add_parser("finetune", help="strip the decoder and train a classifier")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target-accuracy", dest="target_accuracy", type=float, default=None)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("corrupt-dump", help="serialize corrupted batches as TSV")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", default="")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--rate", type=float, default=0.4)
    p.add_argument("--strategy", type=_strategy, default=[0.8, 0.1, 0.1])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_corrupt_dump)

    return parser


def cli(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigFileError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure with diagnostics
        traceback.print_exc()
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli(sys.argv[1:]))
