import numpy as np
import pytest

from masklab.cli import cli, read_corruption_dump, write_corruption_dump
from masklab.corruption import Kind
from masklab.data import MASK_ID, NUM_SPECIAL, build_vocab, synth_corpus
from masklab.models import ARCH_VANILLA, ModelConfig, init
from masklab.train import AdamMoments, checkpoint_save


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    synth_corpus("trigram_grammar", 150, seed=1, out_dir=out)
    return out / "corpus.txt"


def run_config(tmp_path, corpus_file, extra=""):
    path = tmp_path / "run.cfg"
    path.write_text(
        "[model]\narch = vanilla\nn = 32\nl_en = 1\nd_en = 16\nh_en = 2\n"
        "[train]\nmax_steps = 4\nbatch_size = 8\nseed = 3\n"
        "[optimizer]\ntotal_steps = 4\n"
        f"[data]\ncorpus = {corpus_file}\n" + extra
    )
    return path


class TestExitCodes:
    def test_missing_subcommand_is_usage_error(self, capsys):
        assert cli([]) == 1
        assert "usage error" in capsys.readouterr().err

    def test_unknown_flag_is_usage_error(self, capsys):
        assert cli(["synth", "--kind", "trigram_grammar", "--frobnicate"]) == 1

    def test_bad_config_is_usage_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[model]\nwidth = 9\n")
        assert cli(["flops", "--config", str(bad)]) == 1

    def test_runtime_failure_is_exit_two(self, tmp_path, capsys):
        missing = tmp_path / "none.ckpt"
        assert cli(["eval-ppl", "--ckpt", str(missing), "--corpus", str(missing)]) == 2


class TestSynth:
    def test_writes_reproducible_corpus(self, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert cli(["synth", "--kind", "trigram_grammar", "--size", "30",
                        "--seed", "7", "--out", str(out)]) == 0
        assert (a / "corpus.txt").read_bytes() == (b / "corpus.txt").read_bytes()
        assert "seed: 7" in capsys.readouterr().out

    def test_classification_writes_labels(self, tmp_path):
        out = tmp_path / "cls"
        assert cli(["synth", "--kind", "separable_classification", "--size", "20",
                    "--seed", "1", "--out", str(out)]) == 0
        assert (out / "labels.txt").exists()


class TestFlops:
    def test_large_recipe_prints_published_speedup(self, tmp_path, capsys):
        cfg = tmp_path / "large.cfg"
        cfg.write_text(
            "[model]\narch = late_self\nn = 128\nl_en = 24\nd_en = 1024\nl_de = 2\nd_de = 512\n"
            "[masking]\nrate = 0.4\n"
        )
        assert cli(["flops", "--config", str(cfg)]) == 0
        out = capsys.readouterr().out
        machine = dict(
            line.split("=", 1) for line in out.splitlines() if "=" in line and "[" not in line
        )
        assert float(machine["speedup"]) == pytest.approx(1.34, abs=0.02)

    def test_sweep_and_output_file(self, tmp_path, capsys):
        cfg = tmp_path / "sweep.cfg"
        cfg.write_text("[model]\narch = late_self\nn = 128\nl_en = 24\nd_en = 1024\n"
                       "l_de = 2\nd_de = 512\n[masking]\nrate = 0.5\n")
        report = tmp_path / "report.txt"
        assert cli(["flops", "--config", str(cfg), "--sweep-r", "0.2:0.5:0.1",
                    "--out", str(report)]) == 0
        text = report.read_text()
        assert "sweep_r_0.2=" in text and "sweep_r_0.5=" in text
        capsys.readouterr()

    def test_explicit_baseline_config(self, tmp_path, capsys):
        target = tmp_path / "t.cfg"
        target.write_text("[model]\narch = late_self\nn = 128\nl_en = 24\nd_en = 1024\n"
                          "l_de = 2\nd_de = 512\n[masking]\nrate = 0.5\n")
        baseline = tmp_path / "b.cfg"
        baseline.write_text("[model]\narch = vanilla\nn = 128\nl_en = 24\nd_en = 1024\n"
                            "[masking]\nrate = 0.15\n")
        assert cli(["flops", "--config", str(target), "--baseline", str(baseline)]) == 0
        out = capsys.readouterr().out
        machine = dict(l.split("=", 1) for l in out.splitlines() if "=" in l and "[" not in l)
        assert float(machine["speedup"]) == pytest.approx(1.47, abs=0.02)


class TestPretrainCli:
    def test_writes_artifacts_and_is_seed_deterministic(self, tmp_path, corpus_file, capsys):
        cfg = run_config(tmp_path, corpus_file)
        outs = [tmp_path / "run1", tmp_path / "run2"]
        for out in outs:
            assert cli(["pretrain", "--config", str(cfg), "--out", str(out)]) == 0
        capsys.readouterr()
        for out in outs:
            assert (out / "metrics.csv").exists()
            assert (out / "vocab.txt").exists()
            assert (out / "final.ckpt").exists()
            assert (out / "config.resolved.txt").exists()

        def stable_columns(path):
            lines = (path / "metrics.csv").read_text().splitlines()
            return [",".join(l.split(",")[:4]) for l in lines]  # drop wall_ms

        assert stable_columns(outs[0]) == stable_columns(outs[1])
        assert (outs[0] / "vocab.txt").read_bytes() == (outs[1] / "vocab.txt").read_bytes()

    def test_seed_flag_overrides_config(self, tmp_path, corpus_file, capsys):
        cfg = run_config(tmp_path, corpus_file)
        out = tmp_path / "seeded"
        assert cli(["pretrain", "--config", str(cfg), "--out", str(out), "--seed", "99"]) == 0
        assert "seed: 99" in capsys.readouterr().out


class TestEvalPpl:
    def test_fresh_checkpoint_near_uniform(self, tmp_path, capsys):
        # vocabulary of exactly 64 ids; an untrained model scores near |V|
        tokens = " ".join(f"t{i:02d}" for i in range(59))
        corpus = tmp_path / "c.txt"
        corpus.write_text("\n".join(tokens for _ in range(30)) + "\n")
        vocab = build_vocab(corpus)
        assert len(vocab) == 64
        cfg = ModelConfig(arch=ARCH_VANILLA, vocab_size=64, n=32, l_en=1, d_en=16, h_en=2,
                          dropout_p=0.0, attn_dropout_p=0.0)
        state = init(cfg, seed=0)
        ckpt = tmp_path / "fresh.ckpt"
        checkpoint_save(ckpt, state, AdamMoments(), 0, np.random.default_rng(0), vocab=vocab)
        assert cli(["eval-ppl", "--ckpt", str(ckpt), "--corpus", str(corpus),
                    "--category", "all"]) == 0
        out = capsys.readouterr().out
        value = float(out.rsplit("=", 1)[1])
        assert 50 < value < 85


class TestProbeMiCli:
    def test_writes_profile_csv(self, tmp_path, corpus_file, capsys):
        vocab = build_vocab(corpus_file)
        cfg = ModelConfig(arch=ARCH_VANILLA, vocab_size=len(vocab), n=32, l_en=1, d_en=16,
                          h_en=2, dropout_p=0.0, attn_dropout_p=0.0)
        state = init(cfg, seed=1)
        ckpt = tmp_path / "m.ckpt"
        checkpoint_save(ckpt, state, AdamMoments(), 0, np.random.default_rng(0), vocab=vocab)
        out_csv = tmp_path / "mi.csv"
        assert cli(["probe-mi", "--ckpt", str(ckpt), "--corpus", str(corpus_file),
                    "--k", "8", "--labels", "20", "--samples", "400",
                    "--out", str(out_csv)]) == 0
        capsys.readouterr()
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "layer,mi_bits,samples,k"
        assert len(lines) == 3  # layers 0 and 1


class TestFinetuneCli:
    def test_runs_and_reports_accuracy(self, tmp_path, capsys):
        task = tmp_path / "task"
        synth_corpus("separable_classification", 60, seed=5, out_dir=task)
        vocab = build_vocab(task / "corpus.txt")
        cfg = ModelConfig(arch=ARCH_VANILLA, vocab_size=len(vocab), n=32, l_en=1, d_en=16,
                          h_en=2, dropout_p=0.0, attn_dropout_p=0.0)
        state = init(cfg, seed=2)
        ckpt = tmp_path / "f.ckpt"
        checkpoint_save(ckpt, state, AdamMoments(), 0, np.random.default_rng(0), vocab=vocab)
        assert cli(["finetune", "--ckpt", str(ckpt), "--task", str(task),
                    "--steps", "60", "--lr", "2e-3"]) == 0
        out = capsys.readouterr().out
        assert "final accuracy" in out


class TestCorruptDump:
    def test_dump_reparses_with_invariants(self, tmp_path, corpus_file, capsys):
        out = tmp_path / "dump.tsv"
        assert cli(["corrupt-dump", "--corpus", str(corpus_file), "--n", "32",
                    "--rate", "0.4", "--seed", "11", "--out", str(out)]) == 0
        capsys.readouterr()
        cb = read_corruption_dump(out)
        assert (cb.kind[cb.pad] == Kind.NONE).all()
        masked = cb.kind == Kind.MASKED
        assert (cb.corrupted_ids[masked] == MASK_ID).all()
        untouched = (cb.kind == Kind.NONE) | (cb.kind == Kind.KEPT)
        np.testing.assert_array_equal(cb.corrupted_ids[untouched], cb.original_ids[untouched])
        replaced = cb.kind == Kind.REPLACED
        assert (cb.corrupted_ids[replaced] >= NUM_SPECIAL).all()
        assert masked.any() and replaced.any()

    def test_round_trip_write_read(self, tmp_path, corpus_file):
        from masklab.corruption import MaskingConfig, corrupt
        from masklab.data import encode_corpus

        vocab = build_vocab(corpus_file)
        ds = encode_corpus(corpus_file, vocab, 32)
        cb = corrupt(ds.ids[:8], ds.pad[:8], MaskingConfig(rate=0.3), len(vocab), seed=3)
        path = tmp_path / "rt.tsv"
        write_corruption_dump(path, cb)
        back = read_corruption_dump(path)
        np.testing.assert_array_equal(back.original_ids, cb.original_ids)
        np.testing.assert_array_equal(back.corrupted_ids, cb.corrupted_ids)
        np.testing.assert_array_equal(back.kind, cb.kind)
        np.testing.assert_array_equal(back.n_mask, cb.n_mask)
