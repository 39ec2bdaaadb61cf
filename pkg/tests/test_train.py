import numpy as np
import pytest

from masklab.corruption import MaskingConfig
from masklab.data import build_vocab, encode_corpus, synth_corpus
from masklab.models import ARCH_LATE_SELF, ARCH_VANILLA, ModelConfig, init, strip_for_finetune
from masklab.tensor import Tensor
from masklab.train import (
    METRICS_HEADER,
    AdamMoments,
    CheckpointError,
    OptimizerConfig,
    TrainConfig,
    TrainingError,
    adam_update,
    checkpoint_load,
    checkpoint_save,
    classification_loss,
    decays,
    evaluate_classifier,
    lr_at,
    pretrain,
)


class TestSchedule:
    def test_endpoints_and_peak(self):
        cfg = OptimizerConfig(peak_lr=1e-3, total_steps=1000, warmup_proportion=0.06)
        warmup = round(0.06 * 1000)
        assert lr_at(0, cfg) == 0.0
        assert lr_at(warmup, cfg) == pytest.approx(1e-3)
        assert lr_at(1000, cfg) == 0.0

    def test_decay_midpoint_is_half_peak(self):
        cfg = OptimizerConfig(peak_lr=2e-3, total_steps=100, warmup_proportion=0.0)
        assert lr_at(50, cfg) == pytest.approx(1e-3)

    def test_piecewise_linear_and_peak_is_max(self):
        cfg = OptimizerConfig(peak_lr=5e-4, total_steps=200, warmup_proportion=0.1)
        values = [lr_at(s, cfg) for s in range(201)]
        assert max(values) == pytest.approx(5e-4)
        deltas = np.diff(values)
        assert (deltas[:19] > 0).all() and (deltas[21:] < 0).all()

    def test_rejects_bad_config(self):
        with pytest.raises(TrainingError):
            OptimizerConfig(peak_lr=0.0, total_steps=10)
        with pytest.raises(TrainingError):
            OptimizerConfig(peak_lr=1e-3, total_steps=10, warmup_proportion=1.0)


def scalar_param(value):
    return Tensor(np.array([value]), requires_grad=True, dtype=np.float64)


class TestAdam:
    def test_zero_gradient_zero_decay_is_identity(self):
        p = scalar_param(0.7)
        p.grad = np.zeros(1)
        cfg = OptimizerConfig(peak_lr=1e-3, total_steps=10, weight_decay=0.0)
        adam_update([("x.w", p)], AdamMoments(), 1, cfg)
        assert p.data[0] == 0.7

    def test_zero_lr_is_identity_bitwise(self):
        p = scalar_param(0.7)
        p.grad = np.array([0.42])
        cfg = OptimizerConfig(peak_lr=1e-3, total_steps=10)
        adam_update([("x.w", p)], AdamMoments(), 1, cfg, lr=0.0)
        assert p.data[0] == 0.7

    def test_constant_gradient_reaches_unit_step_times_lr(self):
        p = scalar_param(0.0)
        cfg = OptimizerConfig(peak_lr=0.01, total_steps=10, weight_decay=0.0)
        moments = AdamMoments()
        for step in range(1, 200):
            p.grad = np.array([3.0])
            before = p.data[0]
            adam_update([("x.w", p)], moments, step, cfg, lr=0.01)
            delta = p.data[0] - before
        assert delta == pytest.approx(-0.01, rel=1e-3)  # sign(-g) * lr

    def test_two_hand_steps_match(self):
        p = scalar_param(0.5)
        cfg = OptimizerConfig(peak_lr=0.1, total_steps=10, betas=(0.9, 0.98), eps=1e-6,
                              weight_decay=0.0)
        moments = AdamMoments()
        w, m, v = 0.5, 0.0, 0.0
        for step, g in ((1, 0.3), (2, -0.2)):
            p.grad = np.array([g])
            adam_update([("x.w", p)], moments, step, cfg, lr=0.1)
            m = 0.9 * m + 0.1 * g
            v = 0.98 * v + 0.02 * g * g
            mhat = m / (1 - 0.9**step)
            vhat = v / (1 - 0.98**step)
            w = w - 0.1 * mhat / (np.sqrt(vhat) + 1e-6)
            assert p.data[0] == pytest.approx(w, abs=1e-12)

    def test_nonfinite_gradient_names_parameter(self):
        p = scalar_param(0.0)
        p.grad = np.array([np.nan])
        cfg = OptimizerConfig(peak_lr=1e-3, total_steps=10)
        with pytest.raises(TrainingError, match="enc.0.q.w"):
            adam_update([("enc.0.q.w", p)], AdamMoments(), 1, cfg)

    def test_decay_hits_kernels_only(self):
        assert decays("enc.0.q.w") and decays("projection.w")
        for name in ("enc.0.q.b", "enc.0.ln1.gain", "enc.0.ln1.offset",
                     "embedding", "enc_pos", "latent_mask"):
            assert not decays(name)

    def test_zero_gradient_step_shrinks_kernel_but_not_norms(self):
        kernel = scalar_param(1.0)
        gain = scalar_param(1.0)
        bias = scalar_param(1.0)
        for p in (kernel, gain, bias):
            p.grad = np.zeros(1)
        cfg = OptimizerConfig(peak_lr=0.1, total_steps=10, weight_decay=0.01)
        adam_update([("a.w", kernel), ("a.ln.gain", gain), ("a.b", bias)], AdamMoments(), 1, cfg)
        assert kernel.data[0] < 1.0
        assert gain.data[0] == 1.0 and bias.data[0] == 1.0

    def test_global_norm_clip_rescales(self):
        p = Tensor(np.zeros(4), requires_grad=True, dtype=np.float64)
        p.grad = np.full(4, 10.0)
        moments = AdamMoments()
        cfg = OptimizerConfig(peak_lr=1.0, total_steps=10, weight_decay=0.0, grad_clip=1.0)
        adam_update([("p.w", p)], moments, 1, cfg, lr=1.0)
        clipped_norm = float(np.sqrt((moments.m["p.w"] / 0.1 * 0.1) ** 2).sum())
        assert np.linalg.norm(moments.m["p.w"] / 0.1) == pytest.approx(1.0, rel=1e-4)


@pytest.fixture(scope="module")
def tiny_corpus():
    lines = synth_corpus("trigram_grammar", 120, seed=3)
    vocab = build_vocab(lines)
    return vocab, encode_corpus(lines, vocab, n=32)


def tiny_model_cfg(vocab, arch=ARCH_VANILLA):
    return ModelConfig(arch=arch, vocab_size=len(vocab), n=32, l_en=1, d_en=16, h_en=2,
                       l_de=1, d_de=8, h_de=2, dropout_p=0.0, attn_dropout_p=0.0)


def quick_opt(total=10):
    return OptimizerConfig(peak_lr=1e-3, total_steps=total)


class TestPretrain:
    def test_metrics_log_and_format(self, tiny_corpus, tmp_path):
        vocab, ds = tiny_corpus
        state = init(tiny_model_cfg(vocab), seed=1)
        result = pretrain(state, ds, quick_opt(), TrainConfig(max_steps=3, seed=2),
                          MaskingConfig(rate=0.4), out_dir=tmp_path / "run", clock=lambda: 0.0)
        assert [r.step for r in result.metrics] == [1, 2, 3]
        text = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
        assert text[0] == METRICS_HEADER
        assert len(text) == 4
        assert (tmp_path / "run" / "final.ckpt").exists()

    def test_same_seed_byte_identical_metrics(self, tiny_corpus):
        vocab, ds = tiny_corpus
        rows = []
        for _ in range(2):
            state = init(tiny_model_cfg(vocab), seed=4)
            result = pretrain(state, ds, quick_opt(), TrainConfig(max_steps=4, seed=5),
                              MaskingConfig(rate=0.4), clock=lambda: 0.0)
            rows.append("\n".join(r.format() for r in result.metrics))
        assert rows[0] == rows[1]

    def test_step_at_zero_lr_keeps_parameters_bitwise(self, tiny_corpus):
        vocab, ds = tiny_corpus
        state = init(tiny_model_cfg(vocab), seed=6)
        before = {n: p.data.copy() for n, p in state.named_parameters()}
        # the very last step runs at lr_at(total)=0
        pretrain(state, ds, quick_opt(total=5), TrainConfig(max_steps=5, seed=7),
                 MaskingConfig(rate=0.4), start_step=4)
        for name, p in state.named_parameters():
            np.testing.assert_array_equal(before[name], p.data)

    def test_loss_decreases_on_smoke_run(self, tiny_corpus):
        vocab, ds = tiny_corpus
        state = init(tiny_model_cfg(vocab, ARCH_LATE_SELF), seed=8)
        result = pretrain(state, ds, OptimizerConfig(peak_lr=3e-3, total_steps=120),
                          TrainConfig(max_steps=120, seed=9), MaskingConfig(rate=0.4))
        first = np.mean([r.loss for r in result.metrics[:10]])
        last = np.mean([r.loss for r in result.metrics[-10:]])
        assert last < first

    def test_empty_dataset_rejected(self, tiny_corpus):
        vocab, ds = tiny_corpus
        state = init(tiny_model_cfg(vocab), seed=10)
        empty = type(ds)(ids=ds.ids[:0], n=ds.n)
        with pytest.raises(TrainingError, match="empty"):
            pretrain(state, empty, quick_opt(), TrainConfig(max_steps=1), MaskingConfig(rate=0.4))


class TestCheckpoint:
    def test_round_trip_bitwise(self, tiny_corpus, tmp_path):
        vocab, ds = tiny_corpus
        state = init(tiny_model_cfg(vocab), seed=11)
        result = pretrain(state, ds, quick_opt(), TrainConfig(max_steps=3, seed=12),
                          MaskingConfig(rate=0.4))
        path = tmp_path / "model.ckpt"
        checkpoint_save(path, state, result.moments, 3, result.rng, vocab=vocab)
        bundle = checkpoint_load(path)
        assert bundle.step == 3
        assert bundle.vocab.tokens == vocab.tokens
        for (name, p), (name2, q) in zip(state.named_parameters(),
                                         bundle.state.named_parameters()):
            assert name == name2
            np.testing.assert_array_equal(p.data, q.data)
        for name in bundle.moments.m:
            np.testing.assert_array_equal(bundle.moments.m[name], result.moments.m[name])
        assert bundle.rng.bit_generator.state == result.rng.bit_generator.state

    def test_resume_equals_uninterrupted_run(self, tiny_corpus, tmp_path):
        vocab, ds = tiny_corpus
        mcfg = MaskingConfig(rate=0.4)
        opt = quick_opt(total=10)

        full_state = init(tiny_model_cfg(vocab), seed=13)
        full = pretrain(full_state, ds, opt, TrainConfig(max_steps=10, seed=14), mcfg)

        half_state = init(tiny_model_cfg(vocab), seed=13)
        half = pretrain(half_state, ds, opt, TrainConfig(max_steps=5, seed=14), mcfg)
        path = tmp_path / "half.ckpt"
        checkpoint_save(path, half_state, half.moments, 5, half.rng)
        bundle = checkpoint_load(path)
        resumed = pretrain(bundle.state, ds, opt, TrainConfig(max_steps=10, seed=14), mcfg,
                           moments=bundle.moments, rng=bundle.rng, start_step=bundle.step)

        assert resumed.metrics[-1].loss == full.metrics[-1].loss  # bitwise, via float equality
        for (name, p), (_, q) in zip(full_state.named_parameters(),
                                     bundle.state.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data, err_msg=name)

    def test_corrupted_magic_rejected(self, tiny_corpus, tmp_path):
        vocab, ds = tiny_corpus
        state = init(tiny_model_cfg(vocab), seed=15)
        path = tmp_path / "bad.ckpt"
        checkpoint_save(path, state, AdamMoments(), 0, np.random.default_rng(0))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(raw)
        with pytest.raises(CheckpointError, match="magic"):
            checkpoint_load(path)

    def test_truncated_file_rejected(self, tiny_corpus, tmp_path):
        vocab, ds = tiny_corpus
        state = init(tiny_model_cfg(vocab), seed=16)
        path = tmp_path / "trunc.ckpt"
        checkpoint_save(path, state, AdamMoments(), 0, np.random.default_rng(0))
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 257])
        with pytest.raises(CheckpointError, match="truncated"):
            checkpoint_load(path)

    def test_version_mismatch_rejected(self, tiny_corpus, tmp_path):
        vocab, ds = tiny_corpus
        state = init(tiny_model_cfg(vocab), seed=17)
        path = tmp_path / "ver.ckpt"
        checkpoint_save(path, state, AdamMoments(), 0, np.random.default_rng(0))
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(raw)
        with pytest.raises(CheckpointError, match="version"):
            checkpoint_load(path)

    def test_float64_state_rejected(self, tiny_corpus, tmp_path):
        vocab, _ = tiny_corpus
        state = init(tiny_model_cfg(vocab), seed=18, dtype=np.float64)
        with pytest.raises(CheckpointError, match="float32"):
            checkpoint_save(tmp_path / "x.ckpt", state, AdamMoments(), 0, np.random.default_rng(0))


class TestClassifierHelpers:
    def test_classification_loss_matches_log_vocab_at_uniform(self):
        logits = Tensor(np.zeros((3, 4)), dtype=np.float64)
        loss = classification_loss(logits, np.array([0, 1, 2]))
        assert float(loss.data) == pytest.approx(np.log(4.0))

    def test_evaluate_classifier_counts_argmax(self, tiny_corpus):
        vocab, _ = tiny_corpus
        state = init(tiny_model_cfg(vocab), seed=19)
        stripped = strip_for_finetune(state, num_classes=2, seed=20)
        rng = np.random.default_rng(21)
        ids = rng.integers(5, len(vocab), size=(10, 32))
        pad = np.zeros_like(ids, bool)
        labels = np.zeros(10, dtype=np.int64)
        acc = evaluate_classifier(stripped, ids, pad, labels)
        assert 0.0 <= acc <= 1.0
