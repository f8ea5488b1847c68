import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from helpers import small_config
from rnnt.model import ModelConfig, init_params
from rnnt.tooling.data import ToyTaskSpec, gen_bias_task, gen_toy_data, toy_embeddings
from rnnt.tooling.metrics import WerReport, edit_ops, exact_match_rate, word_error_rate
from rnnt.tooling.train import TrainConfig, TrainingDiverged, forward_backward, make_batch, train

tokens = st.lists(st.sampled_from("abcd"), max_size=8)


class TestToyData:
    def test_same_seed_same_data(self):
        spec = ToyTaskSpec(seed=3)
        a, b = gen_toy_data(spec, 20, stream=1), gen_toy_data(spec, 20, stream=1)
        assert all(x.frames.tobytes() == y.frames.tobytes() and la == lb for (x, la), (y, lb) in zip(a, b))
        c = gen_toy_data(spec, 20, stream=2)
        assert any(la != lc for (_, la), (_, lc) in zip(a, c))

    def test_noiseless_single_frame_units_are_embeddings(self):
        spec = ToyTaskSpec(noise=0.0, min_frames=1, max_frames=1)
        emb = toy_embeddings(spec)
        for feats, labels in gen_toy_data(spec, 30):
            np.testing.assert_array_equal(feats.frames, emb[np.array(labels) - 1].astype(np.float32))

    def test_lengths_uniform(self):
        spec = ToyTaskSpec(noise=0.0, min_labels=1, max_labels=6)
        lengths = [len(y) for _, y in gen_toy_data(spec, 10_000)]
        counts = np.bincount(lengths, minlength=7)[1:]
        assert counts.sum() == 10_000
        assert chisquare(counts).pvalue > 0.01

    def test_labels_in_range_without_adjacent_repeats(self):
        spec = ToyTaskSpec()
        for feats, labels in gen_toy_data(spec, 300):
            assert all(1 <= k <= spec.vocab_size for k in labels)
            assert all(a != b for a, b in zip(labels, labels[1:]))
            assert 2 * len(labels) <= feats.T <= 4 * len(labels)
            assert feats.frame_period == spec.frame_period

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ToyTaskSpec(vocab_size=1)
        with pytest.raises(ValueError):
            ToyTaskSpec(min_labels=4, max_labels=2)
        with pytest.raises(ValueError):
            gen_toy_data(ToyTaskSpec(), 0)

    def test_bias_task_layout(self):
        task = gen_bias_task(ToyTaskSpec(), count=40, train_count=10)
        assert len(task.names) == 6 and len(task.train) == 10
        for split in (task.with_phrase, task.dev_with_phrase):
            assert len(split) == 40
            for _, labels in split:
                assert any(_contains(labels, s) for s in task.names.values())
        spellings = list(task.names.values())
        assert all(3 <= len(s) <= 4 for s in spellings)
        assert task.with_phrase[0][0].frames.tobytes() != task.dev_with_phrase[0][0].frames.tobytes()


def _contains(labels, spelling):
    n = len(spelling)
    return any(tuple(labels[i : i + n]) == tuple(spelling) for i in range(len(labels) - n + 1))


class TestTraining:
    config = ModelConfig.toy(feature_dim=6, vocab_size=4, encoder=dict(units=12, projection_dim=8),
                             prediction=dict(units=12, projection_dim=8, embed_dim=6), joint_dim=12)
    spec = ToyTaskSpec(vocab_size=4, feature_dim=6)

    def test_memorizes_one_utterance(self):
        data = gen_toy_data(self.spec, 1)
        result = train(data, self.config, TrainConfig(steps=150, batch_size=1, log_every=0))
        assert result.losses[-1] < 0.1

    def test_fixed_seed_is_reproducible(self):
        data = gen_toy_data(self.spec, 40)
        hyper = TrainConfig(steps=15, batch_size=8, log_every=0, seed=4)
        a, b = train(data, self.config, hyper), train(data, self.config, hyper)
        assert abs(a.losses[-1] - b.losses[-1]) < 1e-6
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    @pytest.mark.parametrize("optimizer", ["adam", "sgd"])
    def test_other_optimizers_reduce_loss(self, optimizer):
        data = gen_toy_data(self.spec, 1)
        lr = 0.01 if optimizer == "adam" else 0.1
        result = train(data, self.config, TrainConfig(steps=40, batch_size=1, optimizer=optimizer,
                                                      learning_rate=lr, log_every=0))
        assert result.losses[-1] < result.losses[0]

    def test_divergence_is_reported(self):
        data = gen_toy_data(self.spec, 4)
        params = init_params(self.config)
        params["joint.w_out"] = params["joint.w_out"] * np.nan
        with pytest.raises(TrainingDiverged, match="learning rate"):
            train(data, self.config, TrainConfig(steps=2, log_every=0), params=params)

    def test_batch_gradient_matches_finite_differences(self):
        config = small_config()
        spec = ToyTaskSpec(vocab_size=3, feature_dim=4, max_labels=3, min_frames=1, max_frames=3)
        rng = np.random.default_rng(0)
        params = {k: v + 0.3 * rng.normal(size=v.shape) for k, v in init_params(config, 1).items()}
        batch = make_batch(gen_toy_data(spec, 3), config)
        _, grads = forward_backward(params, config, batch)
        eps, worst = 1e-4, 0.0
        for name in ("enc.0.w_input", "enc.3.ln_gain", "pred.embed", "pred.1.proj", "joint.w_out"):
            flat = params[name].reshape(-1)
            for i in range(0, flat.size, max(1, flat.size // 6)):
                keep = flat[i]
                flat[i] = keep + eps
                up, _ = forward_backward(params, config, batch, compute_grads=False)
                flat[i] = keep - eps
                down, _ = forward_backward(params, config, batch, compute_grads=False)
                flat[i] = keep
                numeric = (up - down) / (2 * eps)
                a = grads[name].reshape(-1)[i]
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-6))
        assert worst < 1e-4

    def test_smoothing_diagnostic_flags_rising_loss(self, caplog):
        data = gen_toy_data(self.spec, 8)
        with caplog.at_level(logging.WARNING):
            result = train(data, self.config, TrainConfig(steps=100, learning_rate=50.0, grad_clip=100.0,
                                                          optimizer="sgd", log_every=0, batch_size=8))
        assert result.diagnostic is not None and result.diagnostic in caplog.text

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(optimizer="rmsprop")
        with pytest.raises(ValueError):
            train([], self.config)


class TestWer:
    def test_identical(self):
        assert word_error_rate(["a b c"], ["a b c"]).wer == 0.0

    def test_hand_alignment(self):
        report = word_error_rate(["a b c"], ["a c"])
        assert (report.substitutions, report.insertions, report.deletions) == (0, 0, 1)
        assert str(report).startswith("WER 33.33%")

    def test_classic_example(self):
        assert edit_ops("kitten", "sitting") == (2, 1, 0)

    def test_empty_reference(self, caplog):
        report = word_error_rate([""], ["a b"])
        assert report.wer == 2.0 and "empty reference" in caplog.text
        assert word_error_rate([""], [""]).wer == 0.0

    def test_label_tuples(self):
        assert word_error_rate([(1, 2, 3)], [(1, 4, 3)]).substitutions == 1
        assert exact_match_rate([(1,), (2,)], [(1,), (3,)]) == 0.5

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            word_error_rate(["a"], [])

    @given(tokens, tokens)
    def test_symmetry(self, x, y):
        s, i, d = edit_ops(x, y)
        s2, i2, d2 = edit_ops(y, x)
        assert s + i + d == s2 + i2 + d2
        assert (s, i, d) == (s2, d2, i2)

    @given(tokens, tokens)
    def test_counts_are_consistent(self, x, y):
        s, i, d = edit_ops(x, y)
        assert len(x) - d + i == len(y)
        assert max(len(x), len(y)) >= s + i + d >= abs(len(x) - len(y))

    @given(tokens, tokens, tokens)
    def test_triangle_inequality(self, x, y, z):
        assert sum(edit_ops(x, z)) <= sum(edit_ops(x, y)) + sum(edit_ops(y, z))

    def test_report_fields(self):
        report = WerReport(1, 2, 3, 12)
        assert report.errors == 6 and report.wer == 0.5
