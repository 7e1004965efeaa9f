"""Model contracts: shapes, causality, mixture math, losses, ablation switches."""

import numpy as np
import pytest

from chae import model as M
from chae import tensor as T
from chae import textcodec as tc
from gradcheck import check_gradients

RNG = np.random.default_rng(7)


def tiny_vocab():
    return tc.Vocabulary.build(
        tc.tokenize("tom ran home . people hid inside man to catch the thief felt scared")
    )


def tiny_input(vocab, k=2):
    spec = tc.ChaeSpec(conditions=(
        tc.ChaeCondition(name="people", actions=(), emotion="fear"),
        tc.ChaeCondition(name="man", actions=("to catch the thief",), emotion="anger"),
    ))
    return tc.assemble_input(tc.tokenize("Tom ran home."), spec, vocab, k=k), spec


def tiny_model(vocab, **overrides):
    defaults = dict(
        vocab_size=len(vocab), d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1,
        d_ff=24, k=2, n_emotions=9, max_len=64,
    )
    defaults.update(overrides)
    return M.ChaeModel.create(M.ModelConfig(**defaults), seed=3)


class TestConfig:
    def test_rejects_indivisible_heads(self):
        with pytest.raises(M.ConfigError, match="divisible"):
            M.ModelConfig(vocab_size=32, d_model=10, n_heads=4)

    def test_rejects_bad_vocab(self):
        with pytest.raises(M.ConfigError, match="vocab_size"):
            M.ModelConfig(vocab_size=5)

    def test_round_trips_through_dict(self):
        cfg = M.ModelConfig(vocab_size=32, d_model=8, n_heads=2)
        assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestPositions:
    def test_shape_and_range(self):
        table = M.sinusoidal_positions(20, 8)
        assert table.shape == (20, 8)
        assert np.abs(table).max() <= 1.0

    def test_first_row_alternates_zero_one(self):
        table = M.sinusoidal_positions(4, 6)
        np.testing.assert_allclose(table[0], [0, 1, 0, 1, 0, 1], atol=1e-12)

    def test_odd_dimension_supported(self):
        assert M.sinusoidal_positions(5, 7).shape == (5, 7)


class TestShapesAndDeterminism:
    def test_encoder_decoder_shapes(self):
        vocab = tiny_vocab()
        model = tiny_model(vocab)
        mi, _ = tiny_input(vocab)
        target = np.array(vocab.encode(tc.tokenize("people hid inside .")) + [tc.EOS_ID])
        h_enc = model.encode(mi)
        assert h_enc.shape == (len(mi.ids), 16)
        out = model.forward(mi, target, emotion_ids=(2, 6), active=(True, True))
        t_dec = len(target)
        assert out.probs.shape == (t_dec, len(vocab))
        assert out.p_gen.shape == (t_dec, 1)
        assert out.attn_avg.shape == (t_dec, len(mi.ids))
        assert out.h_dec.shape == (t_dec, 16)
        assert len(out.emotion_dists) == 2
        assert out.emotion_dists[0].shape == (1, 9)

    def test_seeded_init_is_reproducible(self):
        vocab = tiny_vocab()
        a = M.init_params(M.ModelConfig(vocab_size=len(vocab), d_model=8, n_heads=2), seed=11)
        b = M.init_params(M.ModelConfig(vocab_size=len(vocab), d_model=8, n_heads=2), seed=11)
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_forward_is_bit_deterministic(self):
        vocab = tiny_vocab()
        model = tiny_model(vocab)
        mi, _ = tiny_input(vocab)
        target = np.array(vocab.encode(["people", "hid", "."]) + [tc.EOS_ID])
        a = model.forward(mi, target, (2, 6), (True, True))
        b = model.forward(mi, target, (2, 6), (True, True))
        np.testing.assert_array_equal(a.probs.data, b.probs.data)
        np.testing.assert_array_equal(a.total.data, b.total.data)

    def test_max_len_guard(self):
        vocab = tiny_vocab()
        model = tiny_model(vocab, max_len=8)
        mi, _ = tiny_input(vocab)
        with pytest.raises(M.ConfigError, match="max_len"):
            model.encode(mi)


class TestCausality:
    def test_future_target_edit_leaves_earlier_rows_unchanged(self):
        vocab = tiny_vocab()
        model = tiny_model(vocab)
        mi, _ = tiny_input(vocab)
        base = np.array(vocab.encode(["people", "hid", "inside", "."]) + [tc.EOS_ID])
        edited = base.copy()
        t = 2
        edited[t] = vocab.id_of("man")
        a = model.forward(mi, base, (2, 6), (True, True))
        b = model.forward(mi, edited, (2, 6), (True, True))
        np.testing.assert_array_equal(a.probs.data[: t + 1], b.probs.data[: t + 1])
        assert not np.array_equal(a.probs.data[t + 1], b.probs.data[t + 1])


class TestVocabDistribution:
    def test_zero_weights_give_uniform(self):
        h = T.tensor(RNG.normal(size=(3, 8)))
        p = M.vocab_distribution(h, T.tensor(np.zeros((8, 12))), T.tensor(np.zeros(12)))
        np.testing.assert_allclose(p.data, np.full((3, 12), 1 / 12), atol=1e-15)

    def test_temperature_sharpens(self):
        h = T.tensor(RNG.normal(size=(1, 8)))
        w, b = T.tensor(RNG.normal(size=(8, 12))), T.tensor(np.zeros(12))
        cool = M.vocab_distribution(h, w, b, temperature=0.5).data
        warm = M.vocab_distribution(h, w, b, temperature=1.0).data
        assert cool.max() > warm.max()
        np.testing.assert_allclose(cool.sum(), 1.0, atol=1e-12)

    def test_near_zero_temperature_is_finite_one_hot(self):
        h = T.tensor(RNG.normal(size=(1, 8)))
        w, b = T.tensor(RNG.normal(size=(8, 12))), T.tensor(np.zeros(12))
        p = M.vocab_distribution(h, w, b, temperature=1e-6).data
        assert np.isfinite(p).all()
        assert p.max() > 1 - 1e-9

    def test_rejects_nonpositive_temperature(self):
        with pytest.raises(M.ConfigError, match="temperature"):
            M.vocab_distribution(T.tensor(np.zeros((1, 4))), T.tensor(np.zeros((4, 6))), T.tensor(np.zeros(6)), 0.0)


class TestAverageAttention:
    def test_head_mean_then_mask_then_renormalize(self):
        attn = T.tensor(np.array([
            [[0.25, 0.25, 0.25, 0.25]],
            [[0.10, 0.20, 0.30, 0.40]],
        ]))  # (heads=2, T_dec=1, T_enc=4)
        mask = np.array([False, True, True, False])
        avg = M.average_attention(attn, mask)
        # head mean = [.175, .225, .275, .325]; restricted [.225, .275] / .5
        np.testing.assert_allclose(avg.data, [[0.0, 0.45, 0.55, 0.0]], atol=1e-12)

    def test_rows_sum_to_one_over_condition_region(self):
        raw = RNG.dirichlet(np.ones(6), size=(2, 5))
        attn = T.tensor(raw)
        mask = np.array([False, True, True, True, False, False])
        avg = M.average_attention(attn, mask).data
        np.testing.assert_allclose(avg.sum(axis=-1), np.ones(5), atol=1e-12)
        assert (avg[:, ~mask] == 0).all()

    def test_zero_mass_rows_fall_back_to_uniform(self):
        attn = T.tensor(np.array([[[0.5, 0.5, 0.0, 0.0]]]))
        mask = np.array([False, False, True, True])
        avg = M.average_attention(attn, mask)
        np.testing.assert_allclose(avg.data, [[0.0, 0.0, 0.5, 0.5]], atol=1e-15)

    def test_empty_mask_rejected(self):
        with pytest.raises(T.ShapeError, match="empty"):
            M.average_attention(T.tensor(np.ones((1, 1, 3)) / 3), np.zeros(3, dtype=bool))


class TestMixture:
    def test_hand_example(self):
        # uniform vocab of 4, p_gen 0.5, copy mass 0.5+0.5 on token id 1
        p_voc = T.tensor(np.full((1, 4), 0.25))
        attn = T.tensor(np.array([[0.5, 0.5]]))
        copy = M.copy_distribution(attn, np.array([1, 1]), 4)
        mixed = M.mixture_distribution(T.tensor([[0.5]]), p_voc, copy)
        np.testing.assert_allclose(mixed.data, [[0.125, 0.625, 0.125, 0.125]], atol=1e-12)

    def test_rows_sum_to_one_on_random_states(self):
        for _ in range(50):
            t_dec, t_enc, v = 3, 6, 10
            p_voc = T.tensor(RNG.dirichlet(np.ones(v), size=t_dec))
            attn = T.tensor(RNG.dirichlet(np.ones(t_enc), size=t_dec))
            ids = RNG.integers(0, v, size=t_enc)
            p_gen = T.tensor(RNG.uniform(size=(t_dec, 1)))
            mixed = M.mixture_distribution(p_gen, p_voc, M.copy_distribution(attn, ids, v))
            np.testing.assert_allclose(mixed.data.sum(axis=-1), np.ones(t_dec), atol=1e-9)

    def test_pure_generation_is_exactly_vocab(self):
        p_voc = T.tensor(RNG.dirichlet(np.ones(8), size=2))
        copy = M.copy_distribution(T.tensor(RNG.dirichlet(np.ones(3), size=2)), np.array([1, 2, 3]), 8)
        mixed = M.mixture_distribution(T.tensor(np.ones((2, 1))), p_voc, copy)
        np.testing.assert_array_equal(mixed.data, p_voc.data)

    def test_pure_copy_is_exactly_scatter(self):
        attn = T.tensor(RNG.dirichlet(np.ones(3), size=2))
        copy = M.copy_distribution(attn, np.array([4, 4, 0]), 8)
        p_voc = T.tensor(RNG.dirichlet(np.ones(8), size=2))
        mixed = M.mixture_distribution(T.tensor(np.zeros((2, 1))), p_voc, copy)
        np.testing.assert_array_equal(mixed.data, copy.data)

    def test_copy_distribution_adds_repeated_ids(self):
        attn = T.tensor(np.array([[0.2, 0.3, 0.5]]))
        copy = M.copy_distribution(attn, np.array([2, 5, 2]), 6)
        np.testing.assert_allclose(copy.data, [[0, 0, 0.7, 0, 0, 0.3]], atol=1e-12)

    def test_copy_support_restricted_to_condition_tokens(self):
        vocab = tiny_vocab()
        model = tiny_model(vocab)
        mi, spec = tiny_input(vocab)
        target = np.array(vocab.encode(["people", "hid", "."]) + [tc.EOS_ID])
        out = model.forward(mi, target, (2, 6), (True, True))
        copy_part = out.probs.data - out.p_gen.data * M.vocab_distribution(
            T.tensor(out.h_dec.data), model.params["w_voc"], model.params["b_voc"]
        ).data
        chae_ids = set(mi.chae_ids.tolist())
        outside = [v for v in range(len(vocab)) if v not in chae_ids]
        np.testing.assert_allclose(copy_part[:, outside], 0.0, atol=1e-12)


class TestCopyGate:
    def test_zero_weights_give_half(self):
        h = T.tensor(RNG.normal(size=(4, 8)))
        c = T.tensor(RNG.normal(size=(4, 8)))
        e = T.tensor(RNG.normal(size=(4, 8)))
        p = M.copy_gate(h, c, e, T.tensor(np.zeros((24, 1))))
        np.testing.assert_allclose(p.data, np.full((4, 1), 0.5), atol=1e-15)

    def test_output_in_open_interval(self):
        vocab = tiny_vocab()
        model = tiny_model(vocab)
        mi, _ = tiny_input(vocab)
        target = np.array(vocab.encode(["people", "hid", "."]) + [tc.EOS_ID])
        out = model.forward(mi, target, (2, 6), (True, True))
        assert (out.p_gen.data > 0).all() and (out.p_gen.data < 1).all()


class TestLosses:
    def test_nll_of_uniform_model_is_log_vocab(self):
        v = 24
        probs = T.tensor(np.full((5, v), 1.0 / v))
        loss = M.nll_loss(probs, np.arange(5))
        np.testing.assert_allclose(loss.data, np.log(v), atol=1e-12)

    def test_emotion_loss_uniform_is_log_nine(self):
        dists = [T.tensor(np.full((1, 9), 1 / 9)), T.tensor(np.full((1, 9), 1 / 9))]
        loss = M.emotion_loss(dists, labels=(0, 3), active=(True, True), class_weights=np.ones(9))
        np.testing.assert_allclose(loss.data, np.log(9), atol=1e-12)

    def test_emotion_loss_respects_class_weights(self):
        dists = [T.tensor(np.full((1, 9), 1 / 9))]
        weights = np.ones(9)
        weights[4] = 2.5
        loss = M.emotion_loss(dists, labels=(4,), active=(True,), class_weights=weights)
        np.testing.assert_allclose(loss.data, 2.5 * np.log(9), atol=1e-12)

    def test_inactive_heads_are_ignored(self):
        sharp = np.full((1, 9), 1e-6)
        sharp[0, 0] = 1 - 8e-6
        dists = [T.tensor(np.full((1, 9), 1 / 9)), T.tensor(sharp)]
        both = M.emotion_loss(dists, labels=(0, 8), active=(True, False))
        solo = M.emotion_loss(dists[:1], labels=(0,), active=(True,))
        np.testing.assert_allclose(both.data, solo.data, atol=1e-15)

    def test_no_active_heads_gives_zero(self):
        dists = [T.tensor(np.full((1, 9), 1 / 9))]
        assert M.emotion_loss(dists, labels=(0,), active=(False,)).item() == 0.0

    def test_total_combines_with_lambda(self):
        nll, emo = T.tensor(2.0), T.tensor(0.5)
        np.testing.assert_allclose(M.total_loss(nll, emo, 1.0).data, 2.5)
        np.testing.assert_allclose(M.total_loss(nll, emo, 0.25).data, 2.125)
        np.testing.assert_allclose(M.total_loss(nll, None, 1.0).data, 2.0)


class TestAblations:
    def test_copy_disabled_yields_pure_vocab_distribution(self):
        vocab = tiny_vocab()
        model = tiny_model(vocab, enable_copy=False)
        mi, _ = tiny_input(vocab)
        target = np.array(vocab.encode(["people", "hid", "."]) + [tc.EOS_ID])
        out = model.forward(mi, target, (2, 6), (True, True))
        assert out.p_gen is None and out.attn_avg is None
        h_enc = model.encode(mi)
        prefix = np.concatenate(([tc.BOS_ID], target[:-1]))
        dec = model.decode(prefix, h_enc)
        expected = M.vocab_distribution(dec.h_dec, model.params["w_voc"], model.params["b_voc"])
        np.testing.assert_array_equal(out.probs.data, expected.data)

    def test_emotion_disabled_total_equals_nll(self):
        vocab = tiny_vocab()
        model = tiny_model(vocab, enable_emotion_loss=False)
        mi, _ = tiny_input(vocab)
        target = np.array(vocab.encode(["people", "hid", "."]) + [tc.EOS_ID])
        out = model.forward(mi, target, (2, 6), (True, True))
        assert out.emo is None
        np.testing.assert_array_equal(out.total.data, out.nll.data)

    def test_emotion_gradient_flows_iff_enabled(self):
        vocab = tiny_vocab()
        mi, _ = tiny_input(vocab)
        target = np.array(vocab.encode(["people", "hid", "."]) + [tc.EOS_ID])
        for enabled in (True, False):
            model = tiny_model(vocab, enable_emotion_loss=enabled)
            out = model.forward(mi, target, (2, 6), (True, True))
            T.backward(out.total)
            grad = model.params["w_emo0"].grad
            if enabled:
                assert grad is not None and np.abs(grad).max() > 0
            else:
                assert grad is None


class TestFullModelGradients:
    def test_all_parameter_gradients_match_finite_differences(self):
        vocab = tiny_vocab()
        model = tiny_model(
            vocab, d_model=8, n_heads=2, d_ff=12, max_len=64,
        )
        mi, _ = tiny_input(vocab)
        target = np.array(vocab.encode(["people", "hid", "."]) + [tc.EOS_ID])
        weights = np.ones(9)
        weights[2], weights[6] = 1.5, 0.75

        def build():
            return model.forward(mi, target, (2, 6), (True, True), class_weights=weights).total

        leaves = list(model.params.values())
        assert check_gradients(build, leaves, floor=1e-3) < 1e-3
