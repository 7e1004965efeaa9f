"""Decoding contracts: hand traces, oracle equivalences, sampling statistics."""

import logging

import numpy as np
import pytest

from chae import decoding as dec
from chae import model as M
from chae import textcodec as tc
from chae.model import ConfigError

RNG = np.random.default_rng(123)


def make_table(vocab_size, max_len, rng):
    """Fully enumerated random conditional distributions for short sequences."""
    table = {}

    def fill(prefix):
        table[prefix] = rng.dirichlet(np.ones(vocab_size))
        if len(prefix) + 1 < max_len:
            for tok in range(vocab_size):
                fill(prefix + (tok,))

    fill(())
    return table


def table_step(table):
    return lambda prefix: table[prefix]


def exhaustive_best(table, eos, vocab_size, max_len):
    """Brute-force argmax of the length-normalized score over all sequences."""
    best = None

    def visit(ids, probs):
        nonlocal best
        if ids and (ids[-1] == eos or len(ids) == max_len):
            key = (dec.sequence_score(probs), tuple(-i for i in ids))
            if best is None or key > best[0]:
                best = (key, list(ids), list(probs))
            return
        dist = table[tuple(ids)]
        for tok in range(vocab_size):
            visit(ids + [tok], probs + [float(dist[tok])])

    visit([], [])
    return best[1], best[2]


class TestGreedy:
    def test_hand_traced_path(self):
        table = {
            (): np.array([0.5, 0.3, 0.2]),
            (0,): np.array([0.1, 0.6, 0.3]),
            (0, 1): np.array([0.2, 0.2, 0.6]),
        }
        ids, probs = dec.greedy_decode(table_step(table), eos_id=2, max_len=5)
        assert ids == [0, 1, 2]
        np.testing.assert_allclose(probs, [0.5, 0.6, 0.6])

    def test_ties_break_to_lowest_id(self):
        table = {(): np.array([0.4, 0.4, 0.2]), (0,): np.array([0.0, 0.0, 1.0])}
        ids, _ = dec.greedy_decode(table_step(table), eos_id=2, max_len=2)
        assert ids[0] == 0

    def test_stops_at_max_len_without_eos(self):
        ids, probs = dec.greedy_decode(lambda p: np.array([0.6, 0.39, 0.01]), eos_id=2, max_len=4)
        assert len(ids) == 4 and ids[-1] != 2
        np.testing.assert_allclose(probs, [0.6] * 4)


class TestBeamOracle:
    EOS = 0

    @pytest.mark.parametrize("vocab_size,max_len", [(3, 3), (4, 3), (5, 4)])
    def test_full_width_beam_equals_exhaustive_argmax(self, vocab_size, max_len):
        for trial in range(30):
            table = make_table(vocab_size, max_len, np.random.default_rng(1000 + trial))
            want_ids, want_probs = exhaustive_best(table, self.EOS, vocab_size, max_len)
            got_ids, got_probs = dec.beam_search(
                table_step(table), self.EOS, max_len, beam_size=vocab_size**max_len
            )
            assert got_ids == want_ids
            assert dec.sequence_score(got_probs) == pytest.approx(dec.sequence_score(want_probs), abs=1e-12)

    def test_beam_one_equals_greedy(self):
        for trial in range(50):
            table = make_table(4, 4, np.random.default_rng(2000 + trial))
            greedy = dec.greedy_decode(table_step(table), self.EOS, 4)
            beam = dec.beam_search(table_step(table), self.EOS, 4, beam_size=1)
            assert beam[0] == greedy[0]

    @pytest.mark.parametrize("beam_size", [1, 2, 3, 4])
    def test_beam_never_scores_below_greedy(self, beam_size):
        for trial in range(40):
            table = make_table(4, 4, np.random.default_rng(3000 + trial))
            _, g_probs = dec.greedy_decode(table_step(table), self.EOS, 4)
            _, b_probs = dec.beam_search(table_step(table), self.EOS, 4, beam_size)
            assert dec.sequence_score(b_probs) >= dec.sequence_score(g_probs) - 1e-12

    def test_beam_two_is_deterministic(self):
        table = make_table(4, 4, np.random.default_rng(77))
        runs = {tuple(dec.beam_search(table_step(table), self.EOS, 4, 2)[0]) for _ in range(5)}
        assert len(runs) == 1


class TestTopK:
    EOS = 0

    def test_top_k_one_equals_greedy(self):
        for trial in range(50):
            table = make_table(4, 4, np.random.default_rng(4000 + trial))
            greedy = dec.greedy_decode(table_step(table), self.EOS, 4)
            sampled = dec.top_k_sample(
                table_step(table), self.EOS, 4, k=1, rng=np.random.default_rng(trial)
            )
            assert sampled[0] == greedy[0]
            assert sampled[1] == greedy[1]

    def test_same_seed_reproduces_sample(self):
        table = make_table(5, 3, np.random.default_rng(8))
        a = dec.top_k_sample(table_step(table), self.EOS, 3, 3, np.random.default_rng(99))
        b = dec.top_k_sample(table_step(table), self.EOS, 3, 3, np.random.default_rng(99))
        assert a == b

    def test_sampling_frequencies_match_renormalized_top_k(self):
        dist = np.array([0.05, 0.4, 0.25, 0.2, 0.1])
        table = {(): dist}
        k = 3
        keep = np.array([1, 2, 3])  # top-3 by probability
        expected = dist[keep] / dist[keep].sum()
        n = 20000
        rng = np.random.default_rng(5)
        counts = np.zeros(5)
        for _ in range(n):
            ids, _ = dec.top_k_sample(table_step(table), eos_id=4, max_len=1, k=k, rng=rng)
            counts[ids[0]] += 1
        assert counts[0] == 0 and counts[4] == 0
        freqs = counts[keep] / n
        sigma = np.sqrt(expected * (1 - expected) / n)
        assert (np.abs(freqs - expected) <= 3 * sigma).all()

    def test_never_emits_outside_top_k(self):
        dist = np.array([0.5, 0.3, 0.1, 0.06, 0.04])
        table = {(): dist}
        rng = np.random.default_rng(17)
        seen = set()
        for _ in range(500):
            ids, _ = dec.top_k_sample(table_step(table), eos_id=4, max_len=1, k=2, rng=rng)
            seen.add(ids[0])
        assert seen <= {0, 1}


class TestConfigValidation:
    def test_unknown_strategy_named(self):
        with pytest.raises(ConfigError, match="nucleus"):
            dec.DecodingConfig(strategy="nucleus")

    @pytest.mark.parametrize(
        "kw", [dict(beam_size=0), dict(top_k=0), dict(temperature=0.0), dict(max_sentence_len=0)]
    )
    def test_out_of_range_values_rejected(self, kw):
        with pytest.raises(ConfigError):
            dec.DecodingConfig(**kw)


def story_fixture():
    vocab = tc.Vocabulary.build(
        tc.tokenize("tom ana ran home hid inside went out . to catch the thief")
    )
    model = M.ChaeModel.create(
        M.ModelConfig(vocab_size=len(vocab), d_model=16, n_heads=2, n_enc_layers=1,
                      n_dec_layers=1, d_ff=24, k=2, max_len=96),
        seed=21,
    )
    spec1 = tc.ChaeSpec(conditions=(tc.ChaeCondition(name="tom", actions=("to catch the thief",), emotion="anger"),))
    spec2 = tc.ChaeSpec(conditions=(tc.ChaeCondition(name="ana", actions=(), emotion="fear"),))
    return model, vocab, spec1, spec2


class TestModelIntegration:
    def test_greedy_sentence_is_deterministic_and_bounded(self):
        model, vocab, spec1, _ = story_fixture()
        cfg = dec.DecodingConfig(strategy="greedy", temperature=1.0, max_sentence_len=6)
        a = dec.generate_sentence(model, vocab, tc.tokenize("tom went out ."), spec1, cfg)
        b = dec.generate_sentence(model, vocab, tc.tokenize("tom went out ."), spec1, cfg)
        assert a.ids == b.ids
        assert a.ended or len(a.ids) == 6
        assert len(a.token_probs) == len(a.ids) == len(a.p_gen)
        assert len(a.emotions) == 2

    def test_sampled_story_reproducible_by_seed(self):
        model, vocab, spec1, spec2 = story_fixture()
        cfg = dec.DecodingConfig(strategy="topk", top_k=5, temperature=0.8, seed=42, max_sentence_len=5)
        a = dec.generate_story(model, vocab, tc.tokenize("tom went out ."), [spec1, spec2], cfg)
        b = dec.generate_story(model, vocab, tc.tokenize("tom went out ."), [spec1, spec2], cfg)
        assert [s.ids for s in a.sentences] == [s.ids for s in b.sentences]

    def test_earlier_sentences_invariant_to_later_specs(self):
        model, vocab, spec1, spec2 = story_fixture()
        cfg = dec.DecodingConfig(strategy="topk", top_k=5, temperature=0.8, seed=7, max_sentence_len=5)
        begin = tc.tokenize("tom went out .")
        a = dec.generate_story(model, vocab, begin, [spec1, spec2], cfg)
        b = dec.generate_story(model, vocab, begin, [spec1, spec1], cfg)
        assert a.sentences[0].ids == b.sentences[0].ids

    def test_temperature_rescales_only_the_vocabulary_side(self):
        model, vocab, spec1, _ = story_fixture()
        mi = tc.assemble_input(tc.tokenize("tom went out ."), tc.pad_conditions(spec1, 2), vocab, 2)
        prefix = np.array([tc.BOS_ID, vocab.id_of("tom")])
        h_enc = model.encode(mi)
        out = {}
        for temp in (1.0, 0.5):
            probs, p_gen, attn, _ = model.output_distributions(mi, prefix, h_enc, temperature=temp)
            voc = M.vocab_distribution(
                model.decode(prefix, h_enc).h_dec, model.params["w_voc"], model.params["b_voc"], temp
            )
            out[temp] = (probs.data, p_gen.data, attn.data, voc.data)
        # gate and copy attention identical across temperatures
        np.testing.assert_array_equal(out[1.0][1], out[0.5][1])
        np.testing.assert_array_equal(out[1.0][2], out[0.5][2])
        # the mixture difference comes entirely from the vocabulary side
        copy_1 = out[1.0][0] - out[1.0][1] * out[1.0][3]
        copy_05 = out[0.5][0] - out[0.5][1] * out[0.5][3]
        np.testing.assert_allclose(copy_1, copy_05, atol=1e-12)

    def test_context_overflow_truncates_and_warns(self, caplog):
        model, vocab, spec1, _ = story_fixture()
        cfg = dec.DecodingConfig(strategy="greedy", temperature=1.0, max_sentence_len=4)
        long_context = tc.tokenize("tom went out .") * 30
        with caplog.at_level(logging.WARNING, logger="chae.decoding"):
            result = dec.generate_sentence(model, vocab, long_context, spec1, cfg)
        assert result.ids
        assert any("truncating" in rec.message for rec in caplog.records)
