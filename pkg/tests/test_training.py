"""Training contracts: class weights, AdamW, determinism, checkpoints."""

import numpy as np
import pytest

from chae import model as M
from chae import tensor as T
from chae import textcodec as tc
from chae import training as tr

VOCAB = tc.Vocabulary.build(
    tc.tokenize("tom ana ran home hid inside . went out to catch the thief stayed calm")
)


def example(context, name, actions, emotion, target):
    spec = tc.ChaeSpec(conditions=(tc.ChaeCondition(name=name, actions=actions, emotion=emotion),))
    return tr.TrainExample(
        context_tokens=tuple(tc.tokenize(context)),
        chae=spec,
        target_tokens=tuple(tc.tokenize(target)) + (tc.EOS,),
    )


EXAMPLES = [
    example("Tom went out.", "tom", ("to catch the thief",), "anger", "Tom ran home."),
    example("Ana stayed calm.", "ana", (), "fear", "Ana hid inside."),
    example("Tom ran home.", "ana", ("to catch the thief",), "joy", "Ana went out."),
    example("Ana hid inside.", "tom", (), "sadness", "Tom stayed calm."),
]


def prepared(k=2):
    return [tr.prepare_example(ex, VOCAB, k) for ex in EXAMPLES]


def fresh_model(seed=5, **overrides):
    defaults = dict(
        vocab_size=len(VOCAB), d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1,
        d_ff=24, k=2, max_len=64,
    )
    defaults.update(overrides)
    return M.ChaeModel.create(M.ModelConfig(**defaults), seed=seed)


class TestTrainExample:
    def test_target_must_end_with_eos(self):
        with pytest.raises(ValueError, match="must end with"):
            tr.TrainExample(
                context_tokens=("tom",),
                chae=tc.ChaeSpec(conditions=(tc.ChaeCondition(name="tom"),)),
                target_tokens=("ran", "home"),
            )

    def test_prepare_pads_and_extracts_labels(self):
        ex = prepared()[0]
        assert ex.active == (True, False)
        assert ex.emotion_ids == (tc.EMOTION_IDS["anger"], tc.EMOTION_IDS["neutral"])
        assert ex.target_ids[-1] == tc.EOS_ID


class TestClassWeights:
    def test_four_class_reference_values(self):
        labels = [0] * 50 + [1] * 25 + [2] * 15 + [3] * 10
        weights = tr.compute_class_weights(labels, 4)
        np.testing.assert_allclose(weights, [0.5, 1.0, 1.6667, 2.5], atol=1e-4)

    def test_uniform_counts_give_unit_weights(self):
        weights = tr.compute_class_weights([0, 1, 2] * 7, 3)
        np.testing.assert_allclose(weights, np.ones(3), atol=1e-12)

    def test_zero_count_class_gets_zero_weight(self):
        weights = tr.compute_class_weights([0, 0, 2], 4)
        assert weights[1] == 0.0 and weights[3] == 0.0

    def test_doubling_a_rare_class_roughly_halves_its_weight(self):
        base = tr.compute_class_weights([0] * 10 + [1] * 1000, 2)
        doubled = tr.compute_class_weights([0] * 20 + [1] * 1000, 2)
        ratio = doubled[0] / base[0]
        assert 0.5 <= ratio < 0.51

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValueError, match="out of range"):
            tr.compute_class_weights([0, 9], 4)


class TestAdamW:
    def test_first_step_matches_hand_computation(self):
        p = T.param(np.array([1.0]))
        p.grad = np.array([0.5])
        opt = tr.AdamW({"p": p}, lr=0.1, weight_decay=0.0)
        opt.step()
        # m=0.05 v=2.5e-4; bias-corrected 0.5 and 0.25; update ~ 0.5/0.5 = 1
        np.testing.assert_allclose(p.data, [0.9], atol=1e-6)

    def test_weight_decay_is_decoupled(self):
        p = T.param(np.array([2.0]))
        p.grad = np.zeros(1)
        opt = tr.AdamW({"p": p}, lr=0.1, weight_decay=0.5)
        opt.step()
        np.testing.assert_allclose(p.data, [2.0 * (1 - 0.1 * 0.5)], atol=1e-12)

    def test_none_gradients_are_skipped(self):
        p = T.param(np.array([3.0]))
        opt = tr.AdamW({"p": p}, lr=0.1)
        opt.step()
        np.testing.assert_array_equal(p.data, [3.0])

    def test_non_finite_gradient_raises(self):
        p = T.param(np.array([1.0]))
        p.grad = np.array([np.inf])
        opt = tr.AdamW({"p": p})
        with pytest.raises(tr.NumericsError, match="non-finite gradient"):
            opt.step()


class TestClipGradients:
    def test_large_gradients_scaled_to_max_norm(self):
        p = T.param(np.zeros(4))
        p.grad = np.full(4, 10.0)
        before = float(np.linalg.norm(p.grad))
        reported = tr.clip_gradients({"p": p}, 1.0)
        assert reported == pytest.approx(before)
        assert np.linalg.norm(p.grad) == pytest.approx(1.0)

    def test_small_gradients_untouched(self):
        p = T.param(np.zeros(4))
        p.grad = np.full(4, 0.01)
        tr.clip_gradients({"p": p}, 1.0)
        np.testing.assert_array_equal(p.grad, np.full(4, 0.01))


class TestTrainStep:
    def test_identical_steps_give_identical_deltas(self):
        batch = prepared()
        results = []
        for _ in range(2):
            model = fresh_model(seed=9)
            opt = tr.AdamW(model.params, lr=1e-3, weight_decay=0.01)
            tr.train_step(model, batch, opt)
            results.append({name: p.data.copy() for name, p in model.params.items()})
        for name in results[0]:
            np.testing.assert_array_equal(results[0][name], results[1][name])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_reports_example_index(self):
        model = fresh_model()
        model.params["w_voc"].data[:] = np.inf
        with pytest.raises(tr.NumericsError, match="batch index 0"):
            tr.train_step(model, prepared(), tr.AdamW(model.params))

    def test_step_reduces_loss_on_repeat(self):
        model = fresh_model()
        batch = prepared()[:1]
        opt = tr.AdamW(model.params, lr=3e-3, weight_decay=0.0)
        first = tr.train_step(model, batch, opt).loss
        for _ in range(20):
            last = tr.train_step(model, batch, opt).loss
        assert last < first


class TestOverfitOracle:
    def test_single_example_reaches_near_zero_nll_in_200_steps(self):
        model = fresh_model(seed=1)
        batch = prepared()[:1]
        opt = tr.AdamW(model.params, lr=3e-3, weight_decay=0.0)
        for _ in range(200):
            stats = tr.train_step(model, batch, opt)
        assert stats.nll < 0.05


class TestTrainLoop:
    def test_empty_validation_rejected(self):
        model = fresh_model()
        with pytest.raises(ValueError, match="validation split is empty"):
            tr.train_loop(model, prepared(), [], tr.TrainConfig(epochs=1))

    def test_history_and_best_tracking(self):
        model = fresh_model()
        data = prepared()
        result = tr.train_loop(
            model, data[:3], data[3:], tr.TrainConfig(epochs=3, batch_size=2, lr=1e-3, seed=0)
        )
        assert len(result.history) == 3
        assert result.best_val_nll <= result.history[0]["val_nll"]
        assert result.steps == 6

    def test_loop_is_deterministic(self):
        finals = []
        data = prepared()
        for _ in range(2):
            model = fresh_model(seed=2)
            tr.train_loop(model, data, data, tr.TrainConfig(epochs=2, batch_size=2, lr=1e-3, seed=7))
            finals.append(model.params["w_voc"].data.copy())
        np.testing.assert_array_equal(finals[0], finals[1])


class TestCheckpoint:
    def save_one(self, path, model, **kw):
        tr.save_checkpoint(path, model.config, model.params, VOCAB.content_hash(), **kw)

    def test_params_round_trip_bitwise(self, tmp_path):
        model = fresh_model()
        path = tmp_path / "m.chae"
        self.save_one(path, model, step=17)
        ckpt = tr.load_checkpoint(path)
        assert ckpt.step == 17
        assert ckpt.config == model.config
        assert ckpt.vocab_hash == VOCAB.content_hash()
        for name, p in model.params.items():
            np.testing.assert_array_equal(ckpt.params[name], p.data)

    def test_save_load_save_is_byte_identical(self, tmp_path):
        model = fresh_model()
        opt = tr.AdamW(model.params)
        rng = np.random.default_rng(3)
        rng.random(5)
        a, b = tmp_path / "a.chae", tmp_path / "b.chae"
        self.save_one(a, model, step=4, rng=rng, optimizer=opt)
        ckpt = tr.load_checkpoint(a)
        tr.save_checkpoint(
            b, ckpt.config, ckpt.params, ckpt.vocab_hash, step=ckpt.step,
            rng_state=ckpt.rng_state, opt_t=ckpt.opt_t, opt_arrays=ckpt.opt_arrays,
        )
        assert a.read_bytes() == b.read_bytes()

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.chae"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(tr.CheckpointError, match="not a checkpoint"):
            tr.load_checkpoint(path)

    def test_unsupported_version_rejected(self, tmp_path):
        model = fresh_model()
        path = tmp_path / "m.chae"
        self.save_one(path, model)
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        # refresh the trailer so only the version is wrong
        import struct
        import zlib
        blob[-4:] = struct.pack("<I", zlib.crc32(bytes(blob[:-4])))
        path.write_bytes(bytes(blob))
        with pytest.raises(tr.CheckpointError, match="version 99"):
            tr.load_checkpoint(path)

    def test_corruption_detected_by_crc(self, tmp_path):
        model = fresh_model()
        path = tmp_path / "m.chae"
        self.save_one(path, model)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(tr.CheckpointError, match="CRC"):
            tr.load_checkpoint(path)

    def test_truncation_detected(self, tmp_path):
        model = fresh_model()
        path = tmp_path / "m.chae"
        self.save_one(path, model)
        path.write_bytes(path.read_bytes()[:-30])
        with pytest.raises(tr.CheckpointError):
            tr.load_checkpoint(path)

    def test_vocab_hash_mismatch_rejected(self, tmp_path):
        model = fresh_model()
        path = tmp_path / "m.chae"
        self.save_one(path, model)
        other = tc.Vocabulary.build(["different", "words"])
        with pytest.raises(tr.CheckpointError, match="hash mismatch"):
            tr.load_checkpoint(path, expected_vocab_hash=other.content_hash())

    def test_restored_model_reproduces_outputs(self, tmp_path):
        model = fresh_model()
        data = prepared()
        path = tmp_path / "m.chae"
        self.save_one(path, model)
        clone = tr.load_checkpoint(path).build_model()
        ex = data[0]
        a = model.forward(ex.model_input, ex.target_ids, ex.emotion_ids, ex.active)
        b = clone.forward(ex.model_input, ex.target_ids, ex.emotion_ids, ex.active)
        np.testing.assert_array_equal(a.probs.data, b.probs.data)


class TestResumeTrajectory:
    def test_checkpoint_resume_is_bit_exact(self, tmp_path):
        data = prepared()
        cfg = tr.TrainConfig(epochs=2, batch_size=2, lr=1e-3, seed=13, keep_best=False)

        model = fresh_model(seed=4)
        first = tr.train_loop(model, data, data, cfg)
        path = tmp_path / "mid.chae"
        tr.save_checkpoint(
            path, model.config, model.params, VOCAB.content_hash(),
            step=first.steps, rng=first.rng, optimizer=first.optimizer,
        )

        # continue the original run
        tr.train_loop(model, data, data, cfg, optimizer=first.optimizer, rng=first.rng)
        direct = {name: p.data.copy() for name, p in model.params.items()}

        # resume from the checkpoint and replay
        ckpt = tr.load_checkpoint(path, expected_vocab_hash=VOCAB.content_hash())
        resumed_model = ckpt.build_model()
        opt = ckpt.build_optimizer(resumed_model, cfg)
        rng = ckpt.build_rng()
        tr.train_loop(resumed_model, data, data, cfg, optimizer=opt, rng=rng)

        for name in direct:
            np.testing.assert_array_equal(direct[name], resumed_model.params[name].data)


class TestStagedTraining:
    def test_second_stage_initializes_from_first_stage_checkpoint(self, tmp_path):
        data = prepared()
        stage1 = [ex for ex in data if True]  # action-heavy pool stand-in
        model = fresh_model(seed=6)
        cfg = tr.TrainConfig(epochs=1, batch_size=2, lr=1e-3)
        tr.train_loop(model, stage1, data, cfg)
        path = tmp_path / "stage1.chae"
        tr.save_checkpoint(path, model.config, model.params, VOCAB.content_hash())

        stage2_model = tr.load_checkpoint(path, expected_vocab_hash=VOCAB.content_hash()).build_model()
        result = tr.train_loop(stage2_model, data, data, cfg)
        assert len(result.history) == 1
        assert np.isfinite(result.history[0]["val_nll"])
