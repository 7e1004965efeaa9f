"""Shared fixtures: a small trained checkpoint reused by CLI/service tests."""

from types import SimpleNamespace

import pytest

from chae.corpus import corpus_vocabulary, make_sentence_pairs, synth_corpus, write_corpus
from chae.model import ChaeModel, ModelConfig
from chae.training import TrainConfig, prepare_example, save_checkpoint, train_loop


@pytest.fixture(scope="session")
def toy_artifacts(tmp_path_factory):
    """A briefly trained model over a 12-story synthetic corpus, saved to disk.

    Deliberately small: the tests that use it exercise plumbing and
    determinism, not generation quality.
    """
    stories = synth_corpus(12, seed=0)
    vocab = corpus_vocabulary(stories)
    pairs = [p for s in stories for p in make_sentence_pairs(s, 2)]
    prepared = [prepare_example(p, vocab, 2) for p in pairs]

    config = ModelConfig(
        vocab_size=len(vocab), d_model=24, n_heads=2, n_enc_layers=1,
        n_dec_layers=1, d_ff=48, k=2, max_len=192,
    )
    model = ChaeModel.create(config, seed=1)
    train_config = TrainConfig(epochs=40, batch_size=4, lr=3e-3, weight_decay=0.0,
                               seed=0, keep_best=False)
    result = train_loop(model, prepared, prepared[:4], train_config)

    root = tmp_path_factory.mktemp("toy")
    checkpoint_path = root / "toy.ckpt"
    vocab_path = root / "toy.vocab"
    corpus_path = root / "corpus.jsonl"
    vocab.save(vocab_path)
    save_checkpoint(checkpoint_path, config, model.params, vocab.content_hash(),
                    step=result.steps)
    write_corpus(corpus_path, stories)
    return SimpleNamespace(
        model=model,
        vocab=vocab,
        config=config,
        stories=stories,
        pairs=pairs,
        checkpoint=str(checkpoint_path),
        vocab_path=str(vocab_path),
        corpus=str(corpus_path),
    )
