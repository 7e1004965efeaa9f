"""Command-line entry points: corpus tooling, training, generation, evaluation, serving.

Settings resolve in three layers: built-in defaults, then a TOML config file
(``--config``, sections named after subcommands), then explicit flags.  The
seed falls back to the ``CHAE_SEED`` environment variable when no ``--seed``
is given.  Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import tomli

from .corpus import (
    CorpusError,
    corpus_stats,
    corpus_vocabulary,
    load_corpus,
    split_pairs,
    synth_corpus,
    write_corpus,
)
from .decoding import STRATEGIES, DecodingConfig, generate_sentence, generate_story
from .metrics import (
    corpus_bleu,
    distinct_n,
    emotion_accuracy,
    judge_examples,
    perplexity,
    train_judge,
)
from .model import ChaeModel, ConfigError, ModelConfig
from .textcodec import (
    ChaeFormatError,
    Vocabulary,
    VocabularyError,
    detokenize,
    spec_from_json,
    tokenize,
)
from .training import (
    CheckpointError,
    NumericsError,
    TrainConfig,
    load_checkpoint,
    prepare_example,
    save_checkpoint,
    train_loop,
)

log = logging.getLogger(__name__)

# Core research defaults, echoed on every invocation.
PAPER_DEFAULTS = {"batch": 8, "lr": 5e-5, "lam": 1.0, "k": 2, "top_k": 50, "temperature": 0.8}

_TRAIN_KEYS = {
    "epochs": 10, "batch": PAPER_DEFAULTS["batch"], "lr": PAPER_DEFAULTS["lr"],
    "weight_decay": 0.01, "clip_norm": 1.0, "d_model": 64, "n_heads": 4,
    "enc_layers": 2, "dec_layers": 2, "d_ff": 128, "k": PAPER_DEFAULTS["k"],
    "lam": PAPER_DEFAULTS["lam"], "max_len": 256, "enable_copy": True,
    "enable_emotion_loss": True, "seed": None, "split_seed": None,
}
_GENERATE_KEYS = {
    "strategy": "topk", "beam": 2, "top_k": PAPER_DEFAULTS["top_k"],
    "temperature": PAPER_DEFAULTS["temperature"], "max_sentence_len": 24, "seed": None,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chae",
        description="Character-conditioned story generation: train, steer, evaluate.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("--config", help="TOML settings file (sections per subcommand)")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="write a deterministic synthetic annotated corpus")
    p.add_argument("--n", type=int, default=50, help="number of stories")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output JSONL path")

    p = sub.add_parser("stats", help="print a corpus summary as JSON")
    p.add_argument("--corpus", required=True)

    p = sub.add_parser("train", help="train a model on an annotated corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--vocab", help="vocabulary output path (default: checkpoint with .vocab)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--d-model", type=int)
    p.add_argument("--n-heads", type=int)
    p.add_argument("--enc-layers", type=int)
    p.add_argument("--dec-layers", type=int)
    p.add_argument("--d-ff", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--lam", type=float)
    p.add_argument("--max-len", type=int)
    p.add_argument("--no-copy", action="store_true", default=None,
                   help="ablation: disable the copy mechanism")
    p.add_argument("--no-emotion-loss", action="store_true", default=None,
                   help="ablation: disable the emotion objective")
    p.add_argument("--seed", type=int)
    p.add_argument("--split-seed", type=int, help="corpus split seed (default: --seed)")

    p = sub.add_parser("generate", help="generate a story from a story-spec JSON file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", help="vocabulary path (default: checkpoint with .vocab)")
    p.add_argument("--spec", required=True, help="JSON file {beginning, chae: [[...], ...]}")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--beam", type=int)
    p.add_argument("--top-k", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-sentence-len", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--json", action="store_true", help="emit JSON with diagnostics")

    p = sub.add_parser("eval", help="score a checkpoint on a corpus test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab")
    p.add_argument("--corpus", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="also write the report as JSON")

    p = sub.add_parser("serve", help="start the HTTP session service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--ttl", type=float, default=3600.0)
    p.add_argument("--persist", help="append-only JSONL event log path")
    return parser


def _resolve_seed(value) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get("CHAE_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"CHAE_SEED must be an integer, got {env!r}") from None
    return 0


def _toml_section(path, name: str, allowed: dict) -> dict:
    if not path:
        return {}
    with open(path, "rb") as fh:
        data = tomli.load(fh)
    section = data.get(name, {})
    if not isinstance(section, dict):
        raise ValueError(f"config section [{name}] must be a table")
    unknown = set(section) - set(allowed)
    if unknown:
        raise ValueError(f"unknown settings in [{name}]: {', '.join(sorted(unknown))}")
    return section


def _settings(args, name: str, allowed: dict) -> dict:
    """defaults <- TOML section <- explicit flags."""
    merged = dict(allowed)
    merged.update(_toml_section(args.config, name, allowed))
    for key in allowed:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _default_vocab_path(checkpoint_path, vocab_arg):
    return vocab_arg if vocab_arg else str(Path(checkpoint_path).with_suffix(".vocab"))


def _load_artifacts(checkpoint_path, vocab_arg):
    vocab = Vocabulary.load(_default_vocab_path(checkpoint_path, vocab_arg))
    checkpoint = load_checkpoint(checkpoint_path, expected_vocab_hash=vocab.content_hash())
    return checkpoint.build_model(), vocab, checkpoint


def _load_story_spec(path):
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ChaeFormatError("story spec must be a JSON object")
    beginning = data.get("beginning")
    if not isinstance(beginning, str) or not tokenize(beginning):
        raise ChaeFormatError("story spec 'beginning' must be non-empty text")
    rows = data.get("chae")
    if not isinstance(rows, list) or not rows:
        raise ChaeFormatError("story spec 'chae' must be a non-empty array of condition arrays")
    specs = [spec_from_json(row, f"chae[{i}]") for i, row in enumerate(rows)]
    return beginning, specs


def cmd_synth(args) -> int:
    stories = synth_corpus(n_stories=args.n, seed=_resolve_seed(args.seed))
    write_corpus(args.out, stories)
    print(f"wrote {len(stories)} stories to {args.out}")
    return 0


def cmd_stats(args) -> int:
    print(json.dumps(corpus_stats(load_corpus(args.corpus)), indent=2, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    s = dict(_settings(args, "train", _TRAIN_KEYS))
    if args.no_copy:
        s["enable_copy"] = False
    if args.no_emotion_loss:
        s["enable_emotion_loss"] = False
    seed = _resolve_seed(s["seed"])
    split_seed = seed if s["split_seed"] is None else int(s["split_seed"])

    stories = load_corpus(args.corpus)
    vocab = corpus_vocabulary(stories)
    train_pairs, val_pairs, _ = split_pairs(stories, seed=split_seed, k=s["k"])
    if not val_pairs:
        log.warning("validation split is empty; validating on the training pairs")
        val_pairs = train_pairs
    prepared_train = [prepare_example(p, vocab, s["k"]) for p in train_pairs]
    prepared_val = [prepare_example(p, vocab, s["k"]) for p in val_pairs]

    model_config = ModelConfig(
        vocab_size=len(vocab), d_model=s["d_model"], n_heads=s["n_heads"],
        n_enc_layers=s["enc_layers"], n_dec_layers=s["dec_layers"], d_ff=s["d_ff"],
        k=s["k"], lam=s["lam"], max_len=s["max_len"], enable_copy=s["enable_copy"],
        enable_emotion_loss=s["enable_emotion_loss"],
    )
    model = ChaeModel.create(model_config, seed=seed)
    train_config = TrainConfig(
        epochs=s["epochs"], batch_size=s["batch"], lr=s["lr"],
        weight_decay=s["weight_decay"], clip_norm=s["clip_norm"], seed=seed,
    )
    log.info("training on %d pairs (val %d), vocab %d", len(prepared_train), len(prepared_val), len(vocab))
    result = train_loop(model, prepared_train, prepared_val, train_config,
                        log_every=1 if args.verbose else 0)

    vocab_path = _default_vocab_path(args.out, args.vocab)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    vocab.save(vocab_path)
    save_checkpoint(args.out, model_config, model.params, vocab.content_hash(),
                    step=result.steps, rng=result.rng, optimizer=result.optimizer)
    print(json.dumps({
        "checkpoint": args.out, "vocab": vocab_path, "steps": result.steps,
        "best_val_nll": result.best_val_nll, "epochs": s["epochs"],
    }, sort_keys=True))
    return 0


def _decoding_config(args) -> DecodingConfig:
    s = _settings(args, "generate", _GENERATE_KEYS)
    return DecodingConfig(
        strategy=s["strategy"], beam_size=s["beam"], top_k=s["top_k"],
        temperature=s["temperature"], max_sentence_len=s["max_sentence_len"],
        seed=_resolve_seed(s["seed"]),
    )


def cmd_generate(args) -> int:
    model, vocab, _ = _load_artifacts(args.checkpoint, args.vocab)
    beginning, specs = _load_story_spec(args.spec)
    config = _decoding_config(args)
    story = generate_story(model, vocab, tokenize(beginning), specs, config)
    if args.json:
        payload = {
            "beginning": beginning,
            "config": config.to_dict(),
            "sentences": [
                {
                    "text": detokenize(list(r.sentence_tokens)),
                    "tokens": list(r.tokens),
                    "ended": r.ended,
                    "score": r.score,
                    "token_probs": list(r.token_probs),
                    "p_gen": None if r.p_gen is None else list(r.p_gen),
                    "emotions": [{"label": label, "probs": list(map(float, probs))}
                                 for label, probs in r.emotions],
                }
                for r in story.sentences
            ],
        }
        print(json.dumps(payload, sort_keys=True))
    else:
        for r in story.sentences:
            print(detokenize(list(r.sentence_tokens)))
    return 0


def evaluate_checkpoint(model, vocab, stories, seed: int = 0) -> dict:
    """Table-shaped quality report on the held-out story split."""
    k = model.config.k
    train_pairs, val_pairs, test_pairs = split_pairs(stories, seed=seed, k=k)
    held_out = test_pairs or val_pairs or train_pairs
    prepared = [prepare_example(p, vocab, k) for p in held_out]
    judge = train_judge(judge_examples(stories), seed=seed)

    config = DecodingConfig(strategy="greedy", temperature=1.0)
    candidates, references, requested = [], [], []
    for pair in held_out:
        result = generate_sentence(model, vocab, list(pair.context_tokens), pair.chae, config)
        sentence = list(result.sentence_tokens)
        candidates.append(sentence)
        references.append(list(pair.target_tokens[:-1]))
        for cond, active in zip(pair.chae.conditions, pair.chae.active):
            if active:
                requested.append((sentence, cond.emotion_id))
    return {
        "n_eval_pairs": len(held_out),
        "ppl": perplexity(model, prepared),
        "b1": corpus_bleu(zip(candidates, references), 1),
        "b2": corpus_bleu(zip(candidates, references), 2),
        "d1": distinct_n(candidates, 1),
        "d2": distinct_n(candidates, 2),
        "acc": emotion_accuracy(judge, requested) if requested else 0.0,
    }


def render_report(report: dict) -> str:
    """Fixed-width text table with one row of scores."""
    columns = [("PPL", "ppl"), ("B-1", "b1"), ("B-2", "b2"),
               ("D-1", "d1"), ("D-2", "d2"), ("ACC", "acc")]
    header = "model  " + "  ".join(f"{name:>8}" for name, _ in columns)
    row = "chae   " + "  ".join(f"{report[key]:>8.3f}" for _, key in columns)
    return header + "\n" + row


def cmd_eval(args) -> int:
    model, vocab, _ = _load_artifacts(args.checkpoint, args.vocab)
    stories = load_corpus(args.corpus)
    report = evaluate_checkpoint(model, vocab, stories, seed=_resolve_seed(args.seed))
    print(render_report(report))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
        log.info("wrote report to %s", args.out)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    model, vocab, _ = _load_artifacts(args.checkpoint, args.vocab)
    app = create_app(model, vocab, ttl=args.ttl, persist_path=args.persist)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


_HANDLERS = {
    "synth": cmd_synth,
    "stats": cmd_stats,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "serve": cmd_serve,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    print("defaults: " + " ".join(f"{k}={v}" for k, v in PAPER_DEFAULTS.items()), file=sys.stderr)
    try:
        return _HANDLERS[args.subcommand](args)
    except (ChaeFormatError, VocabularyError, CorpusError, CheckpointError, ConfigError,
            NumericsError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
