"""Sentence decoding strategies: greedy, beam, and top-k sampling.

The search strategies operate on an abstract step function
``step_fn(prefix_ids) -> probability vector`` so they can be driven by
the real model or by enumerable probability tables. Ties always break
toward the lowest token id, and beam candidates toward the
lexicographically smaller sequence, so every strategy is deterministic
given its inputs (plus the RNG for sampling).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ChaeModel, ConfigError
from .textcodec import (
    BOS_ID,
    EMOTIONS,
    EOS_ID,
    ChaeSpec,
    ModelInput,
    Vocabulary,
    assemble_input,
    pad_conditions,
    serialize_chae,
)

log = logging.getLogger(__name__)

STRATEGIES = ("greedy", "beam", "topk")

_LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class DecodingConfig:
    strategy: str = "topk"
    beam_size: int = 2
    top_k: int = 50
    temperature: float = 0.8
    max_sentence_len: int = 24
    seed: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {', '.join(STRATEGIES)}")
        if self.beam_size < 1:
            raise ConfigError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.max_sentence_len < 1:
            raise ConfigError(f"max_sentence_len must be >= 1, got {self.max_sentence_len}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def sequence_score(probs: list[float]) -> float:
    """Length-normalized log-probability: sum(log p) / token count."""
    if not probs:
        return -math.inf
    return sum(math.log(max(p, _LOG_FLOOR)) for p in probs) / len(probs)


def _top_ids(dist: np.ndarray, n: int) -> np.ndarray:
    """Ids of the ``n`` largest probabilities; ties go to the lowest id."""
    order = np.lexsort((np.arange(len(dist)), -dist))
    return order[:n]


def greedy_decode(step_fn, eos_id: int, max_len: int) -> tuple[list[int], list[float]]:
    """Pick the argmax token at every step."""
    ids: list[int] = []
    probs: list[float] = []
    for _ in range(max_len):
        dist = step_fn(tuple(ids))
        tok = int(np.argmax(dist))
        ids.append(tok)
        probs.append(float(dist[tok]))
        if tok == eos_id:
            break
    return ids, probs


def beam_search(step_fn, eos_id: int, max_len: int, beam_size: int) -> tuple[list[int], list[float]]:
    """Length-normalized beam search.

    The returned hypothesis never scores below the greedy one: pruning can
    in rare tables drop the greedy path, so it is compared in at the end.
    """
    live: list[tuple[tuple[int, ...], float, list[float]]] = [((), 0.0, [])]
    finished: list[tuple[tuple[int, ...], float, list[float]]] = []
    for _ in range(max_len):
        candidates = []
        for ids, lp, probs in live:
            dist = step_fn(ids)
            for tok in _top_ids(dist, beam_size):
                p = float(dist[tok])
                candidates.append((ids + (int(tok),), lp + math.log(max(p, _LOG_FLOOR)), probs + [p]))
        candidates.sort(key=lambda c: (-c[1], c[0]))
        live = []
        for cand in candidates:
            if cand[0][-1] == eos_id:
                finished.append(cand)
            elif len(live) < beam_size:
                live.append(cand)
        if not live:
            break
    pool = finished + live
    best = max(pool, key=lambda c: (sequence_score(c[2]), tuple(-i for i in c[0])))
    if beam_size > 1:
        g_ids, g_probs = greedy_decode(step_fn, eos_id, max_len)
        if sequence_score(g_probs) > sequence_score(best[2]):
            return g_ids, g_probs
    return list(best[0]), best[2]


def top_k_sample(step_fn, eos_id: int, max_len: int, k: int, rng: np.random.Generator) -> tuple[list[int], list[float]]:
    """Sample from the ``k`` most probable tokens, renormalized."""
    ids: list[int] = []
    probs: list[float] = []
    for _ in range(max_len):
        dist = step_fn(tuple(ids))
        top = _top_ids(dist, min(k, len(dist)))
        mass = dist[top]
        total = mass.sum()
        if total <= 0:
            weights = np.full(len(top), 1.0 / len(top))
        else:
            weights = mass / total
        tok = int(rng.choice(top, p=weights))
        ids.append(tok)
        probs.append(float(dist[tok]))
        if tok == eos_id:
            break
    return ids, probs


@dataclass
class GenerationResult:
    """One generated sentence plus its diagnostics."""

    tokens: list[str]  # includes the end marker when the model emitted it
    ids: list[int]
    ended: bool
    token_probs: list[float]
    p_gen: list[float] | None
    emotions: list[tuple[str, np.ndarray]] = field(default_factory=list)
    score: float = 0.0

    @property
    def sentence_tokens(self) -> list[str]:
        return self.tokens[:-1] if self.ended else list(self.tokens)


class ModelStepper:
    """Adapts a model + assembled input to the step-function protocol."""

    def __init__(self, model: ChaeModel, model_input: ModelInput, temperature: float = 1.0):
        self.model = model
        self.model_input = model_input
        self.temperature = temperature
        with T.no_grad():
            self.h_enc = model.encode(model_input)

    def __call__(self, prefix_ids: tuple[int, ...]) -> np.ndarray:
        prefix = np.concatenate(([BOS_ID], np.asarray(prefix_ids, dtype=np.int64)))
        with T.no_grad():
            probs, _, _, _ = self.model.output_distributions(
                self.model_input, prefix, self.h_enc, self.temperature
            )
        return probs.data[-1]


def _context_budget(model: ChaeModel, chae_len: int) -> int:
    # <s> + context + conditions + </s> must fit max_len; the decoder prefix too
    budget = model.config.max_len - chae_len - 2
    if budget < 0:
        raise ConfigError(f"conditions occupy {chae_len} tokens, exceeding max_len {model.config.max_len}")
    return budget


def generate_sentence(
    model: ChaeModel,
    vocab: Vocabulary,
    context_tokens: list[str],
    chae: ChaeSpec,
    config: DecodingConfig,
    rng: np.random.Generator | None = None,
) -> GenerationResult:
    """Generate one sentence under the given per-character conditions."""
    padded = pad_conditions(chae, model.config.k) if len(chae) != model.config.k else chae
    budget = _context_budget(model, len(serialize_chae(padded)))
    if len(context_tokens) > budget:
        log.warning("context of %d tokens exceeds budget %d; truncating oldest", len(context_tokens), budget)
        context_tokens = list(context_tokens)[-budget:]
    model_input = assemble_input(list(context_tokens), padded, vocab, model.config.k)

    max_len = min(config.max_sentence_len, model.config.max_len - 1)
    step_fn = ModelStepper(model, model_input, config.temperature)
    if config.strategy == "greedy":
        ids, probs = greedy_decode(step_fn, EOS_ID, max_len)
    elif config.strategy == "beam":
        ids, probs = beam_search(step_fn, EOS_ID, max_len, config.beam_size)
    else:
        if rng is None:
            rng = np.random.default_rng(config.seed)
        ids, probs = top_k_sample(step_fn, EOS_ID, max_len, config.top_k, rng)

    ended = bool(ids and ids[-1] == EOS_ID)
    target = np.asarray(ids, dtype=np.int64)
    p_gen_trace = None
    if model.config.enable_copy:
        with T.no_grad():
            prefix = np.concatenate(([BOS_ID], target[:-1]))
            out_probs, p_gen, _, _ = model.output_distributions(
                model_input, prefix, step_fn.h_enc, config.temperature
            )
        p_gen_trace = [float(v) for v in p_gen.data[:, 0]]
    emotions = [(EMOTIONS[i], dist) for i, dist in model.predict_emotions(model_input, target)]

    return GenerationResult(
        tokens=vocab.decode(ids),
        ids=ids,
        ended=ended,
        token_probs=probs,
        p_gen=p_gen_trace,
        emotions=emotions,
        score=sequence_score(probs),
    )


@dataclass
class StoryResult:
    beginning_tokens: list[str]
    sentences: list[GenerationResult]

    @property
    def all_tokens(self) -> list[str]:
        out = list(self.beginning_tokens)
        for s in self.sentences:
            out.extend(s.sentence_tokens)
        return out


def generate_story(
    model: ChaeModel,
    vocab: Vocabulary,
    beginning_tokens: list[str],
    specs: list[ChaeSpec],
    config: DecodingConfig,
) -> StoryResult:
    """Generate one sentence per spec, feeding each back into the context.

    The RNG is seeded once per story, so sentence ``i`` never depends on
    the specs that follow it.
    """
    rng = np.random.default_rng(config.seed)
    context = list(beginning_tokens)
    sentences: list[GenerationResult] = []
    for spec in specs:
        result = generate_sentence(model, vocab, context, spec, config, rng)
        sentences.append(result)
        context.extend(result.sentence_tokens)
    return StoryResult(beginning_tokens=list(beginning_tokens), sentences=sentences)
