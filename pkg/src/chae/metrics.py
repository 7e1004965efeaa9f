"""Evaluation metrics: perplexity, n-gram overlap, diversity, emotion accuracy.

The emotion judge is an independent classifier (its own vocabulary and
parameters, bag-of-embeddings + linear) so that measuring whether a generated
sentence expresses the requested emotion never consults the generator's
weights.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import ChaeModel
from .textcodec import EMOTIONS, Vocabulary, tokenize
from .training import AdamW, PreparedExample, evaluate_nll

log = logging.getLogger(__name__)


# --- language-model quality ---------------------------------------------------

def perplexity(model: ChaeModel, examples: list[PreparedExample]) -> float:
    """exp of the mean per-example, per-token negative log-likelihood."""
    return math.exp(evaluate_nll(model, examples))


# --- n-gram metrics -----------------------------------------------------------

def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidate, reference, n: int = 2) -> float:
    """Cumulative n-gram precision score on a 0-100 scale.

    Per order k the precision is clipped-matches / candidate-count; orders
    with zero matches are add-one smoothed so the geometric mean stays
    positive, and orders the candidate is too short to form count as 1.  A
    brevity penalty exp(1 - r/c) applies when the candidate is shorter than
    the reference.  An empty candidate scores 0.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    candidate = list(candidate)
    reference = list(reference)
    if not candidate:
        return 0.0
    log_precisions = 0.0
    for k in range(1, n + 1):
        cand = _ngrams(candidate, k)
        ref = _ngrams(reference, k)
        total = sum(cand.values())
        matches = sum(min(count, ref[gram]) for gram, count in cand.items())
        if matches == 0:
            precision = (matches + 1.0) / (total + 1.0)
        else:
            precision = matches / total
        log_precisions += math.log(precision) / n
    if len(candidate) < len(reference):
        brevity = math.exp(1.0 - len(reference) / len(candidate))
    else:
        brevity = 1.0
    return 100.0 * brevity * math.exp(log_precisions)


def distinct_n(sentences, n: int = 1) -> float:
    """Unique n-grams divided by total n-grams, pooled over all sentences."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    unique = set()
    total = 0
    for sentence in sentences:
        tokens = list(sentence)
        for i in range(len(tokens) - n + 1):
            unique.add(tuple(tokens[i : i + n]))
            total += 1
    return len(unique) / total if total else 0.0


def corpus_bleu(pairs, n: int = 2) -> float:
    """Mean sentence-level score over (candidate, reference) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no sentence pairs to score")
    return sum(bleu_n(c, r, n) for c, r in pairs) / len(pairs)


# --- independent emotion judge ------------------------------------------------

@dataclass
class EmotionJudge:
    """Bag-of-embeddings linear classifier over the nine emotion labels."""

    vocab: Vocabulary
    params: dict

    def predict(self, tokens) -> tuple[int, np.ndarray]:
        """Return (argmax label id, probability vector) for one sentence."""
        probs = self._probs(self.vocab.encode(list(tokens)))
        with T.no_grad():
            return int(np.argmax(probs.data)), probs.data.copy().ravel()

    def _probs(self, ids) -> T.Tensor:
        bag = T.mean(T.embedding_gather(self.params["emb"], np.asarray(ids)), axis=0, keepdims=True)
        logits = T.add(T.matmul(bag, self.params["w"]), self.params["b"])
        return T.softmax(logits, axis=-1)


def judge_examples(stories, tau: float = 0.5) -> list[tuple[tuple[str, ...], int]]:
    """(sentence tokens, resolved label id) pairs from annotated sentences."""
    from .corpus import resolve_emotions  # local import to avoid a cycle

    samples = []
    for story in stories:
        for sentence, row in zip(story.sentences, story.annotations):
            tokens = tuple(tokenize(sentence))
            for ann in row:
                samples.append((tokens, EMOTIONS.index(resolve_emotions(ann.votes, tau))))
    return samples


def train_judge(samples, seed: int = 0, d_model: int = 16, epochs: int = 60,
                lr: float = 0.1) -> EmotionJudge:
    """Fit the judge on (tokens, label id) samples with its own vocabulary."""
    samples = list(samples)
    if len({label for _, label in samples}) < 2:
        raise ValueError("judge training needs at least two distinct emotion labels")
    vocab = Vocabulary.build([tok for tokens, _ in samples for tok in tokens])
    rng = np.random.default_rng(seed)
    scale = math.sqrt(6.0 / (len(vocab) + d_model))
    params = {
        "emb": T.param(rng.uniform(-scale, scale, size=(len(vocab), d_model))),
        "w": T.param(rng.uniform(-scale, scale, size=(d_model, len(EMOTIONS)))),
        "b": T.param(np.zeros(len(EMOTIONS))),
    }
    judge = EmotionJudge(vocab, params)
    optimizer = AdamW(params, lr=lr, weight_decay=0.0)
    encoded = [(np.asarray(vocab.encode(list(tokens))), label) for tokens, label in samples]
    for epoch in range(epochs):
        for idx in rng.permutation(len(encoded)):
            ids, label = encoded[idx]
            probs = judge._probs(ids)
            loss = T.scalar_mul(T.log(T.clamp_min(T.take_per_row(probs, [label]), 1e-12)), -1.0)
            for p in params.values():
                p.grad = None
            T.backward(T.mean(loss))
            optimizer.step()
    return judge


def judge_accuracy(judge: EmotionJudge, samples) -> float:
    """Fraction of samples where the judge's argmax matches the gold label."""
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to score")
    hits = sum(1 for tokens, label in samples if judge.predict(tokens)[0] == label)
    return hits / len(samples)


def emotion_accuracy(judge: EmotionJudge, requested) -> float:
    """Fraction of (generated tokens, requested label id) pairs the judge confirms."""
    requested = list(requested)
    if not requested:
        raise ValueError("no generated sentences to score")
    hits = sum(1 for tokens, label in requested if judge.predict(tokens)[0] == label)
    return hits / len(requested)
