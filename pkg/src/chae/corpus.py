"""Annotated story corpora: JSONL i/o, vote resolution, pair extraction, synthesis.

A corpus is a JSON-lines file, one story per line::

    {"id": "story-0001",
     "sentences": ["one day tom went to the market feeling calm .", ...],
     "annotations": [[], [{"char": "tom",
                           "actions": ["to chase the thief"],
                           "votes": [{"label": "anger", "confidence": 0.9}, ...]}], ...]}

``annotations[i]`` describes the characters of ``sentences[i]``; an empty list
marks a sentence that is context only and never a prediction target.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .textcodec import (
    EMOTION_IDS,
    EMOTIONS,
    EOS,
    NEUTRAL,
    ChaeCondition,
    ChaeSpec,
    Vocabulary,
    tokenize,
)
from .training import TrainExample

log = logging.getLogger(__name__)


class CorpusError(ValueError):
    """A corpus file or record violates the schema."""


@dataclass(frozen=True)
class EmotionVote:
    """One annotator's emotion label with a confidence in [0, 1]."""

    label: str
    confidence: float

    def __post_init__(self):
        if self.label not in EMOTION_IDS:
            raise CorpusError(f"unknown emotion label {self.label!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise CorpusError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class CharAnnotation:
    """Per-character annotation of one sentence: actions plus emotion votes."""

    name: str
    actions: tuple[str, ...] = ()
    votes: tuple[EmotionVote, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "votes", tuple(self.votes))
        if not self.name or not self.name.strip():
            raise CorpusError("annotation character name is empty")


@dataclass(frozen=True)
class AnnotatedStory:
    """A story with per-sentence, per-character annotations."""

    story_id: str
    sentences: tuple[str, ...]
    annotations: tuple[tuple[CharAnnotation, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))
        object.__setattr__(self, "annotations", tuple(tuple(a) for a in self.annotations))
        if not self.sentences:
            raise CorpusError(f"story {self.story_id!r} has no sentences")
        if len(self.annotations) != len(self.sentences):
            raise CorpusError(
                f"story {self.story_id!r}: {len(self.annotations)} annotation rows for "
                f"{len(self.sentences)} sentences"
            )


def resolve_emotions(votes, tau: float = 0.5) -> str:
    """Collapse annotator votes into one label.

    The winner is the label with the highest summed confidence (ties go to the
    lower label id).  A winner whose single strongest vote is below ``tau`` is
    considered unreliable and falls back to ``neutral``; so does an empty vote
    list.
    """
    votes = list(votes)
    if not votes:
        return NEUTRAL
    totals = Counter()
    strongest = {}
    for v in votes:
        totals[v.label] += v.confidence
        strongest[v.label] = max(strongest.get(v.label, 0.0), v.confidence)
    winner = min(totals, key=lambda label: (-totals[label], EMOTION_IDS[label]))
    return winner if strongest[winner] >= tau else NEUTRAL


def annotation_condition(ann: CharAnnotation, tau: float = 0.5) -> ChaeCondition:
    """Turn a raw annotation into a control condition with a resolved emotion."""
    return ChaeCondition(name=ann.name, actions=ann.actions, emotion=resolve_emotions(ann.votes, tau))


def _parse_story(record: dict, lineno: int) -> AnnotatedStory:
    def fail(msg):
        raise CorpusError(f"line {lineno}: {msg}")

    if not isinstance(record, dict):
        fail("record is not a JSON object")
    for key in ("id", "sentences", "annotations"):
        if key not in record:
            fail(f"missing required field {key!r}")
    if not isinstance(record["id"], str) or not record["id"]:
        fail("'id' must be a non-empty string")
    sentences = record["sentences"]
    annotations = record["annotations"]
    if not isinstance(sentences, list) or not all(isinstance(s, str) for s in sentences):
        fail("'sentences' must be a list of strings")
    if not isinstance(annotations, list):
        fail("'annotations' must be a list")
    if len(annotations) != len(sentences):
        fail(f"{len(annotations)} annotation rows for {len(sentences)} sentences")

    rows = []
    for i, row in enumerate(annotations):
        if not isinstance(row, list):
            fail(f"annotations[{i}] must be a list")
        anns = []
        for j, entry in enumerate(row):
            where = f"annotations[{i}][{j}]"
            if not isinstance(entry, dict):
                fail(f"{where} must be an object")
            if "char" not in entry:
                fail(f"{where} is missing 'char'")
            actions = entry.get("actions", [])
            votes = entry.get("votes", [])
            if not isinstance(actions, list) or not all(isinstance(a, str) for a in actions):
                fail(f"{where}.actions must be a list of strings")
            if not isinstance(votes, list):
                fail(f"{where}.votes must be a list")
            parsed_votes = []
            for v in votes:
                if not isinstance(v, dict) or "label" not in v or "confidence" not in v:
                    fail(f"{where}.votes entries need 'label' and 'confidence'")
                try:
                    parsed_votes.append(EmotionVote(v["label"], float(v["confidence"])))
                except (CorpusError, TypeError, ValueError) as exc:
                    fail(f"{where}: {exc}")
            try:
                anns.append(CharAnnotation(entry["char"], tuple(actions), tuple(parsed_votes)))
            except CorpusError as exc:
                fail(f"{where}: {exc}")
        rows.append(tuple(anns))
    try:
        return AnnotatedStory(record["id"], tuple(sentences), tuple(rows))
    except CorpusError as exc:
        fail(str(exc))


def load_corpus(path) -> list[AnnotatedStory]:
    """Read a JSONL corpus, reporting schema violations with line numbers."""
    stories = []
    seen_ids = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            story = _parse_story(record, lineno)
            if story.story_id in seen_ids:
                raise CorpusError(f"line {lineno}: duplicate story id {story.story_id!r}")
            seen_ids.add(story.story_id)
            stories.append(story)
    return stories


def write_corpus(path, stories) -> None:
    """Write stories as JSONL, the inverse of :func:`load_corpus`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for story in stories:
            record = {
                "id": story.story_id,
                "sentences": list(story.sentences),
                "annotations": [
                    [
                        {
                            "char": ann.name,
                            "actions": list(ann.actions),
                            "votes": [
                                {"label": v.label, "confidence": v.confidence} for v in ann.votes
                            ],
                        }
                        for ann in row
                    ]
                    for row in story.annotations
                ],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def make_sentence_pairs(story: AnnotatedStory, k: int, tau: float = 0.5) -> list[TrainExample]:
    """Expand a story into (context, conditions, target) supervision pairs.

    Sentence ``i`` becomes a target with the concatenation of sentences
    ``0..i-1`` as context, provided it has at least one annotation.  Sentences
    with more than ``k`` annotated characters keep the first ``k`` (warned),
    matching the fixed condition width of the model input.
    """
    pairs = []
    for i in range(1, len(story.sentences)):
        anns = story.annotations[i]
        if not anns:
            continue
        if len(anns) > k:
            log.warning(
                "story %s sentence %d: %d annotated characters, keeping the first %d",
                story.story_id, i, len(anns), k,
            )
            anns = anns[:k]
        context = [tok for s in story.sentences[:i] for tok in tokenize(s)]
        target = tokenize(story.sentences[i]) + [EOS]
        spec = ChaeSpec(conditions=tuple(annotation_condition(a, tau) for a in anns))
        pairs.append(TrainExample(tuple(context), spec, tuple(target)))
    return pairs


def split_pairs(stories, ratios=(0.8, 0.1, 0.1), seed: int = 0, k: int = 2, tau: float = 0.5):
    """Shuffle stories and split them (not pairs) into train/val/test examples.

    Splitting at the story level keeps every sentence of a story on one side,
    so validation never sees a context the trainer memorized.  Counts are the
    floor of ``ratio * n`` with the remainder given to the earliest splits.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    stories = list(stories)
    order = np.random.default_rng(seed).permutation(len(stories))
    shuffled = [stories[i] for i in order]
    counts = [int(r * len(stories)) for r in ratios]
    for i in range(len(stories) - sum(counts)):
        counts[i % 3] += 1
    splits = []
    start = 0
    for count in counts:
        chunk = shuffled[start : start + count]
        splits.append([pair for story in chunk for pair in make_sentence_pairs(story, k, tau)])
        start += count
    return tuple(splits)


def corpus_vocabulary(stories) -> Vocabulary:
    """Vocabulary over every sentence and annotation token in the corpus."""
    tokens = []
    for story in stories:
        for sentence in story.sentences:
            tokens.extend(tokenize(sentence))
        for row in story.annotations:
            for ann in row:
                tokens.extend(tokenize(ann.name))
                for action in ann.actions:
                    tokens.extend(tokenize(action))
    return Vocabulary.build(tokens)


def corpus_stats(stories) -> dict:
    """Summary counts used by the command-line ``stats`` report."""
    stories = list(stories)
    emotion_hist = {label: 0 for label in EMOTIONS}
    names = set()
    n_pairs = 0
    n_tokens = 0
    n_sentences = 0
    for story in stories:
        n_sentences += len(story.sentences)
        for sentence in story.sentences:
            n_tokens += len(tokenize(sentence))
        for i, row in enumerate(story.annotations):
            if i > 0 and row:
                n_pairs += 1
            for ann in row:
                names.add(ann.name)
                emotion_hist[resolve_emotions(ann.votes)] += 1
    return {
        "n_stories": len(stories),
        "n_sentences": n_sentences,
        "n_pairs": n_pairs,
        "n_characters": len(names),
        "vocabulary_size": len(corpus_vocabulary(stories)),
        "avg_sentence_tokens": (n_tokens / n_sentences) if n_sentences else 0.0,
        "emotion_histogram": emotion_hist,
    }


# --- synthetic corpus ---------------------------------------------------------

_NAMES = (
    "tom", "ana", "ben", "mia", "leo", "zoe", "max", "ivy", "sam", "eva",
    "dan", "amy", "joe", "lily", "mark", "nora", "paul", "rita", "seth", "tara",
    "umar", "vera", "will", "xena", "yuri", "omar", "gina", "hugo", "iris", "jack",
)
_PLACES = ("market", "forest", "harbor", "castle", "garden", "library", "station", "village")
_ACTIONS = (
    "to chase the thief", "to write a letter", "to climb the tower", "to bake some bread",
    "to fix the boat", "to read a book", "to plant a tree", "to sing a song",
    "to paint the wall", "to feed the horse", "to sweep the floor", "to light a lamp",
)
# One cue word per emotion, bijective, so a sentence's wording reveals its label.
EMOTION_KEYWORDS = {
    "joy": "delighted",
    "trust": "reassured",
    "fear": "terrified",
    "surprise": "astonished",
    "sadness": "mournful",
    "disgust": "revolted",
    "anger": "furious",
    "anticipation": "eager",
    "neutral": "calm",
}


def _votes(label: str) -> tuple[EmotionVote, ...]:
    return (
        EmotionVote(label, 0.9),
        EmotionVote(label, 0.8),
        EmotionVote(label, 0.85),
    )


def synth_corpus(n_stories: int = 50, seed: int = 0) -> list[AnnotatedStory]:
    """Seeded template stories where only the conditions predict the wording.

    Every story is a beginning introducing two characters plus three annotated
    sentences.  Which character acts, which action phrase appears, and which
    one-to-one emotion cue word a sentence carries are all drawn at random
    (given the seed), so the surrounding context never determines them — a
    model can only get the next sentence right by reading the control
    conditions.  Emotion labels are drawn from a balanced pool so the
    histogram stays flat; the third sentence has no action phrase.
    """
    rng = np.random.default_rng(seed)
    # Balanced sentence emotions: a shuffled pool with every label repeated
    # equally often, sliced three per story.
    slots = 3 * n_stories
    pool = rng.permutation(np.tile(np.arange(len(EMOTIONS)), -(-slots // len(EMOTIONS)))[:slots])
    stories = []
    for s in range(n_stories):
        a, b = (_NAMES[i] for i in rng.choice(len(_NAMES), size=2, replace=False))
        place = _PLACES[rng.integers(len(_PLACES))]
        emotions = [EMOTIONS[i] for i in pool[3 * s : 3 * s + 3]]
        kws = [EMOTION_KEYWORDS[e] for e in emotions]
        act = [_ACTIONS[i] for i in rng.integers(len(_ACTIONS), size=3)]
        n1 = a if rng.integers(2) else b
        n2, n3 = (a, b) if rng.integers(2) else (b, a)
        n4 = a if rng.integers(2) else b

        sentences = (
            f"one day {a} and {b} went to the {place} feeling {EMOTION_KEYWORDS[NEUTRAL]} .",
            f"{n1} felt {kws[0]} and decided {act[0]} .",
            f"{n2} felt {kws[1]} and decided {act[1]} while {n3} decided {act[2]} .",
            f"{n4} felt {kws[2]} and rested .",
        )
        annotations = (
            (),
            (CharAnnotation(n1, (act[0],), _votes(emotions[0])),),
            (
                CharAnnotation(n2, (act[1],), _votes(emotions[1])),
                CharAnnotation(n3, (act[2],), _votes(emotions[1])),
            ),
            (CharAnnotation(n4, (), _votes(emotions[2])),),
        )
        stories.append(AnnotatedStory(f"story-{s:04d}", sentences, annotations))
    return stories
