"""Control-condition grammar, tokenizer, and vocabulary.

A story sentence is conditioned on up to ``k`` per-character control
conditions. Each condition names one character, the actions that
character should take, and the emotion the character should feel. The
codec turns those structured conditions into a flat marker-token stream
and back:

    <SEP> <soc> name... <soa> action... (<sep> action...)* <soe> emotion

Zero actions are encoded as a single ``<no_action>`` marker. The full
model input is ``<s> context-tokens conditions </s>``.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

import numpy as np

# Reserved marker tokens, ids 0..9 in this order in every vocabulary.
BOS = "<s>"
EOS = "</s>"
PAD = "<pad>"
UNK = "<unk>"
COND_START = "<SEP>"
NAME_START = "<soc>"
ACTIONS_START = "<soa>"
EMOTION_START = "<soe>"
ACTION_SEP = "<sep>"
NO_ACTION = "<no_action>"
SPECIAL_TOKENS = (BOS, EOS, PAD, UNK, COND_START, NAME_START, ACTIONS_START, EMOTION_START, ACTION_SEP, NO_ACTION)

BOS_ID, EOS_ID, PAD_ID, UNK_ID = 0, 1, 2, 3

# Emotion categories: the eight basic ones plus neutral, ids 0..8.
EMOTIONS = ("joy", "trust", "fear", "surprise", "sadness", "disgust", "anger", "anticipation", "neutral")
NEUTRAL = "neutral"
EMOTION_IDS = {label: i for i, label in enumerate(EMOTIONS)}

# Surrogate character name used when padding inactive conditions.
PAD_NAME = "none"

_TOKEN_RE = re.compile(r"\w+(?:'\w+)*|[^\w\s]")
_PUNCT_RE = re.compile(r"^[^\w\s]$")


class ChaeFormatError(ValueError):
    """A control condition or its token stream violates the grammar."""

    def __init__(self, message: str, position: int | None = None):
        super().__init__(message)
        self.position = position


def tokenize(text: str) -> list[str]:
    """Lowercase, whitespace-split, punctuation as separate tokens.

    >>> tokenize("Jessica had to go to the city.")
    ['jessica', 'had', 'to', 'go', 'to', 'the', 'city', '.']
    """
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: list[str]) -> str:
    """Space-join tokens, attaching punctuation to the preceding word."""
    parts: list[str] = []
    for tok in tokens:
        if parts and _PUNCT_RE.match(tok):
            parts[-1] += tok
        else:
            parts.append(tok)
    return " ".join(parts)


@dataclass(frozen=True)
class ChaeCondition:
    """One character's control condition for one sentence."""

    name: str
    actions: tuple[str, ...] = ()
    emotion: str = NEUTRAL

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        if self.emotion not in EMOTION_IDS:
            raise ChaeFormatError(f"unknown emotion {self.emotion!r}; expected one of {', '.join(EMOTIONS)}")
        if not tokenize(self.name):
            raise ChaeFormatError(f"character name {self.name!r} has no tokens")
        for action in self.actions:
            if not tokenize(action):
                raise ChaeFormatError(f"action {action!r} has no tokens")

    @property
    def emotion_id(self) -> int:
        return EMOTION_IDS[self.emotion]


PAD_CONDITION = ChaeCondition(name=PAD_NAME, actions=(), emotion=NEUTRAL)


@dataclass(frozen=True)
class ChaeSpec:
    """Ordered per-character conditions for one sentence.

    ``active[i]`` is False for padding slots. A condition is considered
    padding exactly when it equals the surrogate (name "none", zero
    actions, neutral); a genuine character named "none" with no actions
    and neutral emotion is indistinguishable by design.
    """

    conditions: tuple[ChaeCondition, ...]
    active: tuple[bool, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        object.__setattr__(self, "conditions", tuple(self.conditions))
        if self.active is None:
            object.__setattr__(self, "active", tuple(True for _ in self.conditions))
        else:
            object.__setattr__(self, "active", tuple(bool(a) for a in self.active))
        if len(self.active) != len(self.conditions):
            raise ChaeFormatError(
                f"got {len(self.conditions)} conditions but {len(self.active)} active flags"
            )

    def __len__(self) -> int:
        return len(self.conditions)

    @property
    def active_conditions(self) -> tuple[ChaeCondition, ...]:
        return tuple(c for c, a in zip(self.conditions, self.active) if a)

    @property
    def emotion_ids(self) -> tuple[int, ...]:
        return tuple(c.emotion_id for c in self.conditions)


def pad_conditions(spec: ChaeSpec, k: int) -> ChaeSpec:
    """Right-pad with inactive surrogate conditions up to exactly ``k``."""
    if len(spec) > k:
        raise ChaeFormatError(f"got {len(spec)} conditions but k={k}; refusing to truncate")
    pad_count = k - len(spec)
    return ChaeSpec(
        conditions=spec.conditions + (PAD_CONDITION,) * pad_count,
        active=spec.active + (False,) * pad_count,
    )


def condition_from_json(obj, where: str = "chae") -> tuple[ChaeCondition, bool]:
    """Parse one ``{char, actions?, emotion?, active?}`` object.

    Returns the condition and its active flag; ``active: false`` yields the
    padding surrogate regardless of the other fields.
    """
    if not isinstance(obj, dict):
        raise ChaeFormatError(f"{where} must be an object")
    active = obj.get("active", True)
    if not isinstance(active, bool):
        raise ChaeFormatError(f"{where}.active must be a boolean")
    if not active:
        return PAD_CONDITION, False
    name = obj.get("char")
    if not isinstance(name, str) or not name.strip():
        raise ChaeFormatError(f"{where}.char must be a non-empty string")
    actions = obj.get("actions", [])
    if not isinstance(actions, list) or not all(isinstance(a, str) for a in actions):
        raise ChaeFormatError(f"{where}.actions must be an array of strings")
    emotion = obj.get("emotion", NEUTRAL)
    if not isinstance(emotion, str):
        raise ChaeFormatError(f"{where}.emotion must be a string")
    try:
        return ChaeCondition(name=name, actions=tuple(actions), emotion=emotion), True
    except ChaeFormatError as exc:
        raise ChaeFormatError(f"{where}: {exc}") from exc


def spec_from_json(arr, where: str = "chae") -> ChaeSpec:
    """Parse a JSON array of condition objects into a ChaeSpec."""
    if not isinstance(arr, list) or not arr:
        raise ChaeFormatError(f"{where} must be a non-empty array of condition objects")
    parsed = [condition_from_json(obj, f"{where}[{i}]") for i, obj in enumerate(arr)]
    return ChaeSpec(
        conditions=tuple(cond for cond, _ in parsed),
        active=tuple(flag for _, flag in parsed),
    )


def spec_to_json(spec: ChaeSpec) -> list[dict]:
    """Inverse of :func:`spec_from_json`; inactive slots keep surrogate fields."""
    return [
        {"char": cond.name, "actions": list(cond.actions), "emotion": cond.emotion, "active": flag}
        for cond, flag in zip(spec.conditions, spec.active)
    ]


def serialize_condition(cond: ChaeCondition) -> list[str]:
    """Flatten one condition into its marker-token form."""
    out = [COND_START, NAME_START, *tokenize(cond.name), ACTIONS_START]
    if not cond.actions:
        out.append(NO_ACTION)
    else:
        for i, action in enumerate(cond.actions):
            if i:
                out.append(ACTION_SEP)
            out.extend(tokenize(action))
    out.extend([EMOTION_START, cond.emotion])
    return out


def serialize_chae(spec: ChaeSpec) -> list[str]:
    """Concatenate the serialized form of every condition (padding included)."""
    out: list[str] = []
    for cond in spec.conditions:
        out.extend(serialize_condition(cond))
    return out


def _is_padding(cond: ChaeCondition) -> bool:
    return cond.name == PAD_NAME and not cond.actions and cond.emotion == NEUTRAL


def parse_chae(tokens: list[str]) -> ChaeSpec:
    """Inverse of :func:`serialize_chae`; raises with the offending position.

    Round trip: ``parse_chae(serialize_chae(spec)) == spec`` for specs whose
    free text is already in tokenized form.
    """
    if not tokens:
        raise ChaeFormatError("empty condition stream", position=0)
    if tokens[0] != COND_START:
        raise ChaeFormatError(f"expected {COND_START} at position 0, got {tokens[0]!r}", position=0)

    conditions: list[ChaeCondition] = []
    active: list[bool] = []
    i = 0
    n = len(tokens)
    while i < n:
        if tokens[i] != COND_START:
            raise ChaeFormatError(f"expected {COND_START} at position {i}, got {tokens[i]!r}", position=i)
        i += 1
        if i >= n or tokens[i] != NAME_START:
            raise ChaeFormatError(f"expected {NAME_START} at position {i}", position=i)
        i += 1
        name_tokens: list[str] = []
        while i < n and tokens[i] not in SPECIAL_TOKENS:
            name_tokens.append(tokens[i])
            i += 1
        if not name_tokens:
            raise ChaeFormatError(f"empty character name at position {i}", position=i)
        if i >= n or tokens[i] != ACTIONS_START:
            raise ChaeFormatError(f"expected {ACTIONS_START} at position {i}", position=i)
        i += 1

        actions: list[str] = []
        if i < n and tokens[i] == NO_ACTION:
            i += 1
        else:
            current: list[str] = []
            while i < n and tokens[i] not in (ACTION_SEP, EMOTION_START):
                if tokens[i] in SPECIAL_TOKENS:
                    raise ChaeFormatError(f"unexpected {tokens[i]!r} inside action at position {i}", position=i)
                current.append(tokens[i])
                i += 1
            if not current:
                raise ChaeFormatError(f"empty action at position {i}", position=i)
            actions.append(" ".join(current))
            while i < n and tokens[i] == ACTION_SEP:
                i += 1
                current = []
                while i < n and tokens[i] not in (ACTION_SEP, EMOTION_START):
                    if tokens[i] in SPECIAL_TOKENS:
                        raise ChaeFormatError(f"unexpected {tokens[i]!r} inside action at position {i}", position=i)
                    current.append(tokens[i])
                    i += 1
                if not current:
                    raise ChaeFormatError(f"dangling action separator at position {i}", position=i)
                actions.append(" ".join(current))

        if i >= n or tokens[i] != EMOTION_START:
            raise ChaeFormatError(f"expected {EMOTION_START} at position {i}", position=i)
        i += 1
        if i >= n:
            raise ChaeFormatError(f"missing emotion token at position {i}", position=i)
        emotion = tokens[i]
        if emotion not in EMOTION_IDS:
            raise ChaeFormatError(f"unknown emotion {emotion!r} at position {i}", position=i)
        i += 1
        if i < n and tokens[i] != COND_START:
            raise ChaeFormatError(
                f"emotion must be exactly one token; unexpected {tokens[i]!r} at position {i}", position=i
            )

        cond = ChaeCondition(name=" ".join(name_tokens), actions=tuple(actions), emotion=emotion)
        conditions.append(cond)
        active.append(not _is_padding(cond))

    return ChaeSpec(conditions=tuple(conditions), active=tuple(active))


class VocabularyError(ValueError):
    """The vocabulary file or token list violates the reserved layout."""


class Vocabulary:
    """Token/id bijection; line number == id when persisted."""

    def __init__(self, tokens: list[str]):
        tokens = list(tokens)
        if len(tokens) < 11:
            raise VocabularyError(f"vocabulary needs at least 11 tokens, got {len(tokens)}")
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise VocabularyError("vocabulary must start with the reserved tokens in canonical order")
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("vocabulary contains duplicate tokens")
        for tok in tokens:
            if not tok or any(c.isspace() for c in tok):
                raise VocabularyError(f"token {tok!r} is empty or contains whitespace")
        self._tokens = tokens
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    @classmethod
    def build(cls, corpus_tokens) -> "Vocabulary":
        """Deterministic vocabulary: reserved prefix, then sorted content tokens.

        Emotion labels and the padding surrogate name are always included
        so any well-formed condition can be encoded.
        """
        content = set(corpus_tokens) | set(EMOTIONS) | {PAD_NAME}
        content -= set(SPECIAL_TOKENS)
        return cls(list(SPECIAL_TOKENS) + sorted(content))

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise VocabularyError(f"token id {idx} out of range for vocabulary of size {len(self._tokens)}")
        return self._tokens[idx]

    def encode(self, tokens: list[str]) -> list[int]:
        return [self._ids.get(t, UNK_ID) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.token_of(int(i)) for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self._tokens))
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        while tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens)

    def content_hash(self) -> str:
        """Stable fingerprint used for checkpoint compatibility checks."""
        return hashlib.sha256("\n".join(self._tokens).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ModelInput:
    """Encoder-ready id sequence with the condition region marked.

    ``chae_mask`` is True exactly over the serialized-condition tokens, a
    single contiguous run. ``condition_spans[i]`` is the half-open id-index
    range of condition ``i``.
    """

    ids: np.ndarray
    chae_mask: np.ndarray
    condition_spans: tuple[tuple[int, int], ...]

    @property
    def chae_ids(self) -> np.ndarray:
        return self.ids[self.chae_mask]


def assemble_input(context_tokens: list[str], chae: ChaeSpec, vocab: Vocabulary, k: int) -> ModelInput:
    """Build ``<s> context conditions </s>`` ids plus the condition mask."""
    spec = pad_conditions(chae, k) if len(chae) != k else chae
    ids: list[int] = [BOS_ID]
    ids.extend(vocab.encode(context_tokens))
    spans: list[tuple[int, int]] = []
    for cond in spec.conditions:
        start = len(ids)
        ids.extend(vocab.encode(serialize_condition(cond)))
        spans.append((start, len(ids)))
    chae_start, chae_end = spans[0][0], spans[-1][1]
    ids.append(EOS_ID)
    mask = np.zeros(len(ids), dtype=bool)
    mask[chae_start:chae_end] = True
    return ModelInput(
        ids=np.asarray(ids, dtype=np.int64),
        chae_mask=mask,
        condition_spans=tuple(spans),
    )
