"""AVSD-format dialog loading, tokenization, vocabularies and analysis subsets.

Dataset files are UTF-8 JSON with a top-level ``"dialogs"`` array; each record
has ``image_id``, ``caption`` and ``dialog`` (a list of ``question``/``answer``
objects). Unknown fields (``summary`` etc.) are ignored.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>")

TERMINAL_PUNCT = frozenset(".,?!")

BINARY_YES = frozenset({"yes", "yeah", "yep"})
BINARY_NO = frozenset({"no", "nope"})
BINARY_TOKENS = BINARY_YES | BINARY_NO

PRONOUNS = frozenset({
    "he", "she", "it", "they", "him", "her", "them", "his", "hers", "its",
    "their", "theirs", "this", "that", "these", "those", "one", "ones",
})
AUDIO_KEYWORDS = frozenset({
    "sound", "sounds", "hear", "heard", "audio", "noise", "noises", "music",
    "talking", "talk", "say", "says", "said", "speak", "speaking", "sing",
    "singing", "loud",
})
RULE_VERSION = "lead-token+closed-lists/v1"

SUBSET_KINDS = ("binary", "non_binary", "coreference", "audio_related")


class DatasetError(ValueError):
    """Raised for malformed or empty dataset files."""


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and detach trailing ``. , ? !``.

    >>> tokenize("Is he eating?")
    ['is', 'he', 'eating', '?']
    """
    tokens = []
    for word in text.lower().split():
        end = len(word)
        while end > 0 and word[end - 1] in TERMINAL_PUNCT:
            end -= 1
        if end:
            tokens.append(word[:end])
        tokens.extend(word[end:])
    return tokens


@dataclass(frozen=True)
class Dialog:
    video_id: str
    caption: tuple[str, ...]
    turns: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]

    @property
    def questions(self) -> list[tuple[str, ...]]:
        return [q for q, _ in self.turns]

    @property
    def answers(self) -> list[tuple[str, ...]]:
        return [a for _, a in self.turns]


@dataclass(frozen=True)
class DatasetStats:
    num_dialogs: int
    num_turns: int
    num_words: int


def _require(record, key, index, kind):
    if not isinstance(record, dict) or key not in record:
        raise DatasetError(f"record {index}: missing field '{key}'")
    value = record[key]
    if not isinstance(value, kind):
        raise DatasetError(f"record {index}: field '{key}' has wrong type")
    return value


def parse_dialogs(records: Sequence[dict], split: str = "train") -> list[Dialog]:
    dialogs = []
    seen = set()
    for i, rec in enumerate(records):
        video_id = _require(rec, "image_id", i, str)
        caption = _require(rec, "caption", i, str)
        raw_turns = _require(rec, "dialog", i, list)
        if video_id in seen:
            raise DatasetError(f"record {i}: duplicate image_id '{video_id}'")
        seen.add(video_id)
        turns = []
        for j, turn in enumerate(raw_turns):
            q = _require(turn, "question", f"{i} turn {j}", str)
            a = _require(turn, "answer", f"{i} turn {j}", str)
            q_tok, a_tok = tokenize(q), tokenize(a)
            if not q_tok:
                raise DatasetError(f"record {i} turn {j}: empty 'question'")
            if not a_tok:
                raise DatasetError(f"record {i} turn {j}: empty 'answer'")
            turns.append((tuple(q_tok), tuple(a_tok)))
        if split == "train" and not turns:
            raise DatasetError(f"record {i}: missing field 'dialog' turns")
        dialogs.append(Dialog(video_id, tuple(tokenize(caption)), tuple(turns)))
    return dialogs


def compute_stats(dialogs: Sequence[Dialog]) -> DatasetStats:
    """Counts words over captions, questions and answers."""
    num_turns = sum(len(d.turns) for d in dialogs)
    num_words = sum(
        len(d.caption) + sum(len(q) + len(a) for q, a in d.turns) for d in dialogs
    )
    return DatasetStats(len(dialogs), num_turns, num_words)


def load_dataset(path, split: str = "train") -> tuple[list[Dialog], DatasetStats]:
    if split not in ("train", "val", "test"):
        raise ValueError(f"unknown split {split!r}")
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        raise DatasetError("empty dataset")
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"invalid JSON: {exc}") from None
    if not isinstance(payload, dict) or "dialogs" not in payload:
        raise DatasetError("missing top-level field 'dialogs'")
    records = payload["dialogs"]
    if not isinstance(records, list):
        raise DatasetError("top-level field 'dialogs' must be an array")
    if not records:
        raise DatasetError("empty dataset")
    dialogs = parse_dialogs(records, split)
    return dialogs, compute_stats(dialogs)


def iter_sentences(dialogs: Iterable[Dialog]):
    for d in dialogs:
        yield d.caption
        for q, a in d.turns:
            yield q
            yield a


@dataclass
class Vocabulary:
    """Token/index mapping with PAD=0, UNK=1, BOS=2, EOS=3 reserved."""

    itos: list[str]
    min_count: int = 1
    stoi: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.itos[:4]) != RESERVED_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_special and i in (PAD, BOS, EOS):
                continue
            out.append(self.itos[i])
        return out

    @classmethod
    def from_sequences(cls, sequences: Iterable[Sequence[str]], min_count: int = 1) -> "Vocabulary":
        counts = Counter()
        for seq in sequences:
            counts.update(seq)
        for tok in RESERVED_TOKENS:
            counts.pop(tok, None)
        kept = sorted(
            (tok for tok, c in counts.items() if c >= min_count),
            key=lambda tok: (-counts[tok], tok),
        )
        return cls(list(RESERVED_TOKENS) + kept, min_count)


def build_vocab(dialogs: Sequence[Dialog], min_count: int = 1) -> Vocabulary:
    """Frequency-descending vocabulary, ties broken lexicographically."""
    if not dialogs:
        raise ValueError("cannot build a vocabulary from zero dialogs")
    return Vocabulary.from_sequences(iter_sentences(dialogs), min_count)


@dataclass(frozen=True)
class SubsetLabel:
    kind: str
    rule_version: str = RULE_VERSION


@dataclass(frozen=True)
class TurnLabels:
    binary: bool
    polarity: str | None
    coreference: bool
    audio_related: bool
    rule_version: str = RULE_VERSION

    @property
    def non_binary(self) -> bool:
        return not self.binary

    def labels(self) -> frozenset[SubsetLabel]:
        kinds = ["binary" if self.binary else "non_binary"]
        if self.coreference:
            kinds.append("coreference")
        if self.audio_related:
            kinds.append("audio_related")
        return frozenset(SubsetLabel(k, self.rule_version) for k in kinds)

    def has(self, kind: str) -> bool:
        if kind == "overall":
            return True
        if kind not in SUBSET_KINDS:
            raise ValueError(f"unknown subset {kind!r}")
        return getattr(self, kind)


def answer_polarity(tokens: Sequence[str]) -> str | None:
    """'yes'/'no' from the first non-punctuation token, else None."""
    for tok in tokens:
        if tok in TERMINAL_PUNCT:
            continue
        if tok in BINARY_YES:
            return "yes"
        if tok in BINARY_NO:
            return "no"
        return None
    return None


def label_turn(question: Sequence[str], answer: Sequence[str]) -> TurnLabels:
    polarity = answer_polarity(answer)
    q = set(question)
    return TurnLabels(
        binary=polarity is not None,
        polarity=polarity,
        coreference=not PRONOUNS.isdisjoint(q),
        audio_related=not AUDIO_KEYWORDS.isdisjoint(q),
    )


def label_subsets(turns: Sequence[tuple[Sequence[str], Sequence[str]]]) -> list[TurnLabels]:
    return [label_turn(q, a) for q, a in turns]


def subset_counts(dialogs: Sequence[Dialog]) -> dict[str, int]:
    counts = dict.fromkeys(SUBSET_KINDS, 0)
    for d in dialogs:
        for lab in label_subsets(d.turns):
            for kind in SUBSET_KINDS:
                counts[kind] += lab.has(kind)
    return counts


def write_dataset(dialogs: Sequence[Dialog], path) -> None:
    """Serialize dialogs back to the JSON schema (space-joined tokens)."""
    payload = {"dialogs": [
        {
            "image_id": d.video_id,
            "caption": " ".join(d.caption),
            "dialog": [{"question": " ".join(q), "answer": " ".join(a)} for q, a in d.turns],
        }
        for d in dialogs
    ]}
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
