"""Text cleaning, tokenization, vocabulary, and metadata encoding.

The normalization pipeline applied before any matching or embedding:

1. strip HTML/CSS markup and configured stop words (``clean_text``),
2. replace each ``$...$`` formula with its canonical spelling
   (:mod:`exsim.formula`),
3. lowercase and split into word / number / single-character tokens.

All functions here are pure; a built :class:`Vocab` is immutable.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .formula import normalize_formula

PAD_ID = 0
UNK_ID = 1
SEP_ID = 2
RESERVED_TOKENS = ("<pad>", "<unk>", "<sep>")

_SCRIPT_STYLE_RE = re.compile(r"<(script|style)\b[^>]*>.*?</\1\s*>", re.I | re.S)
_TAG_RE = re.compile(r"<[^>]*>")
_TOKEN_RE = re.compile(r"[a-z]+|\d+(?:\.\d+)?|\S")


def _formula_segments(text: str):
    """Yield (is_formula, segment) pieces; formula segments keep their $ fences.

    An unpaired trailing ``$`` is treated as plain text.
    """
    pos = 0
    while True:
        start = text.find("$", pos)
        if start < 0:
            break
        end = text.find("$", start + 1)
        if end < 0:
            break
        if start > pos:
            yield False, text[pos:start]
        yield True, text[start:end + 1]
        pos = end + 1
    if pos < len(text):
        yield False, text[pos:]


def clean_text(raw: str, stop_words: Iterable[str] = ()) -> str:
    """Strip markup and stop words, collapse whitespace. Total; never grows.

    Stop words are removed as whole words and only outside ``$...$`` spans,
    so formula content is untouched.
    """
    text = _SCRIPT_STYLE_RE.sub(" ", raw)
    text = _TAG_RE.sub(" ", text)
    stop = sorted({w for w in stop_words if w})
    if stop:
        pattern = re.compile(r"\b(?:" + "|".join(re.escape(w) for w in stop) + r")\b",
                             re.IGNORECASE)
        text = "".join(seg if is_formula else pattern.sub(" ", seg)
                       for is_formula, seg in _formula_segments(text))
    return " ".join(text.split())


def normalize_text(raw: str, stop_words: Iterable[str] = ()) -> tuple[str, int]:
    """Clean text and canonicalize every ``$...$`` formula.

    Returns the normalized text (formula fences dropped, canonical tokens
    inlined) and the number of formulas that needed the character-level
    fallback.
    """
    cleaned = clean_text(raw, stop_words)
    parts = []
    fallbacks = 0
    for is_formula, seg in _formula_segments(cleaned):
        if is_formula:
            norm = normalize_formula(seg[1:-1])
            if not norm.parsed:
                fallbacks += 1
            parts.append(norm.text)
        else:
            parts.append(seg)
    return " ".join(" ".join(parts).split()), fallbacks


class Vocab:
    """Token to id map with reserved PAD/UNK/SEP ids and stable ordering."""

    def __init__(self, tokens: Sequence[str]):
        self._id_to_token = list(RESERVED_TOKENS) + list(tokens)
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}
        if len(self._token_to_id) != len(self._id_to_token):
            raise ValueError("vocabulary contains duplicate tokens")

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Vocab":
        """Count tokens over normalized texts; order by count desc, then token."""
        counts = Counter()
        for text in texts:
            counts.update(split_tokens(text))
        kept = sorted((t for t, c in counts.items() if c >= min_count),
                      key=lambda t: (-counts[t], t))
        return cls(kept)

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        return self._id_to_token[token_id]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._id_to_token[i] for i in ids]

    def save(self, path) -> None:
        """One non-reserved token per line; line number + reserved count = id."""
        with open(path, "w", encoding="utf-8") as fh:
            for token in self._id_to_token[len(RESERVED_TOKENS):]:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, "r", encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    def __post_init__(self):
        if any(i < 0 for i in self.ids):
            raise ValueError("negative token id")

    def __len__(self) -> int:
        return len(self.ids)

    def array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)


def split_tokens(text: str) -> list[str]:
    """Lowercase and split into words, numbers and single symbol characters."""
    return _TOKEN_RE.findall(text.lower())


def tokenize(text: str, vocab: Vocab) -> TokenSequence:
    """Map normalized text to vocabulary ids; out-of-vocabulary becomes UNK."""
    return TokenSequence(tuple(vocab.id_of(t) for t in split_tokens(text)))


def detokenize(seq: TokenSequence, vocab: Vocab) -> list[str]:
    return vocab.decode(seq.ids)


# ---------------------------------------------------------------------------
# Metadata encoding

class MetadataError(ValueError):
    """Metadata references something outside the corpus dictionaries."""


@dataclass(frozen=True)
class MetadataEncoding:
    type_onehot: np.ndarray
    difficulty_onehot: np.ndarray
    concept_vector: np.ndarray  # 1/n at each of the n concept indices


def encode_metadata(metadata, exercise_types: Sequence[str], levels: int,
                    concepts: Sequence[str]) -> MetadataEncoding:
    """One-hot type and difficulty; concepts as a normalized multi-hot.

    An exercise with n concepts gets value 1/n at each concept index, so the
    concept vector always sums to one and doubles as a target distribution.
    """
    try:
        type_idx = exercise_types.index(metadata.exercise_type)
    except ValueError:
        raise MetadataError(f"unknown exercise type {metadata.exercise_type!r}") from None
    if not 1 <= metadata.difficulty <= levels:
        raise MetadataError(f"difficulty {metadata.difficulty} outside [1, {levels}]")
    concept_idx = []
    for c in metadata.knowledge_concepts:
        try:
            concept_idx.append(concepts.index(c))
        except ValueError:
            raise MetadataError(f"unknown concept id {c!r}") from None

    type_vec = np.zeros(len(exercise_types))
    type_vec[type_idx] = 1.0
    diff_vec = np.zeros(levels)
    diff_vec[metadata.difficulty - 1] = 1.0
    concept_vec = np.zeros(len(concepts))
    concept_vec[concept_idx] = 1.0 / len(concept_idx)
    return MetadataEncoding(type_vec, diff_vec, concept_vec)
