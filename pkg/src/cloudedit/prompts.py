"""Closed-grammar edit prompts: rendering, tokenization, part extraction."""

from __future__ import annotations

import string
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

from .errors import TokenizeError, UnknownCategoryError, UnknownTokenError

L_MAX = 8
NULL_ID = 0
UNKNOWN = "unknown"

# comparative word per (attribute, direction)
_COMPARATIVES: dict[tuple[str, str], str] = {
    ("thickness", "increase"): "thicker",
    ("thickness", "decrease"): "thinner",
    ("width", "increase"): "wider",
    ("width", "decrease"): "narrower",
    ("depth", "increase"): "deeper",
    ("depth", "decrease"): "shallower",
    ("height", "increase"): "taller",
    ("height", "decrease"): "shorter",
    ("length", "increase"): "longer",
    ("length", "decrease"): "shorter",
    ("radius", "increase"): "thicker",
    ("radius", "decrease"): "thinner",
}

# parts rendered as plural nouns; everything else takes an article
_PLURAL_PARTS = {("chair", "leg"), ("chair", "arm"), ("table", "leg")}

N_TEMPLATES = 3


def _read_data_lines(name: str) -> list[str]:
    text = resources.files("cloudedit.data").joinpath(name).read_text("utf-8")
    out = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(line)
    return out


@dataclass(frozen=True)
class Vocabulary:
    """Closed word list; index in ``tokens`` is the token id, id 0 is ''."""

    tokens: tuple[str, ...]
    ids: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.tokens)

    def word(self, token_id: int) -> str:
        return self.tokens[token_id]


@lru_cache(maxsize=1)
def load_vocabulary() -> Vocabulary:
    words = _read_data_lines("vocabulary.txt")
    tokens = ("",) + tuple(words)
    return Vocabulary(tokens=tokens, ids={w: i for i, w in enumerate(tokens)})


@lru_cache(maxsize=1)
def load_keywords() -> dict[str, dict[str, tuple[str, ...]]]:
    """Per-category part keyword lists; insertion order is the scan order."""
    table: dict[str, dict[str, tuple[str, ...]]] = {}
    for line in _read_data_lines("keywords.txt"):
        category, part, keywords = line.split(":")
        table.setdefault(category, {})[part] = tuple(keywords.split(","))
    return table


def _clean(word: str) -> str:
    return word.strip(string.punctuation)


def tokenize(text: str, strict: bool = True) -> np.ndarray:
    """Encode ``text`` to a fixed-length id sequence padded with id 0."""
    vocab = load_vocabulary()
    ids = []
    for raw in text.lower().split():
        word = _clean(raw)
        if not word:
            continue
        token_id = vocab.ids.get(word)
        if token_id is None:
            if strict:
                raise UnknownTokenError(f"word {word!r} is not in the vocabulary")
            continue
        ids.append(token_id)
    if len(ids) > L_MAX:
        raise TokenizeError(f"prompt has {len(ids)} tokens, limit is {L_MAX}")
    return np.array(ids + [NULL_ID] * (L_MAX - len(ids)), dtype=np.int64)


def null_prompt() -> np.ndarray:
    return np.zeros(L_MAX, dtype=np.int64)


def detokenize(ids: Iterable[int]) -> str:
    vocab = load_vocabulary()
    return " ".join(vocab.tokens[int(i)] for i in ids if int(i) != NULL_ID)


def _part_phrase(category: str, part: str) -> tuple[str, bool]:
    """Display form of a part and whether it is plural."""
    if (category, part) in _PLURAL_PARTS:
        return part + "s", True
    return part, False


def render_prompt(descriptor, template: int = 0) -> str:
    """Render an edit description to prompt text.

    ``descriptor`` needs ``category``, ``part``, ``attribute`` and
    ``direction`` attributes.  ``template`` picks one of N_TEMPLATES
    phrasings; the extracted part never depends on it.
    """
    t = template % N_TEMPLATES
    phrase, plural = _part_phrase(descriptor.category, descriptor.part)
    if descriptor.direction == "remove":
        if t == 0:
            return f"no {phrase}"
        if t == 1:
            return f"the target has no {phrase}"
        return f"it has no {phrase}"
    comp = _COMPARATIVES[(descriptor.attribute, descriptor.direction)]
    article = "" if plural else "a "
    if t == 0:
        return f"the target has {article}{comp} {phrase}"
    if t == 1:
        verb = "are" if plural else "is"
        return f"the {phrase} {verb} {comp}"
    return f"it has {article}{comp} {phrase}"


def _as_words(prompt: str | Sequence[int] | np.ndarray) -> list[str]:
    if isinstance(prompt, str):
        return [w for w in (_clean(r) for r in prompt.lower().split()) if w]
    vocab = load_vocabulary()
    return [vocab.tokens[int(i)] for i in prompt if int(i) != NULL_ID]


def extract_part(prompt: str | Sequence[int] | np.ndarray, category: str) -> str:
    """Return the first part whose keyword list matches a prompt word.

    Parts are scanned in the documented order, so overlapping keywords
    resolve deterministically.  Returns ``"unknown"`` when nothing matches.
    """
    table = load_keywords()
    if category not in table:
        raise UnknownCategoryError(f"no keyword table for category {category!r}")
    words = _as_words(prompt)
    for part, keywords in table[category].items():
        for kw in keywords:
            if any(w == kw or w.startswith(kw) for w in words):
                return part
    return UNKNOWN


def extract_part_forced(prompt: str | Sequence[int] | np.ndarray, category: str) -> str:
    """Evaluation-mode extraction: unknown falls back to the first part."""
    part = extract_part(prompt, category)
    if part == UNKNOWN:
        part = next(iter(load_keywords()[category]))
    return part
