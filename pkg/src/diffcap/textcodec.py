"""Word-level vocabulary with reserved MASK and PAD ids."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MASK_TOKEN = "[MASK]"
PAD_TOKEN = "[PAD]"
L_MAX = 20


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(self.tokens) < 3 or self.tokens[-2:] != (MASK_TOKEN, PAD_TOKEN):
            raise CodecError("vocabulary must end with the reserved MASK and PAD tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise CodecError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", {tok: i for i, tok in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def n_text(self) -> int:
        """Number of ordinary word tokens (ids ``0 .. n_text - 1``)."""
        return len(self.tokens) - 2

    @property
    def mask_id(self) -> int:
        return len(self.tokens) - 2

    @property
    def pad_id(self) -> int:
        return len(self.tokens) - 1

    def id_of(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise CodecError(f"out-of-vocabulary word: {word!r}") from None

    def to_text(self) -> str:
        return "".join(tok + "\n" for tok in self.tokens)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(lines))


def build_vocab(corpus: Iterable[str]) -> Vocabulary:
    words: dict[str, None] = {}
    n = 0
    for caption in corpus:
        n += 1
        for w in caption.lower().split():
            words.setdefault(w, None)
    if n == 0:
        raise CodecError("cannot build a vocabulary from an empty corpus")
    return Vocabulary(tuple(words) + (MASK_TOKEN, PAD_TOKEN))


def encode(text: str, vocab: Vocabulary, l_max: int = L_MAX) -> tuple[np.ndarray, int]:
    """Token ids padded to ``l_max`` and the unpadded length."""
    words = [w if w in (MASK_TOKEN, PAD_TOKEN) else w.lower() for w in text.split()]
    if len(words) > l_max:
        raise CodecError(f"caption has {len(words)} words, limit is {l_max}")
    ids = np.full(l_max, vocab.pad_id, dtype=np.int64)
    ids[: len(words)] = [vocab.id_of(w) for w in words]
    return ids, len(words)


def decode(ids: Sequence[int], vocab: Vocabulary) -> str:
    words = []
    for i in ids:
        i = int(i)
        if not 0 <= i < vocab.size:
            raise CodecError(f"unknown token id {i}")
        if i == vocab.pad_id:
            continue
        words.append(vocab.tokens[i])
    return " ".join(words)


def strip_pad(ids: Sequence[int], vocab: Vocabulary) -> list[int]:
    return [int(i) for i in ids if int(i) != vocab.pad_id]
