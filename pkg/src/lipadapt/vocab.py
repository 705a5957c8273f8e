"""Word-level vocabulary with fixed reserved tokens (BOS=0, EOS=1, PAD=2)."""

from __future__ import annotations

import re

from .config import BOS_ID, EOS_ID, NUM_RESERVED, PAD_ID

_PUNCT = re.compile(r"[^\w\s]")


def normalize_text(text: str) -> str:
    """Lowercase, strip punctuation and collapse whitespace."""
    return " ".join(_PUNCT.sub(" ", text.lower()).split())


class Vocabulary:
    def __init__(self, words: list[str]):
        if len(set(words)) != len(words):
            raise ValueError("duplicate words in vocabulary")
        self.words = list(words)
        self._index = {w: NUM_RESERVED + i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return NUM_RESERVED + len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    @property
    def size(self) -> int:
        return len(self)

    def word_id(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise KeyError(f"word not in vocabulary: {word!r}") from None

    def id_word(self, idx: int) -> str:
        if idx < NUM_RESERVED or idx >= len(self):
            raise KeyError(f"index {idx} is reserved or out of range")
        return self.words[idx - NUM_RESERVED]

    def encode(self, text: str | list[str]) -> list[int]:
        words = text.split() if isinstance(text, str) else list(text)
        return [self.word_id(w) for w in words]

    def decode(self, ids: list[int]) -> str:
        """Back to words, dropping reserved tokens."""
        return " ".join(self.words[i - NUM_RESERVED] for i in ids if i >= NUM_RESERVED)

    def target_tokens(self, text: str | list[str]) -> list[int]:
        """Teacher-forcing token sequence: BOS, words..., EOS."""
        return [BOS_ID, *self.encode(text), EOS_ID]

    def to_dict(self) -> dict:
        return {"words": self.words, "reserved": {"bos": BOS_ID, "eos": EOS_ID, "pad": PAD_ID}}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["words"])
