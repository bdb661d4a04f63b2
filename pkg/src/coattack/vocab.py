"""Fixed vocabulary and the lowercase whitespace tokenizer."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

UNK_TOKEN = "<unk>"

COLOR_WORDS = ("red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple")
COUNT_WORDS = ("zero", "one", "two", "three", "four")
SHAPE_WORDS = ("square", "circle", "triangle")
SHAPE_PLURALS = {"square": "squares", "circle": "circles", "triangle": "triangles"}

# Every answer a generated question can have, in label order.
ANSWER_WORDS = COLOR_WORDS + COUNT_WORDS + ("yes", "no")

DEFAULT_TOKENS = (
    (UNK_TOKEN,)
    + ("what", "color", "is", "the", "how", "many", "there", "a", "answer")
    + SHAPE_WORDS
    + tuple(SHAPE_PLURALS[s] for s in SHAPE_WORDS)
    + COLOR_WORDS
    + COUNT_WORDS
    + ("yes", "no")
)


class VocabularyError(ValueError):
    pass


class Vocabulary:
    """Token/id mapping; unknown words map to the <unk> id (0)."""

    def __init__(self, tokens: Sequence[str] = DEFAULT_TOKENS):
        tokens = tuple(tokens)
        if not tokens or tokens[0] != UNK_TOKEN:
            raise VocabularyError(f"vocabulary must start with {UNK_TOKEN!r}")
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def unk_id(self) -> int:
        return 0

    def encode(self, text: str) -> list[int]:
        return [self._ids.get(word, 0) for word in text.lower().split()]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)

    def id_of(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise VocabularyError(f"word {word!r} not in vocabulary") from None

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(line for line in lines if line))
