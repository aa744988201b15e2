from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

PAD, START, END = 0, 1, 2
SPECIALS = ("<pad>", "<start>", "<end>")

Caption = tuple[int, ...]


@dataclass(frozen=True)
class Vocabulary:
    words: tuple[str, ...]

    def __post_init__(self):
        if tuple(self.words[:3]) != SPECIALS:
            raise ValueError("vocabulary must start with <pad>, <start>, <end>")
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate vocabulary entries")

    @classmethod
    def build(cls, words: Iterable[str]) -> "Vocabulary":
        seen: list[str] = []
        for w in words:
            if w not in seen:
                seen.append(w)
        return cls(SPECIALS + tuple(seen))

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise KeyError(f"word not in vocabulary: {word!r}") from None

    @property
    def _index(self) -> dict[str, int]:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {w: i for i, w in enumerate(self.words)}
            object.__setattr__(self, "_idx", idx)
        return idx

    def word(self, i: int) -> str:
        return self.words[i]

    def encode(self, text: str) -> Caption:
        return (START, *(self.id(w) for w in text.lower().split()), END)

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.words[i] for i in ids if i not in (PAD, START, END))

    def is_special(self, i: int) -> bool:
        return i in (PAD, START, END)


def check_caption(ids: Sequence[int], vocab_size: int, max_len: int | None = None) -> None:
    """Raise ValueError unless ``ids`` is START ... END with in-range ids."""
    if len(ids) < 2 or ids[0] != START or ids[-1] != END:
        raise ValueError(f"caption must start with START and end with END: {tuple(ids)}")
    if START in ids[1:] or END in ids[:-1]:
        raise ValueError(f"START/END may only appear once: {tuple(ids)}")
    if any(not 0 <= i < vocab_size for i in ids):
        raise ValueError(f"caption id out of range for vocabulary of {vocab_size}")
    if max_len is not None and len(ids) > max_len:
        raise ValueError(f"caption longer than max_len={max_len}")
