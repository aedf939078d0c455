from __future__ import annotations

from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

STOP = "<stop>"
OOV = "<unk>"
STOP_INDEX = 0
OOV_INDEX = 1


@dataclass(frozen=True)
class Vocabulary:
    """Token ↔ index map with STOP at 0 and OOV at 1."""

    tokens: tuple[str, ...]
    min_count: int = 1
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.tokens[:2] != (STOP, OOV):
            raise ValueError(f"vocabulary must start with {STOP!r} and {OOV!r}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", {token: i for i, token in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: object) -> bool:
        return token in self._index

    def index(self, token: str) -> int:
        return self._index.get(token, OOV_INDEX)

    def encode(self, caption: Sequence[str]) -> list[int]:
        """Map tokens to indices (unknown → OOV) and append STOP."""
        return [self.index(token) for token in caption] + [STOP_INDEX]

    def decode(self, indices: Iterable[int], *, strip_stop: bool = True) -> list[str]:
        words = []
        for i in indices:
            if strip_stop and i == STOP_INDEX:
                break
            if not 0 <= i < len(self.tokens):
                raise ValueError(f"token index {i} outside vocabulary of size {len(self.tokens)}")
            words.append(self.tokens[i])
        return words


def build_vocab(captions: Iterable[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Index every token seen at least ``min_count`` times.

    Ordering is by descending count, ties broken lexicographically.
    """
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counts = Counter(token for caption in captions for token in caption if token not in (STOP, OOV))
    kept = sorted((t for t, n in counts.items() if n >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(tokens=(STOP, OOV, *kept), min_count=min_count)
