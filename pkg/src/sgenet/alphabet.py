from __future__ import annotations

import string
from dataclasses import dataclass

BLANK = "-"


@dataclass(frozen=True)
class Alphabet:
    """Ordered symbol set; ``symbols[blank_index]`` is the CTC blank / pad symbol."""

    symbols: tuple[str, ...] = (BLANK,) + tuple(string.ascii_lowercase + string.digits)
    blank_index: int = 0

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("alphabet symbols must be unique")
        if not 0 <= self.blank_index < len(self.symbols):
            raise ValueError("blank_index out of range")

    def __len__(self):
        return len(self.symbols)

    @property
    def characters(self) -> tuple[str, ...]:
        """Non-blank symbols, in alphabet order."""
        return tuple(s for i, s in enumerate(self.symbols) if i != self.blank_index)

    def encode(self, text: str) -> list[int]:
        index = {s: i for i, s in enumerate(self.symbols)}
        try:
            ids = [index[c] for c in text]
        except KeyError as e:
            raise ValueError(f"symbol {e.args[0]!r} not in alphabet") from None
        if self.blank_index in ids:
            raise ValueError("labels may not contain the blank symbol")
        return ids

    def decode(self, ids) -> str:
        return "".join(self.symbols[i] for i in ids)


DEFAULT_ALPHABET = Alphabet()
