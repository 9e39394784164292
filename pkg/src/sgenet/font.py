"""Embedded 5×7 bitmap glyphs for the synthetic renderer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_GLYPHS = {
    "a": [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    "b": ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."],
    "c": [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."],
    "d": ["###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."],
    "e": ["#####", "#....", "#....", "####.", "#....", "#....", "#####"],
    "f": ["#####", "#....", "#....", "####.", "#....", "#....", "#...."],
    "g": [".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"],
    "h": ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    "i": [".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."],
    "j": ["..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."],
    "k": ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"],
    "l": ["#....", "#....", "#....", "#....", "#....", "#....", "#####"],
    "m": ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"],
    "n": ["#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"],
    "o": [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    "p": ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."],
    "q": [".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"],
    "r": ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"],
    "s": [".####", "#....", "#....", ".###.", "....#", "....#", "####."],
    "t": ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."],
    "u": ["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    "v": ["#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."],
    "w": ["#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."],
    "x": ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"],
    "y": ["#...#", "#...#", "#...#", ".#.#.", "..#..", "..#..", "..#.."],
    "z": ["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"],
    "0": [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    "1": ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    "2": [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    "3": ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    "4": ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    "5": ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    "6": ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    "7": ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    "8": [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    "9": [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
}

GLYPH_H, GLYPH_W = 7, 5


@dataclass(frozen=True)
class BitmapFont:
    """A scaled view of the 5×7 glyph table.

    ``bold`` thickens vertical strokes by one output pixel.
    """

    name: str
    scale: int = 2
    spacing: int = 2
    bold: bool = False

    @property
    def height(self):
        return GLYPH_H * self.scale

    @property
    def advance(self):
        return GLYPH_W * self.scale + self.spacing

    def glyph(self, ch: str) -> np.ndarray:
        rows = _GLYPHS[ch]
        base = np.array([[c == "#" for c in r] for r in rows], dtype=np.float32)
        g = np.kron(base, np.ones((self.scale, self.scale), dtype=np.float32))
        if self.bold:
            g[:, 1:] = np.maximum(g[:, 1:], g[:, :-1])
        return g

    def text_width(self, text: str) -> int:
        return len(text) * self.advance - self.spacing if text else 0

    def render_mask(self, text: str) -> np.ndarray:
        """Coverage mask (height × text_width) with 1 where ink is laid down."""
        mask = np.zeros((self.height, self.text_width(text)), dtype=np.float32)
        for i, ch in enumerate(text):
            x = i * self.advance
            mask[:, x : x + GLYPH_W * self.scale] = self.glyph(ch)
        return mask


DEFAULT_FONTS = (
    BitmapFont("regular"),
    BitmapFont("bold", bold=True),
)

SUPPORTED_CHARS = frozenset(_GLYPHS)
