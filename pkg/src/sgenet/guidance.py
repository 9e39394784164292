"""Semantic guidance branch: text-distribution self-attention and visual-semantic alignment."""
from __future__ import annotations

import torch
import torch.nn as nn

from .nn_core import AttentionBlock, ConfigError, ShapeError, sinusoidal_encoding


def flatten_grid(f):
    """B×C×H×W feature map -> B×(H·W)×C tokens, row-major over the grid."""
    b, c, h, w = f.shape
    return f.flatten(2).transpose(1, 2)


def unflatten_grid(tokens, h, w):
    b, n, c = tokens.shape
    if n != h * w:
        raise ShapeError(f"{n} tokens cannot fill a {h}×{w} grid")
    return tokens.transpose(1, 2).reshape(b, c, h, w)


class SemanticGeneration(nn.Module):
    """Embed the text distribution, add positions, then self-attention block(s) -> h_t."""

    def __init__(self, n_classes=37, d=64, heads=4, depth=1, max_len=64):
        super().__init__()
        self.embed = nn.Linear(n_classes, d)
        self.blocks = nn.ModuleList(AttentionBlock(d, heads) for _ in range(depth))
        self.register_buffer("pe", sinusoidal_encoding(max_len, d), persistent=False)
        self.last_attention = []

    def forward(self, dist):
        if dist.dim() != 3 or dist.shape[-1] != self.embed.in_features:
            raise ShapeError(
                f"text distribution must be B×L×{self.embed.in_features}, got {tuple(dist.shape)}"
            )
        h = self.embed(dist) + self.pe[: dist.shape[1]].to(dist.dtype)
        self.last_attention = []
        for block in self.blocks:
            h, w = block(h, h, h)
            self.last_attention.append(w)
        return h


class VisualSemanticAlignment(nn.Module):
    """Two cross-attention stages producing the guidance map h_g.

    Stage 1 lets each semantic token query the image tokens; stage 2 lets each
    image token query the semantic side, with the stage-1 output as keys and
    the original semantic features as values.
    """

    def __init__(self, d=64, heads=4, depth=1, max_tokens=4096):
        super().__init__()
        self.d = d
        self.text_to_image = nn.ModuleList(AttentionBlock(d, heads) for _ in range(depth))
        self.image_to_text = nn.ModuleList(AttentionBlock(d, heads) for _ in range(depth))
        self.register_buffer("pe", sinusoidal_encoding(max_tokens, d), persistent=False)
        self.last_attention = []

    def forward(self, h_t, f_s):
        if f_s.shape[1] != self.d:
            raise ConfigError(
                f"feature channels {f_s.shape[1]} must equal the semantic width {self.d}"
            )
        if h_t.dim() != 3 or h_t.shape[-1] != self.d or h_t.shape[0] != f_s.shape[0]:
            raise ShapeError(
                f"semantic features {tuple(h_t.shape)} incompatible with feature map {tuple(f_s.shape)}"
            )
        _, _, gh, gw = f_s.shape
        visual = flatten_grid(f_s) + self.pe[: gh * gw].to(f_s.dtype)
        self.last_attention = []

        h = h_t
        for block in self.text_to_image:
            h, w = block(h, visual, visual)
            self.last_attention.append(w)
        h_ca = h

        g = visual
        for block in self.image_to_text:
            g, w = block(g, h_ca, h_t)
            self.last_attention.append(w)
        if g.shape[1] != gh * gw:
            raise ShapeError("guidance token count differs from the feature grid")
        return unflatten_grid(g, gh, gw)
