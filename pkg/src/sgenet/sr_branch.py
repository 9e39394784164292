"""Super-resolution branch and the end-to-end two-branch model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn

from .guidance import SemanticGeneration, VisualSemanticAlignment
from .nn_core import (
    BidirectionalGRU,
    ChannelAttention,
    ConfigError,
    Conv2d,
    GridNorm,
    ShapeError,
    check_shape,
    pixel_shuffle,
)
from .recognizer import FrameRecognizer, build_recognizer


@dataclass(frozen=True)
class SrConfig:
    channels: int = 64  # C_f, also the guidance width D
    n_srb: int = 2
    scale: int = 2
    reduction: int = 4
    heads: int = 4
    semantic_depth: int = 1
    align_depth: int = 1
    frames: int = 16
    n_classes: int = 37
    lr_size: tuple[int, int] = (16, 64)
    recognizer_preset: str = "tiny"

    def __post_init__(self):
        if self.scale < 1 or self.n_srb < 1:
            raise ConfigError("scale and n_srb must be >= 1")
        if self.channels % 2 or self.channels % self.reduction:
            raise ConfigError(
                f"channels {self.channels} must be divisible by 2 and by reduction {self.reduction}"
            )
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by {self.heads} heads")

    @property
    def hr_size(self):
        return (self.lr_size[0] * self.scale, self.lr_size[1] * self.scale)


class ShallowExtractor(nn.Module):
    def __init__(self, channels=64):
        super().__init__()
        self.conv = Conv2d(3, channels, 9, padding=4)
        self.act = nn.PReLU()

    def forward(self, img):
        check_shape("shallow extractor input", img, (None, 3, None, None))
        return self.act(self.conv(img))


class GuidanceFusion(nn.Module):
    """f = f3 + f2 * CA(f1), with f1..f3 from parallel 1×1 convs over [f_s ; h_g]."""

    def __init__(self, channels=64, reduction=4):
        super().__init__()
        self.proj1 = Conv2d(2 * channels, channels, 1)
        self.proj2 = Conv2d(2 * channels, channels, 1)
        self.proj3 = Conv2d(2 * channels, channels, 1)
        self.ca = ChannelAttention(channels, reduction)

    def forward(self, f_s, h_g):
        if f_s.shape != h_g.shape:
            raise ShapeError(
                f"feature map {tuple(f_s.shape)} and guidance {tuple(h_g.shape)} must match"
            )
        x = torch.cat([f_s, h_g], dim=1)
        f1, f2, f3 = self.proj1(x), self.proj2(x), self.proj3(x)
        gate = self.ca(f1)
        return f3 + f2 * gate[:, :, None, None]


class SequentialRecurrentBlock(nn.Module):
    """conv-norm-PReLU-conv-norm, a width-wise bidirectional GRU, then a residual add."""

    def __init__(self, channels=64):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, padding=1)
        self.norm1 = GridNorm(channels)
        self.act = nn.PReLU()
        self.conv2 = Conv2d(channels, channels, 3, padding=1)
        self.norm2 = GridNorm(channels)
        self.rnn = BidirectionalGRU(channels, channels // 2)

    def forward(self, x):
        b, c, h, w = x.shape
        y = self.norm2(self.conv2(self.act(self.norm1(self.conv1(x)))))
        rows = y.permute(0, 2, 3, 1).reshape(b * h, w, c)
        y = self.rnn(rows).reshape(b, h, w, c).permute(0, 3, 1, 2)
        return x + y


class Upsampler(nn.Module):
    def __init__(self, channels=64, scale=2):
        super().__init__()
        self.scale = scale
        self.expand = Conv2d(channels, channels * scale * scale, 3, padding=1)
        self.to_rgb = Conv2d(channels, 3, 3, padding=1)

    def forward(self, f):
        return torch.sigmoid(self.to_rgb(pixel_shuffle(self.expand(f), self.scale)))


class SGENetOutput(NamedTuple):
    sr: torch.Tensor
    dist: torch.Tensor
    guidance: torch.Tensor


class SGENet(nn.Module):
    """Two-branch text SR model.

    The guidance recognizer is part of the module tree (its weights are saved
    with the model) but is frozen unless ``finetune_recognizer`` is set.
    """

    def __init__(self, cfg: SrConfig = SrConfig(), recognizer: FrameRecognizer | None = None,
                 finetune_recognizer=False):
        super().__init__()
        self.cfg = cfg
        self.shallow = ShallowExtractor(cfg.channels)
        self.recognizer = recognizer or build_recognizer("guidance", cfg.recognizer_preset, cfg.n_classes)
        if self.recognizer.frames != cfg.frames:
            raise ConfigError(f"recognizer emits {self.recognizer.frames} frames, config expects {cfg.frames}")
        self.semantic = SemanticGeneration(cfg.n_classes, cfg.channels, cfg.heads, cfg.semantic_depth)
        self.align = VisualSemanticAlignment(
            cfg.channels, cfg.heads, cfg.align_depth, max_tokens=cfg.lr_size[0] * cfg.lr_size[1]
        )
        self.fusion = GuidanceFusion(cfg.channels, cfg.reduction)
        self.srbs = nn.ModuleList(SequentialRecurrentBlock(cfg.channels) for _ in range(cfg.n_srb))
        self.upsample = Upsampler(cfg.channels, cfg.scale)
        self.set_finetune(finetune_recognizer)

    def set_finetune(self, enabled: bool):
        self.finetune_recognizer = enabled
        for p in self.recognizer.parameters():
            p.requires_grad_(enabled)

    def sr_parameters(self):
        """Parameters outside the guidance recognizer."""
        rec = {id(p) for p in self.recognizer.parameters()}
        return [p for p in self.parameters() if id(p) not in rec]

    def train(self, mode=True):
        super().train(mode)
        if not self.finetune_recognizer:
            self.recognizer.eval()
        return self

    def forward(self, img_lr):
        check_shape("LR input", img_lr, (None, 3, *self.cfg.lr_size))
        f_s = self.shallow(img_lr)
        if self.finetune_recognizer:
            dist = self.recognizer(img_lr)
        else:
            with torch.no_grad():
                dist = self.recognizer(img_lr)
        h_t = self.semantic(dist)
        h_g = self.align(h_t, f_s)
        f = self.fusion(f_s, h_g)
        for srb in self.srbs:
            f = srb(f)
        # long skip from the shallow features, as in the TSRN branch this one follows
        return SGENetOutput(self.upsample(f + f_s), dist, h_g)
