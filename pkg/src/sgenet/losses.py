"""Training objective: reconstruction, recognition (position + content) and fine-tuning terms."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import torch

from .alphabet import DEFAULT_ALPHABET, Alphabet
from .nn_core import ShapeError
from .recognizer import ctc_loss


class TrainingAbort(RuntimeError):
    """Raised when a loss term is not finite."""


@dataclass(frozen=True)
class LossWeights:
    """Term weights. ``alpha1`` defaults low so the recognition terms do not
    drown the reconstruction signal (their magnitudes are far larger)."""

    lambda_pos: float = 1.0
    lambda_con: float = 1.0
    alpha1: float = 0.001
    alpha2: float = 1.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")


@dataclass
class LossReport:
    rc: torch.Tensor
    pos: torch.Tensor
    con: torch.Tensor
    re: torch.Tensor
    ft: torch.Tensor
    total: torch.Tensor

    def floats(self) -> dict:
        return {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in vars(self).items()}

    def tsv(self, step: int) -> str:
        f = self.floats()
        return "\t".join([str(step)] + [repr(f[k]) for k in ("rc", "pos", "con", "ft", "total")])


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def reconstruction_loss(sr, hr):
    _same_shape("reconstruction_loss", sr, hr)
    return ((sr - hr) ** 2).mean()


def position_loss(attn_hr, attn_sr):
    _same_shape("position_loss", attn_hr, attn_sr)
    return (attn_hr - attn_sr).abs().mean()


def content_loss(probs, targets, char_weights=None, pad_index=0):
    """Weighted per-position cross-entropy averaged over non-pad positions.

    probs: B×T×A distributions; targets: B×T ids padded with ``pad_index``.
    """
    if targets.shape != probs.shape[:2]:
        raise ShapeError(
            f"content_loss: targets {tuple(targets.shape)} do not match positions {tuple(probs.shape[:2])}"
        )
    nll = -torch.log(probs.gather(2, targets[..., None]).squeeze(-1).clamp(min=1e-12))
    if char_weights is not None:
        nll = nll * char_weights.to(probs.dtype)[targets]
    mask = targets != pad_index
    count = mask.sum()
    if count == 0:
        return nll.sum() * 0.0
    return (nll * mask).sum() / count


def finetune_loss(dist, labels, alphabet: Alphabet = DEFAULT_ALPHABET, log_space=False):
    """CTC negative log-likelihood of the labels under the guidance recognizer's frames."""
    return ctc_loss(dist, labels, alphabet, log_space=log_space)


def inverse_frequency_weights(labels, alphabet: Alphabet = DEFAULT_ALPHABET):
    """Per-class weights ∝ 1/frequency, scaled so seen classes average 1; unseen and pad get 1."""
    counts = Counter(c for label in labels for c in label)
    w = torch.ones(len(alphabet))
    if not counts:
        return w
    seen = {alphabet.symbols.index(c): 1.0 / n for c, n in counts.items()}
    mean = sum(seen.values()) / len(seen)
    for i, v in seen.items():
        w[i] = v / mean
    return w


def total_loss(rc, pos, con, ft, weights: LossWeights = LossWeights(), finetune=True) -> LossReport:
    """Combine the parts; ``alpha2`` only applies when the recognizer is being fine-tuned."""
    for name, v in (("L_rc", rc), ("L_pos", pos), ("L_con", con), ("L_ft", ft)):
        value = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(value):
            raise TrainingAbort(f"{name} is {value}")
    re = weights.lambda_pos * pos + weights.lambda_con * con
    alpha2 = weights.alpha2 if finetune else 0.0
    total = rc + weights.alpha1 * re + alpha2 * ft
    as_t = lambda v: v if torch.is_tensor(v) else torch.tensor(float(v), dtype=torch.float64)
    return LossReport(as_t(rc), as_t(pos), as_t(con), as_t(re), as_t(ft), as_t(total))
