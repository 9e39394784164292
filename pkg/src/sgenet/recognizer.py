"""Toy text recognizers and the CTC objective.

``FrameRecognizer`` is the frame-wise CTC recognizer used for guidance (at LR
geometry) and for evaluation (at HR geometry). ``AttentionRecognizer`` is the
position-query decoder whose middle-layer attention drives the position loss.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .alphabet import DEFAULT_ALPHABET, Alphabet
from .nn_core import AttentionBlock, BidirectionalGRU, Conv2d, GridNorm, ShapeError, position_encoding

log = logging.getLogger(__name__)


class AlignmentError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


# presets: conv widths, recurrent hidden size, extra conv per stage
RECOGNIZER_PRESETS = {
    "tiny": dict(widths=(32, 64, 96), hidden=64, deep=False),
    "large": dict(widths=(64, 128, 256), hidden=128, deep=True),
}


class FrameRecognizer(nn.Module):
    """Conv stack → 1×frames grid → bidirectional GRU → per-frame softmax.

    An optional ``stem`` average pool first brings HR-sized input down to
    the scale the conv stack was sized for. Two 2×2 max-pools then shrink the
    grid by 4 and adaptive averaging maps it onto ``frames`` columns, which is
    a plain height average when ``in_w == 4 * stem * frames``.
    """

    def __init__(self, in_h=16, in_w=64, frames=16, n_classes=37, widths=(32, 64, 96), hidden=64,
                 deep=False, stem=1):
        super().__init__()
        if in_h % (4 * stem) or in_w % (4 * stem):
            raise ShapeError(f"input {in_h}×{in_w} must be divisible by {4 * stem}")
        self.in_h, self.in_w, self.frames = in_h, in_w, frames
        self.n_classes = n_classes
        c1, c2, c3 = widths

        def block(c_in, c_out):
            return [Conv2d(c_in, c_out, 3, padding=1), GridNorm(c_out), nn.ReLU()]

        layers = [nn.AvgPool2d(stem)] if stem > 1 else []
        layers += block(3, c1) + (block(c1, c1) if deep else []) + [nn.MaxPool2d(2)]
        layers += block(c1, c2) + (block(c2, c2) if deep else []) + [nn.MaxPool2d(2)]
        layers += block(c2, c3)
        self.features = nn.Sequential(*layers)
        self.rnn = BidirectionalGRU(c3, hidden)
        self.head = nn.Linear(2 * hidden, n_classes)

    def logits(self, img):
        if img.dim() != 4 or tuple(img.shape[1:]) != (3, self.in_h, self.in_w):
            raise ShapeError(
                f"recognizer expects B×3×{self.in_h}×{self.in_w}, got {tuple(img.shape)}"
            )
        f = F.adaptive_avg_pool2d(self.features(img), (1, self.frames))[:, :, 0]  # B×C×frames
        return self.head(self.rnn(f.transpose(1, 2)))

    def log_probs(self, img):
        return torch.log_softmax(self.logits(img), dim=-1)

    def forward(self, img):
        """Text distribution: B×frames×|A|, rows on the simplex."""
        return torch.softmax(self.logits(img), dim=-1)


class AttentionRecognizer(nn.Module):
    """Conv encoder + BiGRU memory, decoded by learned position queries.

    ``forward`` returns ``(P, A)``: per-position distributions (B×T_dec×|A|)
    and the head-averaged attention of the first (middle) decoder block
    (B×T_dec×memory).

    Plain learned queries have nothing to tell "the 3rd character" apart from
    "the 4th" in the memory, so the keys carry an ordinal: an auxiliary CTC
    head on the memory gives each frame the expected number of characters
    started so far, and its sinusoidal encoding is added to the memory.
    Query k starts as the encoding of k + 1.
    """

    def __init__(self, in_h=32, in_w=128, t_dec=16, n_classes=37, d=64, heads=4, depth=2):
        super().__init__()
        self.in_h, self.in_w, self.t_dec = in_h, in_w, t_dec
        self.d = d
        self.encoder = nn.Sequential(
            nn.AvgPool2d(2),
            Conv2d(3, 32, 3, padding=1), GridNorm(32), nn.ReLU(), nn.MaxPool2d(2),
            Conv2d(32, 64, 3, padding=1), GridNorm(64), nn.ReLU(), nn.MaxPool2d(2),
            Conv2d(64, d, 3, padding=1), GridNorm(d), nn.ReLU(),
        )
        self.memory_rnn = BidirectionalGRU(d, d // 2)
        self.frame_head = nn.Linear(d, n_classes)
        self.queries = nn.Parameter(position_encoding(torch.arange(1.0, t_dec + 1), d))
        self.blocks = nn.ModuleList(AttentionBlock(d, heads) for _ in range(depth))
        self.head = nn.Linear(d, n_classes)

    @property
    def middle_layer(self):
        return (len(self.blocks) - 1) // 2

    def _encode(self, img):
        if img.dim() != 4 or tuple(img.shape[1:]) != (3, self.in_h, self.in_w):
            raise ShapeError(
                f"recognizer expects B×3×{self.in_h}×{self.in_w}, got {tuple(img.shape)}"
            )
        memory = self.memory_rnn(self.encoder(img).mean(dim=2).transpose(1, 2))  # B×W'×d
        return memory, self.frame_head(memory)

    def decode(self, memory, frame_logits):
        """Position logits and middle-block attention from an encoded memory."""
        ordinal = expected_ordinal(torch.softmax(frame_logits, dim=-1))
        keys = memory + position_encoding(ordinal, self.d)
        h = self.queries.to(memory.dtype).expand(memory.shape[0], -1, -1)
        attn = None
        for i, block in enumerate(self.blocks):
            h, w = block(h, keys, keys)
            if i == self.middle_layer:
                attn = w.mean(dim=1)
        return self.head(h), attn

    def logits_and_attention(self, img):
        return self.decode(*self._encode(img))

    def outputs(self, img):
        """(position logits, attention, frame log-probs) in one pass."""
        memory, frame_logits = self._encode(img)
        logits, attn = self.decode(memory, frame_logits)
        return logits, attn, torch.log_softmax(frame_logits, dim=-1)

    def forward(self, img):
        logits, attn = self.logits_and_attention(img)
        return torch.softmax(logits, dim=-1), attn


def expected_ordinal(frame_probs):
    """Expected count of characters started at or before each frame.

    A character starts at frame t when t emits a non-blank symbol and t-1
    does not. frame_probs: B×T×|A| with blank at index 0.
    """
    nb = frame_probs[..., 1:]
    prev = F.pad(nb[:, :-1], (0, 0, 1, 0))
    return (nb * (1 - prev)).sum(-1).cumsum(dim=1)


def build_recognizer(kind: str, preset: str = "tiny", n_classes: int = 37):
    """kind: 'guidance' (LR, 16 frames), 'eval' (HR, 16 frames) or 'loss' (attention decoder)."""
    if kind == "loss":
        return AttentionRecognizer(n_classes=n_classes)
    cfg = RECOGNIZER_PRESETS[preset]
    if kind == "guidance":
        return FrameRecognizer(16, 64, 16, n_classes, **cfg)
    if kind == "eval":
        return FrameRecognizer(32, 128, 16, n_classes, **cfg, stem=2)
    raise ValueError(f"unknown recognizer kind {kind!r}")


# ---------------------------------------------------------------- CTC


_LOG_ZERO = -1e30


def ctc_min_frames(ids) -> int:
    """Fewest frames that can emit ``ids``: one per symbol plus a blank per repeat."""
    return len(ids) + sum(1 for a, b in zip(ids, ids[1:]) if a == b)


def ctc_nll(log_probs, targets, blank=0):
    """Per-sample CTC negative log-likelihood via the log-space forward recursion.

    log_probs: B×T×A frame log-probabilities; targets: list of B id sequences.
    """
    b, t_len, _ = log_probs.shape
    if len(targets) != b:
        raise ShapeError(f"{len(targets)} labels for a batch of {b}")
    for ids in targets:
        if blank in ids:
            raise AlignmentError("labels may not contain the blank symbol")
        if ctc_min_frames(ids) > t_len:
            raise AlignmentError(
                f"label of length {len(ids)} needs {ctc_min_frames(ids)} frames, only {t_len} available"
            )
    s_max = 2 * max((len(ids) for ids in targets), default=0) + 1
    ext = torch.full((b, s_max), blank, dtype=torch.long)
    for i, ids in enumerate(targets):
        if ids:
            ext[i, 1 : 2 * len(ids) : 2] = torch.as_tensor(ids, dtype=torch.long)
    lengths = torch.tensor([2 * len(ids) + 1 for ids in targets])
    # skip transition s-2 -> s allowed for non-blank symbols that differ from s-2
    skip = torch.zeros(b, s_max, dtype=torch.bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    valid = torch.arange(s_max)[None, :] < lengths[:, None]

    # finite stand-in for log(0): all -inf inputs would give NaN gradients in logsumexp
    neg_inf = torch.tensor(_LOG_ZERO, dtype=log_probs.dtype)
    emit = log_probs.gather(2, ext[:, None, :].expand(b, t_len, s_max)).clamp(min=_LOG_ZERO)
    alpha = torch.full((b, s_max), _LOG_ZERO, dtype=log_probs.dtype)
    alpha[:, 0] = emit[:, 0, 0]
    if s_max > 1:
        alpha[:, 1] = torch.where(lengths > 1, emit[:, 0, 1], neg_inf)
    for t in range(1, t_len):
        stay = alpha
        step = F.pad(alpha[:, :-1], (1, 0), value=_LOG_ZERO)
        jump = F.pad(alpha[:, :-2], (2, 0), value=_LOG_ZERO)[:, :s_max]
        jump = torch.where(skip, jump, neg_inf)
        alpha = torch.logsumexp(torch.stack([stay, step, jump]), dim=0) + emit[:, t]
        alpha = torch.where(valid, alpha, neg_inf)
    last = (lengths - 1)[:, None]
    end = torch.cat([alpha.gather(1, last), alpha.gather(1, (last - 1).clamp(min=0))], dim=1)
    end[lengths == 1, 1] = _LOG_ZERO
    return -torch.logsumexp(end, dim=1)


def ctc_loss(dist, labels, alphabet: Alphabet = DEFAULT_ALPHABET, log_space=False):
    """Mean CTC negative log-likelihood of ``labels`` (strings or id lists).

    ``dist`` holds probabilities unless ``log_space`` is set.
    """
    if isinstance(labels, str):
        labels = [labels]
    targets = [alphabet.encode(x) if isinstance(x, str) else list(x) for x in labels]
    log_probs = dist if log_space else torch.log(dist)
    return ctc_nll(log_probs, targets, alphabet.blank_index).mean()


def greedy_decode(dist, alphabet: Alphabet = DEFAULT_ALPHABET):
    """Best-path CTC decode. Returns a string for T×A input, a list for B×T×A."""
    arr = dist.detach().cpu().numpy() if torch.is_tensor(dist) else np.asarray(dist)
    if arr.ndim == 2:
        return _collapse(arr.argmax(-1), alphabet)
    return [_collapse(row, alphabet) for row in arr.argmax(-1)]


def _collapse(path, alphabet):
    out, prev = [], None
    for k in path:
        k = int(k)
        if k != prev and k != alphabet.blank_index:
            out.append(alphabet.symbols[k])
        prev = k
    return "".join(out)


def decode_positions(probs, alphabet: Alphabet = DEFAULT_ALPHABET):
    """Per-position decode for the attention recognizer: argmax until the first pad."""
    arr = probs.detach().cpu().numpy() if torch.is_tensor(probs) else np.asarray(probs)
    out = []
    for row in arr.argmax(-1):
        chars = []
        for k in row:
            if k == alphabet.blank_index:
                break
            chars.append(alphabet.symbols[int(k)])
        out.append("".join(chars))
    return out


def padded_targets(labels, t_dec, alphabet: Alphabet = DEFAULT_ALPHABET):
    """B×t_dec id tensor, padded with the blank/end symbol."""
    out = torch.full((len(labels), t_dec), alphabet.blank_index, dtype=torch.long)
    for i, label in enumerate(labels):
        ids = alphabet.encode(label)
        if len(ids) > t_dec:
            raise ShapeError(f"label {label!r} longer than {t_dec} decoder positions")
        out[i, : len(ids)] = torch.as_tensor(ids, dtype=torch.long)
    return out


def recognize(model, images, alphabet: Alphabet = DEFAULT_ALPHABET, batch_size=256):
    """Decoded strings for a float tensor/array of images (frame or attention recognizer)."""
    images = torch.as_tensor(images)
    out = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = images[i : i + batch_size]
            if isinstance(model, AttentionRecognizer):
                out += decode_positions(model(x)[0], alphabet)
            else:
                out += greedy_decode(model(x), alphabet)
    return out


def word_accuracy(pred, gold) -> float:
    if not gold:
        raise ValueError("word_accuracy of an empty set")
    return sum(p == g for p, g in zip(pred, gold)) / len(gold)


def position_accuracy(model, images, labels, alphabet: Alphabet = DEFAULT_ALPHABET, batch_size=256):
    """Fraction of decoder positions (pads included) whose argmax matches the padded label."""
    images = torch.as_tensor(images)
    tgt = padded_targets(labels, model.t_dec, alphabet)
    hits = 0
    model.eval()
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            pred = model(images[i : i + batch_size])[0].argmax(-1)
            hits += (pred == tgt[i : i + batch_size]).sum().item()
    return hits / tgt.numel()


# ---------------------------------------------------------------- pretraining


@dataclass
class PretrainReport:
    initial_loss: float
    final_loss: float
    losses: list
    train_accuracy: float
    heldout_accuracy: float | None
    heldout_position_accuracy: float | None = None  # attention recognizer only


def recognizer_inputs(kind, corpus, clean_lr=True):
    """Training inputs for a recognizer kind.

    The guidance recognizer sees degraded LR crops plus clean area-downsampled
    HR crops; the HR-geometry recognizers see HR crops.
    """
    from .data import area_downsample

    if kind == "guidance":
        x = corpus.lr
        labels = list(corpus.labels)
        if clean_lr:
            clean = np.stack([area_downsample(h) for h in corpus.hr]).astype(np.float32)
            x = np.concatenate([x, clean])
            labels = labels + labels
        return torch.from_numpy(np.ascontiguousarray(x)), labels
    return torch.from_numpy(np.ascontiguousarray(corpus.hr)), list(corpus.labels)


def heldout_inputs(kind, corpus):
    """Evaluation inputs: clean renders at the recognizer's geometry."""
    from .data import area_downsample

    if kind == "guidance":
        return torch.from_numpy(np.stack([area_downsample(h) for h in corpus.hr]).astype(np.float32))
    return torch.from_numpy(np.ascontiguousarray(corpus.hr))


def recognizer_loss(model, x, labels, alphabet: Alphabet = DEFAULT_ALPHABET):
    if isinstance(model, AttentionRecognizer):
        # position cross-entropy plus the auxiliary CTC that trains the ordinal keys
        logits, _, frame_lp = model.outputs(x)
        tgt = padded_targets(labels, model.t_dec, alphabet)
        ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1))
        return ce + ctc_loss(frame_lp, labels, alphabet, log_space=True)
    return ctc_loss(model.log_probs(x), labels, alphabet, log_space=True)


def pretrain(
    model,
    kind,
    corpus,
    epochs=20,
    lr=1e-3,
    batch_size=32,
    seed=0,
    heldout=None,
    alphabet: Alphabet = DEFAULT_ALPHABET,
    max_steps=None,
    augment_noise=0.0,
):
    """Train a recognizer with Adam; CTC for frame recognizers, CE + auxiliary CTC for the attention one."""
    torch.manual_seed(seed)
    x_all, labels = recognizer_inputs(kind, corpus)
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    total = epochs * math.ceil(len(x_all) / batch_size)
    if max_steps is not None:
        total = min(total, max_steps)
    # cosine decay to 5% of the base rate
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda k: 0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * min(k, total) / max(total, 1)))
    )
    model.train()
    with torch.no_grad():
        initial = float(recognizer_loss(model, x_all[: min(256, len(x_all))], labels[:256], alphabet))
    losses, step = [], 0
    for epoch in range(epochs):
        order = torch.randperm(len(x_all), generator=gen).tolist()
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            x = x_all[idx]
            if augment_noise > 0:
                x = (x + augment_noise * torch.randn(x.shape, generator=gen)).clamp(0, 1)
            loss = recognizer_loss(model, x, [labels[j] for j in idx], alphabet)
            if not torch.isfinite(loss):
                raise DivergenceError(f"{kind} recognizer loss became {loss.item()} at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        log.info("pretrain %s epoch %d loss %.4f", kind, epoch, np.mean(losses[-50:]))
        if max_steps is not None and step >= max_steps:
            break
    model.eval()
    train_acc = word_accuracy(recognize(model, heldout_inputs(kind, corpus), alphabet), corpus.labels)
    held_acc = held_pos = None
    if heldout is not None:
        held_x = heldout_inputs(kind, heldout)
        held_acc = word_accuracy(recognize(model, held_x, alphabet), heldout.labels)
        if isinstance(model, AttentionRecognizer):
            held_pos = position_accuracy(model, held_x, heldout.labels, alphabet)
    with torch.no_grad():
        final = float(recognizer_loss(model, x_all[: min(256, len(x_all))], labels[:256], alphabet))
    return PretrainReport(initial, final, losses, train_acc, held_acc, held_pos)
