"""Layer substrate shared by the recognizers, the guidance branch and the SR branch.

Each op is a shape-checked layer over torch autograd; ``grad_check`` compares
those gradients against central finite differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


LAYER_KINDS = (
    "conv2d",
    "linear",
    "layernorm",
    "gridnorm",
    "multi_head_attention",
    "bidir_recurrent",
    "pixel_shuffle",
    "channel_attention",
    "activation",
)


@dataclass(frozen=True)
class LayerSpec:
    """A layer kind plus the hyperparameters that fix its parameter shapes.

    ``hp`` keys per kind:
      conv2d: c_in, c_out, k, stride, bias
      linear: d_in, d_out, bias
      layernorm: d
      gridnorm: c
      multi_head_attention: d, heads
      bidir_recurrent: d_in, hidden
      pixel_shuffle: s
      channel_attention: c, r
      activation: params (learned scalars, e.g. PReLU), ops (FLOPs per element)
    """

    kind: str
    hp: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")


def check_shape(name: str, x: torch.Tensor, expected: Sequence[int | None]):
    """Raise ShapeError unless ``x`` matches ``expected`` (None is a wildcard)."""
    shape = tuple(x.shape)
    ok = len(shape) == len(expected) and all(
        e is None or e == s for s, e in zip(shape, expected)
    )
    if not ok:
        want = tuple("*" if e is None else e for e in expected)
        raise ShapeError(f"{name}: expected shape {want}, got {shape}")


# ---------------------------------------------------------------- conv


def conv2d(x, weight, bias=None, stride=1, padding=0):
    if x.dim() != 4:
        raise ShapeError(f"conv2d: input must be B×C×H×W, got {tuple(x.shape)}")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv2d: input {tuple(x.shape)} has {x.shape[1]} channels but "
            f"kernel {tuple(weight.shape)} expects {weight.shape[1]}"
        )
    k_h, k_w = weight.shape[2:]
    h_out = (x.shape[2] + 2 * padding - k_h) / stride + 1
    w_out = (x.shape[3] + 2 * padding - k_w) / stride + 1
    if h_out < 1 or w_out < 1 or h_out != int(h_out) or w_out != int(w_out):
        raise ShapeError(
            f"conv2d: input {tuple(x.shape)} with kernel {tuple(weight.shape)}, "
            f"stride {stride}, padding {padding} gives non-integer output"
        )
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


class Conv2d(nn.Conv2d):
    """nn.Conv2d that rejects channel mismatches with a readable message."""

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride[0], self.padding[0])

    def spec(self) -> LayerSpec:
        return LayerSpec(
            "conv2d",
            dict(
                c_in=self.in_channels,
                c_out=self.out_channels,
                k=self.kernel_size[0],
                stride=self.stride[0],
                bias=self.bias is not None,
            ),
        )


# ---------------------------------------------------------------- norms


def layer_norm(x, gain, offset, eps=1e-5):
    d = x.shape[-1]
    if gain.shape != (d,) or offset.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {tuple(gain.shape)} / offset {tuple(offset.shape)} "
            f"must both be ({d},)"
        )
    return F.layer_norm(x, (d,), gain, offset, eps)


class LayerNorm(nn.LayerNorm):
    def __init__(self, d, eps=1e-5):
        super().__init__(d, eps=eps)

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


class GridNorm(nn.Module):
    """Per-sample, per-channel normalization over the spatial grid, then affine.

    Independent of batch composition, unlike batch norm.
    """

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mean = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
        y = (x - mean) / torch.sqrt(var + self.eps)
        return y * self.weight[:, None, None] + self.bias[:, None, None]


# ---------------------------------------------------------------- attention


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention over ``heads`` heads of width ``d // heads``.

    ``forward`` returns the projected output and the per-head attention
    weights (B×heads×T_q×T_k).
    """

    def __init__(self, d, heads):
        super().__init__()
        if d % heads:
            raise ConfigError(f"model dim {d} is not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)

    def _split(self, t):
        b, n, _ = t.shape
        return t.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, q, k, v):
        if q.dim() != 3 or k.dim() != 3 or v.dim() != 3:
            raise ShapeError("attention inputs must be B×T×D token tensors")
        for name, t in (("query", q), ("key", k), ("value", v)):
            if t.shape[-1] != self.d:
                raise ShapeError(f"{name} dim {t.shape[-1]} != model dim {self.d}")
        if k.shape[1] != v.shape[1]:
            raise ShapeError(
                f"key has {k.shape[1]} tokens but value has {v.shape[1]}"
            )
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        scores = qh @ kh.transpose(-2, -1) / math.sqrt(self.head_dim)
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ vh).transpose(1, 2).reshape(q.shape[0], q.shape[1], self.d)
        return self.out_proj(out), weights

    def spec(self) -> LayerSpec:
        return LayerSpec("multi_head_attention", dict(d=self.d, heads=self.heads))


class AttentionBlock(nn.Module):
    """Post-norm transformer block: ``LN(attn(q, k, v) + q)`` then ``LN(MLP(h) + h)``."""

    def __init__(self, d, heads, mlp_hidden=None, eps=1e-5):
        super().__init__()
        mlp_hidden = mlp_hidden or 2 * d
        self.attn = MultiHeadAttention(d, heads)
        self.norm1 = LayerNorm(d, eps)
        self.fc1 = nn.Linear(d, mlp_hidden)
        self.fc2 = nn.Linear(mlp_hidden, d)
        self.norm2 = LayerNorm(d, eps)

    def forward(self, q, k, v):
        a, weights = self.attn(q, k, v)
        h = self.norm1(a + q)
        h = self.norm2(self.fc2(F.relu(self.fc1(h))) + h)
        return h, weights


def sinusoidal_encoding(length, d, dtype=torch.float32):
    """Fixed sine/cosine position table of shape (length, d)."""
    return position_encoding(torch.arange(length, dtype=torch.float64), d).to(dtype)


def position_encoding(pos, d):
    """Sine/cosine encoding of real-valued positions: (...,) -> (..., d).

    Differentiable in ``pos``; integer positions reproduce the fixed table.
    """
    i = torch.arange(0, d, 2, dtype=pos.dtype, device=pos.device)
    angle = pos[..., None] / torch.pow(10000.0, i / d)
    pe = pos.new_zeros(*pos.shape, d)
    pe[..., 0::2] = torch.sin(angle)
    pe[..., 1::2] = torch.cos(angle[..., : d // 2])
    return pe


# ---------------------------------------------------------------- recurrence


class BidirectionalGRU(nn.Module):
    """Gated recurrent pass in both directions; output width is ``2 * hidden``."""

    def __init__(self, d_in, hidden):
        super().__init__()
        self.d_in = d_in
        self.hidden = hidden
        self.rnn = nn.GRU(d_in, hidden, batch_first=True, bidirectional=True)

    def forward(self, x):
        """x: (N, T, d_in) -> (N, T, 2 * hidden)."""
        if x.dim() != 3 or x.shape[-1] != self.d_in or x.shape[1] < 1:
            raise ShapeError(
                f"bidir_recurrent: expected (N, T>=1, {self.d_in}), got {tuple(x.shape)}"
            )
        out, _ = self.rnn(x)
        return out

    def spec(self) -> LayerSpec:
        return LayerSpec("bidir_recurrent", dict(d_in=self.d_in, hidden=self.hidden))


# ---------------------------------------------------------------- upsampling


def pixel_shuffle(x, s):
    if x.shape[1] % (s * s):
        raise ConfigError(f"{x.shape[1]} channels not divisible by s²={s * s}")
    return F.pixel_shuffle(x, s)


def pixel_unshuffle(x, s):
    if x.shape[2] % s or x.shape[3] % s:
        raise ConfigError(f"spatial dims {tuple(x.shape[2:])} not divisible by {s}")
    return F.pixel_unshuffle(x, s)


# ---------------------------------------------------------------- channel attention


class ChannelAttention(nn.Module):
    """Squeeze-excitation gate: pool → C/r bottleneck → ReLU → C → logistic."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        if channels % reduction:
            raise ConfigError(f"{channels} channels not divisible by reduction {reduction}")
        self.channels = channels
        self.reduction = reduction
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def forward(self, x):
        """x: B×C×H×W -> gate of shape B×C."""
        pooled = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(pooled))))

    def spec(self) -> LayerSpec:
        return LayerSpec("channel_attention", dict(c=self.channels, r=self.reduction))


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    checked: int
    passed: bool


class GradCheckError(AssertionError):
    pass


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_coords: int | None = None,
    generator: torch.Generator | None = None,
    raise_on_fail: bool = True,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``fn()`` against central differences.

    ``params`` maps names to leaf tensors (ideally float64) that ``fn`` reads.
    Relative error per coordinate is ``|a - n| / max(1, |a|, |n|)`` so that
    near-zero gradients are judged on absolute error. With ``max_coords``
    only a random subset of each tensor's coordinates is perturbed.
    """
    for p in params.values():
        p.requires_grad_(True)
        p.grad = None
    out = fn()
    if out.numel() != 1:
        raise ShapeError("grad_check needs a scalar function")
    grads = torch.autograd.grad(out, list(params.values()), allow_unused=True)

    worst_err, worst_name, checked = 0.0, "", 0
    with torch.no_grad():
        for (name, p), g in zip(params.items(), grads):
            if g is None:
                g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.reshape(-1)
            idx = range(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                idx = torch.randperm(flat.numel(), generator=generator)[:max_coords].tolist()
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                plus = fn().item()
                flat[i] = orig - step
                minus = fn().item()
                flat[i] = orig
                numeric = (plus - minus) / (2 * step)
                analytic = gflat[i].item()
                err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
                checked += 1
                if err > worst_err or not worst_name:
                    worst_err = err
                    worst_name = f"{name}[{i}]"
    report = GradCheckReport(worst_err, worst_name, checked, worst_err <= tolerance)
    if raise_on_fail and not report.passed:
        raise GradCheckError(
            f"gradient mismatch at {worst_name}: relative error {worst_err:.3e} > {tolerance:g}"
        )
    return report
