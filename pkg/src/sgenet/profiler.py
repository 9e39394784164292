"""Analytic parameter / FLOPs accounting and comparison against published figures.

Conventions: one multiply-accumulate is 2 FLOPs; every elementwise operation
(add, compare, exp, divide, ...) is 1 FLOP per element; pixel shuffle and
concatenation are free. Normalization layers cost ``NORM_OPS`` per element.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import torch.nn as nn

from .nn_core import ConfigError, LayerSpec
from .recognizer import RECOGNIZER_PRESETS
from .sr_branch import SrConfig

# mean, center, square, variance sum, rsqrt scale, gain, offset
NORM_OPS = 7
# r/z gate add + sigmoid (4H), candidate r*hh + add + tanh (3H), blend (1-z)*n + z*h (4H)
GRU_ELEMENTWISE = 11
# exp, row sum, divide
SOFTMAX_OPS = 3


# ---------------------------------------------------------------- per-kind formulas


def count_params(spec) -> int:
    """Exact parameter count of a LayerSpec, or of an nn.Module."""
    if isinstance(spec, nn.Module):
        return sum(p.numel() for p in spec.parameters())
    hp, k = spec.hp, spec.kind
    if k == "conv2d":
        return hp["c_out"] * hp["c_in"] * hp["k"] ** 2 + (hp["c_out"] if hp.get("bias", True) else 0)
    if k == "linear":
        return hp["d_out"] * hp["d_in"] + (hp["d_out"] if hp.get("bias", True) else 0)
    if k == "layernorm":
        return 2 * hp["d"]
    if k == "gridnorm":
        return 2 * hp["c"]
    if k == "multi_head_attention":
        d = hp["d"]
        return 4 * (d * d + d)
    if k == "bidir_recurrent":
        i, h = hp["d_in"], hp["hidden"]
        return 2 * 3 * (h * i + h * h + 2 * h)
    if k == "pixel_shuffle":
        return 0
    if k == "channel_attention":
        c, m = hp["c"], hp["c"] // hp["r"]
        return (m * c + m) + (c * m + c)
    if k == "activation":
        return hp.get("params", 0)
    raise ConfigError(f"unknown layer kind {k!r}")


def count_flops(spec: LayerSpec, geom: dict) -> int:
    """FLOPs of one application of ``spec`` at geometry ``geom``.

    geom keys: conv2d h, w (input grid); linear tokens; layernorm tokens;
    gridnorm h, w; multi_head_attention t_q, t_k; bidir_recurrent
    sequences, steps; channel_attention h, w; activation elements.
    """
    hp, k = spec.hp, spec.kind
    if k == "conv2d":
        p, s = hp.get("padding", hp["k"] // 2), hp.get("stride", 1)
        h_out = (geom["h"] + 2 * p - hp["k"]) // s + 1
        w_out = (geom["w"] + 2 * p - hp["k"]) // s + 1
        out = hp["c_out"] * h_out * w_out
        return 2 * hp["k"] ** 2 * hp["c_in"] * out + (out if hp.get("bias", True) else 0)
    if k == "linear":
        return geom["tokens"] * (2 * hp["d_in"] * hp["d_out"] + (hp["d_out"] if hp.get("bias", True) else 0))
    if k == "layernorm":
        return NORM_OPS * geom["tokens"] * hp["d"]
    if k == "gridnorm":
        return NORM_OPS * hp["c"] * geom["h"] * geom["w"]
    if k == "multi_head_attention":
        d, heads, tq, tk = hp["d"], hp["heads"], geom["t_q"], geom["t_k"]
        proj = (2 * tq + 2 * tk) * (2 * d * d + d)
        scores = 2 * tq * tk * d + heads * tq * tk
        softmax = SOFTMAX_OPS * heads * tq * tk
        mix = 2 * tq * tk * d
        return proj + scores + softmax + mix
    if k == "bidir_recurrent":
        i, h = hp["d_in"], hp["hidden"]
        per_step = 6 * i * h + 3 * h + 6 * h * h + 3 * h + GRU_ELEMENTWISE * h
        return 2 * per_step * geom["steps"] * geom["sequences"]
    if k == "pixel_shuffle":
        return 0
    if k == "channel_attention":
        c, m = hp["c"], hp["c"] // hp["r"]
        pool = c * geom["h"] * geom["w"]
        return pool + (2 * c * m + m) + m + (2 * m * c + c) + c
    if k == "activation":
        return hp.get("ops", 1) * geom["elements"]
    raise ConfigError(f"unknown layer kind {k!r}")


# ---------------------------------------------------------------- reports


@dataclass
class CostRow:
    name: str
    kind: str
    params: int
    flops: int


@dataclass
class CostReport:
    title: str
    rows: list[CostRow] = field(default_factory=list)

    @property
    def params(self):
        return sum(r.params for r in self.rows)

    @property
    def flops(self):
        return sum(r.flops for r in self.rows)

    def section(self, prefix) -> "CostReport":
        return CostReport(f"{self.title}/{prefix}", [r for r in self.rows if r.name.startswith(prefix)])

    def add(self, name, spec: LayerSpec, geom: dict):
        self.rows.append(CostRow(name, spec.kind, count_params(spec), count_flops(spec, geom)))

    def format(self, fmt="text") -> str:
        if fmt == "tsv":
            lines = ["name\tkind\tparams\tflops"]
            lines += [f"{r.name}\t{r.kind}\t{r.params}\t{r.flops}" for r in self.rows]
            lines.append(f"TOTAL\t-\t{self.params}\t{self.flops}")
            return "\n".join(lines)
        width = max([len(r.name) for r in self.rows] + [5])
        lines = [
            f"# {self.title}",
            "# FLOPs: 1 MAC = 2 FLOPs; elementwise ops 1 FLOP per element",
            f"{'layer':<{width}}  {'kind':<20} {'params':>10} {'FLOPs':>14}",
        ]
        lines += [f"{r.name:<{width}}  {r.kind:<20} {r.params:>10,} {r.flops:>14,}" for r in self.rows]
        lines.append(
            f"{'TOTAL':<{width}}  {'':<20} {self.params:>10,} {self.flops:>14,}"
            f"   ({self.params / 1e6:.3f} M params, {self.flops / 1e9:.3f} G FLOPs)"
        )
        return "\n".join(lines)


def _conv(c_in, c_out, k, bias=True):
    return LayerSpec("conv2d", dict(c_in=c_in, c_out=c_out, k=k, stride=1, padding=k // 2, bias=bias))


def _linear(d_in, d_out):
    return LayerSpec("linear", dict(d_in=d_in, d_out=d_out, bias=True))


def _elementwise(ops=1, params=0):
    return LayerSpec("activation", dict(ops=ops, params=params))


def _attention_block(rep: CostReport, name, d, heads, tq, tk, mlp_hidden=None):
    mlp_hidden = mlp_hidden or 2 * d
    rep.add(f"{name}.attn", LayerSpec("multi_head_attention", dict(d=d, heads=heads)), dict(t_q=tq, t_k=tk))
    rep.add(f"{name}.residual1", _elementwise(), dict(elements=tq * d))
    rep.add(f"{name}.norm1", LayerSpec("layernorm", dict(d=d)), dict(tokens=tq))
    rep.add(f"{name}.fc1", _linear(d, mlp_hidden), dict(tokens=tq))
    rep.add(f"{name}.relu", _elementwise(), dict(elements=tq * mlp_hidden))
    rep.add(f"{name}.fc2", _linear(mlp_hidden, d), dict(tokens=tq))
    rep.add(f"{name}.residual2", _elementwise(), dict(elements=tq * d))
    rep.add(f"{name}.norm2", LayerSpec("layernorm", dict(d=d)), dict(tokens=tq))


def add_frame_recognizer(rep: CostReport, name, preset="tiny", in_h=16, in_w=64, frames=16, n_classes=37):
    if in_w != 4 * frames:
        raise ConfigError("recognizer accounting assumes in_w == 4 * frames")
    cfg = RECOGNIZER_PRESETS[preset]
    c1, c2, c3 = cfg["widths"]
    hidden = cfg["hidden"]
    h, w = in_h, in_w
    stages = [(3, c1), (c1, c2), (c2, c3)]
    for s, (c_in, c_out) in enumerate(stages):
        convs = [(c_in, c_out)] + ([(c_out, c_out)] if cfg["deep"] and s < 2 else [])
        for j, (a, b) in enumerate(convs):
            tag = f"{name}.stage{s}.{j}"
            rep.add(f"{tag}.conv", _conv(a, b, 3), dict(h=h, w=w))
            rep.add(f"{tag}.norm", LayerSpec("gridnorm", dict(c=b)), dict(h=h, w=w))
            rep.add(f"{tag}.relu", _elementwise(), dict(elements=b * h * w))
        if s < 2:
            h, w = h // 2, w // 2
            # three comparisons per 2×2 window
            rep.add(f"{name}.stage{s}.pool", _elementwise(ops=3), dict(elements=c_out * h * w))
    # height average: (h-1) adds + 1 divide per output
    rep.add(f"{name}.collapse", _elementwise(ops=h), dict(elements=c3 * w))
    rep.add(f"{name}.rnn", LayerSpec("bidir_recurrent", dict(d_in=c3, hidden=hidden)), dict(sequences=1, steps=frames))
    rep.add(f"{name}.head", _linear(2 * hidden, n_classes), dict(tokens=frames))
    rep.add(f"{name}.softmax", _elementwise(ops=SOFTMAX_OPS), dict(elements=frames * n_classes))


def profile_model(cfg: SrConfig = SrConfig(), include_recognizer=True) -> CostReport:
    """Layer-by-layer inventory of the two-branch model at its LR input geometry."""
    c, d, heads, L = cfg.channels, cfg.channels, cfg.heads, cfg.frames
    h, w = cfg.lr_size
    hw = h * w
    rep = CostReport(f"SGENet C={c} N={cfg.n_srb} s={cfg.scale} recognizer={cfg.recognizer_preset}")

    rep.add("shallow.conv", _conv(3, c, 9), dict(h=h, w=w))
    rep.add("shallow.prelu", _elementwise(ops=2, params=1), dict(elements=c * hw))

    if include_recognizer:
        add_frame_recognizer(rep, "recognizer", cfg.recognizer_preset, h, w, L, cfg.n_classes)

    rep.add("semantic.embed", _linear(cfg.n_classes, d), dict(tokens=L))
    rep.add("semantic.pos", _elementwise(), dict(elements=L * d))
    for i in range(cfg.semantic_depth):
        _attention_block(rep, f"semantic.block{i}", d, heads, L, L)

    rep.add("align.pos", _elementwise(), dict(elements=hw * d))
    for i in range(cfg.align_depth):
        _attention_block(rep, f"align.text_to_image{i}", d, heads, L, hw)
    for i in range(cfg.align_depth):
        _attention_block(rep, f"align.image_to_text{i}", d, heads, hw, L)

    for i in (1, 2, 3):
        rep.add(f"fusion.proj{i}", _conv(2 * c, c, 1), dict(h=h, w=w))
    rep.add("fusion.ca", LayerSpec("channel_attention", dict(c=c, r=cfg.reduction)), dict(h=h, w=w))
    rep.add("fusion.gate", _elementwise(ops=2), dict(elements=c * hw))

    for n in range(cfg.n_srb):
        tag = f"srb{n}"
        rep.add(f"{tag}.conv1", _conv(c, c, 3), dict(h=h, w=w))
        rep.add(f"{tag}.norm1", LayerSpec("gridnorm", dict(c=c)), dict(h=h, w=w))
        rep.add(f"{tag}.prelu", _elementwise(ops=2, params=1), dict(elements=c * hw))
        rep.add(f"{tag}.conv2", _conv(c, c, 3), dict(h=h, w=w))
        rep.add(f"{tag}.norm2", LayerSpec("gridnorm", dict(c=c)), dict(h=h, w=w))
        rep.add(
            f"{tag}.rnn",
            LayerSpec("bidir_recurrent", dict(d_in=c, hidden=c // 2)),
            dict(sequences=h, steps=w),
        )
        rep.add(f"{tag}.residual", _elementwise(), dict(elements=c * hw))

    s = cfg.scale
    rep.add("skip", _elementwise(), dict(elements=c * hw))
    rep.add("upsample.expand", _conv(c, c * s * s, 3), dict(h=h, w=w))
    rep.add("upsample.shuffle", LayerSpec("pixel_shuffle", dict(s=s)), {})
    rep.add("upsample.to_rgb", _conv(c, 3, 3), dict(h=h * s, w=w * s))
    rep.add("upsample.sigmoid", _elementwise(), dict(elements=3 * hw * s * s))
    return rep


# ---------------------------------------------------------------- published figures


@dataclass(frozen=True)
class RefRow:
    method: str
    params_m: float | None
    flops_g: float | None


def _read_tsv(name):
    text = resources.files("sgenet.resources").joinpath(name).read_text(encoding="utf-8")
    rows = [line.split("\t") for line in text.splitlines() if line]
    return rows[0], rows[1:]


def load_reference_table() -> list[RefRow]:
    _, rows = _read_tsv("paper_table1.tsv")
    num = lambda s: None if s == "-" else float(s)
    return [RefRow(m, num(p), num(f)) for m, p, f in rows]


def load_recognizer_table() -> dict[str, float]:
    _, rows = _read_tsv("paper_table3.tsv")
    return {name: float(f) for name, f in rows}


def flops_reduction(model_flops, ref_flops):
    return (ref_flops - model_flops) / ref_flops


@dataclass
class Comparison:
    method: str
    flops_reduction: float | None
    param_ratio: float | None
    flops_ratio: float | None


def compare(model_params_m, model_flops_g, table: list[RefRow]) -> list[Comparison]:
    out = []
    for r in table:
        if r.flops_g is None or r.params_m is None:
            out.append(Comparison(r.method, None, None, None))
            continue
        out.append(
            Comparison(
                r.method,
                flops_reduction(model_flops_g, r.flops_g),
                model_params_m / r.params_m,
                model_flops_g / r.flops_g,
            )
        )
    return out


def reference_row(table, method) -> RefRow:
    for r in table:
        if r.method == method:
            return r
    raise KeyError(f"no reference row named {method!r}")


def format_comparison(label, comps: list[Comparison], fmt="text") -> str:
    if fmt == "tsv":
        lines = ["model\tversus\tflops_reduction_pct\tparam_ratio\tflops_ratio"]
        for c in comps:
            if c.flops_reduction is None:
                lines.append(f"{label}\t{c.method}\t-\t-\t-")
            else:
                lines.append(
                    f"{label}\t{c.method}\t{100 * c.flops_reduction:.2f}\t{c.param_ratio:.4f}\t{c.flops_ratio:.4f}"
                )
        return "\n".join(lines)
    lines = [f"# {label} vs published Table 1 rows"]
    for c in comps:
        if c.flops_reduction is None:
            lines.append(f"  {c.method:<10} (no published cost)")
        else:
            lines.append(
                f"  {c.method:<10} FLOPs reduction {100 * c.flops_reduction:6.2f}%   "
                f"params x{c.param_ratio:.3f}   FLOPs x{c.flops_ratio:.3f}"
            )
    return "\n".join(lines)
