"""Synthetic LR/HR text pairs, on-disk corpus format, and image-quality metrics."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .alphabet import DEFAULT_ALPHABET, Alphabet
from .font import DEFAULT_FONTS, BitmapFont

log = logging.getLogger(__name__)

HR_SIZE = (32, 128)
LR_SIZE = (16, 64)
MAX_LABEL_LEN = 10


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class DegradeSpec:
    sigma: tuple[float, float] = (0.5, 2.0)
    noise_std: tuple[float, float] = (0.0, 0.03)
    brightness_jitter: float = 0.1
    factor: int = 2

    def describe(self) -> str:
        return (
            f"sigma={self.sigma[0]:g}..{self.sigma[1]:g} "
            f"noise={self.noise_std[0]:g}..{self.noise_std[1]:g} "
            f"brightness=±{self.brightness_jitter:g} factor={self.factor}"
        )


def _thirds(lo, hi):
    step = (hi - lo) / 3
    return [(lo + i * step, lo + (i + 1) * step) for i in range(3)]


_FULL = DegradeSpec()
SEVERITIES = ("easy", "medium", "hard")
SEVERITY_SPECS = {
    name: DegradeSpec(sigma=s, noise_std=n)
    for name, s, n in zip(SEVERITIES, _thirds(*_FULL.sigma), _thirds(*_FULL.noise_std))
}


@dataclass
class SamplePair:
    lr: np.ndarray  # 3×16×64, float32 in [0,1]
    hr: np.ndarray  # 3×32×128
    label: str
    severity: str = "mixed"


# ---------------------------------------------------------------- rendering


def _colors(rng):
    bg = rng.uniform(0.0, 1.0)
    contrast = rng.uniform(0.4, 0.9)
    options = [v for v in (bg + contrast, bg - contrast) if 0.0 <= v <= 1.0]
    if options:
        fg = options[int(rng.integers(len(options)))]
    else:
        fg = 1.0 if bg < 0.5 else 0.0
    tint_bg = rng.uniform(-0.08, 0.08, size=3)
    tint_fg = rng.uniform(-0.08, 0.08, size=3)
    return np.clip(bg + tint_bg, 0, 1), np.clip(fg + tint_fg, 0, 1)


def random_label(rng, alphabet: Alphabet = DEFAULT_ALPHABET, max_len=MAX_LABEL_LEN):
    chars = alphabet.characters
    n = int(rng.integers(1, max_len + 1))
    return "".join(chars[int(i)] for i in rng.integers(0, len(chars), size=n))


def render_text(text, font: BitmapFont, bg, fg, offset=(0, 0), size=HR_SIZE):
    """Draw ``text`` centered (plus ``offset``) on a flat background; returns 3×H×W."""
    h, w = size
    mask = font.render_mask(text)
    canvas = np.zeros((h, w), dtype=np.float32)
    if text:
        y0 = (h - mask.shape[0]) // 2 + offset[0]
        x0 = (w - mask.shape[1]) // 2 + offset[1]
        if y0 < 0 or x0 < 0 or y0 + mask.shape[0] > h or x0 + mask.shape[1] > w:
            raise ValueError(f"text {text!r} does not fit a {h}×{w} canvas")
        canvas[y0 : y0 + mask.shape[0], x0 : x0 + mask.shape[1]] = mask
    bg = np.asarray(bg, dtype=np.float32)[:, None, None]
    fg = np.asarray(fg, dtype=np.float32)[:, None, None]
    return (bg * (1 - canvas) + fg * canvas).astype(np.float32)


def render_sample(
    rng_seed: int,
    fonts=DEFAULT_FONTS,
    alphabet: Alphabet = DEFAULT_ALPHABET,
    severity: str = "mixed",
) -> SamplePair:
    if not fonts:
        raise ValueError("render_sample needs at least one font")
    rng = np.random.default_rng(rng_seed)
    label = random_label(rng, alphabet)
    font = fonts[int(rng.integers(len(fonts)))]
    bg, fg = _colors(rng)
    slack_y = (HR_SIZE[0] - font.height) // 2
    slack_x = (HR_SIZE[1] - font.text_width(label)) // 2
    dy = int(rng.integers(-min(3, slack_y), min(3, slack_y) + 1))
    dx = int(rng.integers(-min(4, slack_x), min(4, slack_x) + 1))
    hr = render_text(label, font, bg, fg, (dy, dx))
    if severity == "mixed":
        severity = SEVERITIES[int(rng.integers(3))]
    lr = degrade(hr, SEVERITY_SPECS[severity], rng)
    return SamplePair(lr=lr, hr=hr, label=label, severity=severity)


# ---------------------------------------------------------------- degradation


def gaussian_kernel(sigma):
    radius = max(1, int(math.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img, sigma):
    """Separable Gaussian blur with edge replication; img is C×H×W."""
    if sigma <= 0:
        return img.astype(np.float32)
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    x = img.astype(np.float64)
    padded = np.pad(x, ((0, 0), (0, 0), (r, r)), mode="edge")
    x = sum(k[i] * padded[:, :, i : i + x.shape[2]] for i in range(len(k)))
    padded = np.pad(x, ((0, 0), (r, r), (0, 0)), mode="edge")
    x = sum(k[i] * padded[:, i : i + x.shape[1], :] for i in range(len(k)))
    return x.astype(np.float32)


def area_downsample(img, factor=2):
    c, h, w = img.shape
    return img.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def degrade(hr, spec: DegradeSpec, rng) -> np.ndarray:
    """Blur, area-average downsample, brightness shift, additive noise, clamp."""
    if hr.shape[1:] != HR_SIZE:
        raise ValueError(f"degrade expects 3×{HR_SIZE[0]}×{HR_SIZE[1]}, got {hr.shape}")
    sigma = rng.uniform(*spec.sigma)
    noise = rng.uniform(*spec.noise_std)
    shift = rng.uniform(-spec.brightness_jitter, spec.brightness_jitter)
    x = area_downsample(gaussian_blur(hr, sigma), spec.factor) + shift
    if noise > 0:
        x = x + rng.normal(0.0, noise, size=x.shape)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------- corpus storage


@dataclass
class Corpus:
    lr: np.ndarray  # N×3×16×64
    hr: np.ndarray  # N×3×32×128
    labels: list[str]
    severities: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Corpus":
        idx = list(idx)
        sev = [self.severities[i] for i in idx] if self.severities else []
        return Corpus(self.lr[idx], self.hr[idx], [self.labels[i] for i in idx], sev, dict(self.meta))

    @classmethod
    def from_pairs(cls, pairs, meta=None):
        pairs = list(pairs)
        return cls(
            np.stack([p.lr for p in pairs]),
            np.stack([p.hr for p in pairs]),
            [p.label for p in pairs],
            [p.severity for p in pairs],
            dict(meta or {}),
        )


def generate_corpus(n, seed, severity="mixed") -> Corpus:
    if severity not in ("mixed",) + SEVERITIES:
        raise ValueError(f"unknown severity {severity!r}")
    pairs = [render_sample(seed + i, severity=severity) for i in range(n)]
    return Corpus.from_pairs(pairs, {"seed": str(seed), "count": str(n), "severity": severity})


_SEV_CODE = {"easy": "e", "medium": "m", "hard": "h"}
_SEV_NAME = {v: k for k, v in _SEV_CODE.items()}


def _to_png(img, path):
    arr = np.round(np.clip(img, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _from_png(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def write_dataset(directory, n=None, seed=0, severity="mixed", corpus: Corpus | None = None):
    """Generate (or take) a corpus and store it under ``directory``."""
    if corpus is None:
        if n is None:
            raise ValueError("write_dataset needs n or a corpus")
        corpus = generate_corpus(n, seed, severity)
    root = Path(directory)
    pairs = root / "pairs"
    pairs.mkdir(parents=True, exist_ok=True)
    for i in range(len(corpus)):
        _to_png(corpus.lr[i], pairs / f"{i:06d}_lr.png")
        _to_png(corpus.hr[i], pairs / f"{i:06d}_hr.png")
    with open(root / "labels.tsv", "w", encoding="utf-8", newline="\n") as f:
        for i, label in enumerate(corpus.labels):
            f.write(f"{i}\t{label}\n")
    meta = {
        "seed": corpus.meta.get("seed", str(seed)),
        "count": str(len(corpus)),
        "severity": corpus.meta.get("severity", severity),
        "spec": "; ".join(f"{k}: {SEVERITY_SPECS[k].describe()}" for k in SEVERITIES),
        "bins": "".join(_SEV_CODE.get(s, "?") for s in corpus.severities),
    }
    with open(root / "meta.txt", "w", encoding="utf-8", newline="\n") as f:
        for k, v in meta.items():
            f.write(f"{k} = {v}\n")
    return corpus


def _read_meta(path):
    meta = {}
    if path.exists():
        for line in path.read_text(encoding="utf-8").splitlines():
            if " = " in line:
                k, v = line.split(" = ", 1)
                meta[k.strip()] = v
    return meta


def load_dataset(directory) -> Corpus:
    root = Path(directory)
    labels_path = root / "labels.tsv"
    if not labels_path.exists():
        raise DatasetError(f"{root}: no labels.tsv")
    rows = {}
    for lineno, line in enumerate(labels_path.read_text(encoding="utf-8").split("\n"), 1):
        if not line:
            continue
        try:
            idx_s, label = line.split("\t")
            idx = int(idx_s)
        except ValueError:
            raise DatasetError(f"labels.tsv line {lineno}: malformed row {line!r}") from None
        if idx in rows:
            raise DatasetError(f"labels.tsv: duplicate index {idx}")
        rows[idx] = label
    n = len(rows)
    if n == 0:
        raise DatasetError(f"{root}: labels.tsv is empty")
    for i in range(n):
        if i not in rows:
            raise DatasetError(f"labels.tsv: missing index {i}")
    expected = {f"{i:06d}_{k}.png" for i in range(n) for k in ("lr", "hr")}
    present = set(os.listdir(root / "pairs")) if (root / "pairs").is_dir() else set()
    missing = sorted(expected - present)
    if missing:
        raise DatasetError(f"missing image for index {int(missing[0][:6])}: {missing[0]}")
    extra = sorted(present - expected)
    if extra:
        raise DatasetError(f"unexpected file in pairs/: {extra[0]}")
    meta = _read_meta(root / "meta.txt")
    if "count" in meta and int(meta["count"]) != n:
        raise DatasetError(f"meta.txt count {meta['count']} != {n} labels")
    lr = np.stack([_from_png(root / "pairs" / f"{i:06d}_lr.png") for i in range(n)])
    hr = np.stack([_from_png(root / "pairs" / f"{i:06d}_hr.png") for i in range(n)])
    if lr.shape[2:] != LR_SIZE or hr.shape[2:] != HR_SIZE:
        raise DatasetError(f"unexpected image geometry lr={lr.shape[2:]} hr={hr.shape[2:]}")
    bins = meta.get("bins", "")
    severities = [_SEV_NAME.get(c, "mixed") for c in bins] if len(bins) == n else []
    return Corpus(lr, hr, [rows[i] for i in range(n)], severities, meta)


# ---------------------------------------------------------------- metrics


def psnr(a, b, cap=100.0):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse < 1e-10:
        return cap
    return float(min(cap, 10.0 * math.log10(1.0 / mse)))


def ssim(a, b, window=8, k1=0.01, k2=0.03):
    """Mean SSIM over all 8×8 sliding windows of each channel (uniform weights)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    c1, c2 = k1**2, k2**2
    from numpy.lib.stride_tricks import sliding_window_view

    wa = sliding_window_view(a, (window, window), axis=(-2, -1))
    wb = sliding_window_view(b, (window, window), axis=(-2, -1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(s.mean())


def bicubic_baseline(lr, scale=2):
    """Bicubic ×scale upsampling clamped to [0,1]; accepts C×H×W or B×C×H×W."""
    is_np = isinstance(lr, np.ndarray)
    x = torch.as_tensor(lr)
    single = x.dim() == 3
    if single:
        x = x[None]
    y = F.interpolate(x, scale_factor=scale, mode="bicubic", align_corners=False).clamp(0, 1)
    if single:
        y = y[0]
    return y.numpy() if is_np else y
