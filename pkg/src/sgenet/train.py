"""SR training loop, checkpoint/resume, and evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .alphabet import Alphabet
from .checkpoint import CheckpointError, load_module, save_module
from .config import RunConfig
from .data import SEVERITIES, Corpus, bicubic_baseline, psnr, ssim
from .losses import (
    LossReport,
    TrainingAbort,
    content_loss,
    finetune_loss,
    inverse_frequency_weights,
    position_loss,
    reconstruction_loss,
    total_loss,
)
from .recognizer import (
    AttentionRecognizer,
    FrameRecognizer,
    build_recognizer,
    padded_targets,
    recognize,
    word_accuracy,
)
from .sr_branch import SGENet

log = logging.getLogger(__name__)


def alphabet_of(cfg: RunConfig) -> Alphabet:
    return Alphabet(tuple(cfg.alphabet), 0)


# ---------------------------------------------------------------- checkpoints


def save_recognizer(path, model, kind, preset="tiny", meta=None):
    save_module(path, model, "", dict(meta or {}, kind=kind, preset=preset))


def load_recognizer(path):
    _, _, meta = load_module_meta(path)
    kind = meta.get("kind")
    if kind not in ("guidance", "loss", "eval"):
        raise CheckpointError(f"{path}: not a recognizer checkpoint (kind={kind!r})")
    model = build_recognizer(kind, meta.get("preset", "tiny"))
    load_module(path, model)
    model.eval()
    return model, kind


def load_module_meta(path):
    from .checkpoint import load_archive

    return load_archive(path)


def build_model(cfg: RunConfig, guidance: FrameRecognizer | None = None) -> SGENet:
    torch.manual_seed(cfg.seed)
    return SGENet(cfg.sr_config(), recognizer=guidance, finetune_recognizer=cfg.finetune_recognizer)


def load_model(path):
    """Rebuild an SGENet (with its embedded guidance recognizer) from a checkpoint."""
    tensors, config_text, meta = load_module_meta(path)
    if meta.get("kind") != "sgenet":
        raise CheckpointError(f"{path}: not an SGENet checkpoint")
    cfg = RunConfig.loads(config_text)
    model = SGENet(cfg.sr_config(), finetune_recognizer=cfg.finetune_recognizer)
    load_module(path, model)
    model.eval()
    return model, cfg


# ---------------------------------------------------------------- trainer


@dataclass
class Trainer:
    cfg: RunConfig
    corpus: Corpus
    model: SGENet
    lossrec: AttentionRecognizer
    step_count: int = 0
    log_path: str | None = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.corpus) == 0:
            raise ValueError("training corpus is empty")
        self.alphabet = alphabet_of(self.cfg)
        self.lossrec.eval()
        for p in self.lossrec.parameters():
            p.requires_grad_(False)
        params = [p for p in self.model.parameters() if p.requires_grad]
        self.opt = torch.optim.Adam(
            params, lr=self.cfg.lr, betas=(self.cfg.beta1, self.cfg.beta2), eps=self.cfg.adam_eps
        )
        self.char_weights = (
            inverse_frequency_weights(self.corpus.labels, self.alphabet)
            if self.cfg.char_weights == "inverse_frequency"
            else None
        )
        self.lr_t = torch.from_numpy(self.corpus.lr)
        self.hr_t = torch.from_numpy(self.corpus.hr)

    @property
    def steps_per_epoch(self):
        return math.ceil(len(self.corpus) / self.cfg.batch_size)

    @property
    def total_steps(self):
        if self.cfg.max_steps:
            return self.cfg.max_steps
        return self.cfg.epochs * self.steps_per_epoch

    def batch_indices(self, step):
        """Indices for global ``step``; each epoch is a seeded permutation."""
        epoch, pos = divmod(step, self.steps_per_epoch)
        gen = torch.Generator().manual_seed(self.cfg.seed * 1_000_003 + epoch)
        perm = torch.randperm(len(self.corpus), generator=gen).tolist()
        return perm[pos * self.cfg.batch_size : (pos + 1) * self.cfg.batch_size]

    def compute_losses(self, idx) -> LossReport:
        lr, hr = self.lr_t[idx], self.hr_t[idx]
        labels = [self.corpus.labels[i] for i in idx]
        out = self.model(lr)
        p_sr, a_sr = self.lossrec(out.sr)
        with torch.no_grad():
            _, a_hr = self.lossrec(hr)
        tgt = padded_targets(labels, self.lossrec.t_dec, self.alphabet)
        l_rc = reconstruction_loss(out.sr, hr)
        l_pos = position_loss(a_hr, a_sr)
        l_con = content_loss(p_sr, tgt, self.char_weights, self.alphabet.blank_index)
        if self.model.finetune_recognizer:
            l_ft = finetune_loss(self.model.recognizer.log_probs(lr), labels, self.alphabet, log_space=True)
        else:
            with torch.no_grad():
                l_ft = finetune_loss(out.dist, labels, self.alphabet)
        return total_loss(l_rc, l_pos, l_con, l_ft, self.cfg.loss_weights(), self.model.finetune_recognizer)

    def step(self) -> LossReport:
        self.model.train()
        report = self.compute_losses(self.batch_indices(self.step_count))
        self.opt.zero_grad()
        report.total.backward()
        self.opt.step()
        self.step_count += 1
        self.history.append(report.floats())
        if self.log_path:
            with open(self.log_path, "a", encoding="utf-8", newline="\n") as f:
                f.write(report.tsv(self.step_count) + "\n")
        return report

    def run(self, ckpt_path=None):
        """Train to ``total_steps``; on a non-finite loss the last checkpoint is left intact."""
        while self.step_count < self.total_steps:
            try:
                report = self.step()
            except TrainingAbort:
                log.error("non-finite loss at step %d; last good checkpoint kept", self.step_count + 1)
                raise
            if self.step_count % 50 == 0:
                log.info("step %d/%d %s", self.step_count, self.total_steps, report.tsv(self.step_count))
            if ckpt_path and self.cfg.checkpoint_every and self.step_count % self.cfg.checkpoint_every == 0:
                self.save(ckpt_path)
        if ckpt_path:
            self.save(ckpt_path)
        return self.history

    # -- persistence

    def save(self, path):
        extra = {}
        params = self.opt.param_groups[0]["params"]
        for i, p in enumerate(params):
            st = self.opt.state.get(p)
            if st:
                extra[f"optim.{i}.exp_avg"] = st["exp_avg"]
                extra[f"optim.{i}.exp_avg_sq"] = st["exp_avg_sq"]
                extra[f"optim.{i}.step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(1)
        save_module(path, self.model, self.cfg.dumps(), {"kind": "sgenet", "step": self.step_count}, extra)

    @classmethod
    def resume(cls, path, corpus, lossrec, log_path=None):
        tensors, config_text, meta = load_module_meta(path)
        if meta.get("kind") != "sgenet":
            raise CheckpointError(f"{path}: not an SGENet checkpoint")
        cfg = RunConfig.loads(config_text)
        model = SGENet(cfg.sr_config(), finetune_recognizer=cfg.finetune_recognizer)
        load_module(path, model)
        trainer = cls(cfg, corpus, model, lossrec, int(meta["step"]), log_path)
        params = trainer.opt.param_groups[0]["params"]
        for i, p in enumerate(params):
            if f"optim.{i}.exp_avg" in tensors:
                trainer.opt.state[p] = {
                    "step": tensors[f"optim.{i}.step"].reshape(()).clone(),
                    "exp_avg": tensors[f"optim.{i}.exp_avg"].clone(),
                    "exp_avg_sq": tensors[f"optim.{i}.exp_avg_sq"].clone(),
                }
        return trainer


# ---------------------------------------------------------------- evaluation


def super_resolve(model: SGENet, lr, batch_size=64):
    model.eval()
    lr = torch.as_tensor(lr)
    out = []
    with torch.no_grad():
        for i in range(0, len(lr), batch_size):
            out.append(model(lr[i : i + batch_size]).sr)
    return torch.cat(out)


@dataclass
class EvalRow:
    name: str
    count: int
    acc_sr: float
    acc_bicubic: float
    acc_hr: float
    psnr_sr: float
    psnr_bicubic: float
    ssim_sr: float
    ssim_bicubic: float


def evaluate(model: SGENet, recognizer, corpus: Corpus, alphabet: Alphabet | None = None):
    """Per-severity and overall accuracy / PSNR / SSIM rows (overall row last)."""
    if len(corpus) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    alphabet = alphabet or alphabet_of(RunConfig())
    sr = super_resolve(model, corpus.lr).numpy()
    bic = bicubic_baseline(corpus.lr)
    hr = corpus.hr
    pred_sr = recognize(recognizer, sr, alphabet)
    pred_bic = recognize(recognizer, bic, alphabet)
    pred_hr = recognize(recognizer, hr, alphabet)

    def row(name, idx):
        gold = [corpus.labels[i] for i in idx]
        pick = lambda preds: [preds[i] for i in idx]
        return EvalRow(
            name,
            len(idx),
            word_accuracy(pick(pred_sr), gold),
            word_accuracy(pick(pred_bic), gold),
            word_accuracy(pick(pred_hr), gold),
            float(np.mean([psnr(sr[i], hr[i]) for i in idx])),
            float(np.mean([psnr(bic[i], hr[i]) for i in idx])),
            float(np.mean([ssim(sr[i], hr[i]) for i in idx])),
            float(np.mean([ssim(bic[i], hr[i]) for i in idx])),
        )

    rows = []
    if corpus.severities:
        for sev in SEVERITIES:
            idx = [i for i, s in enumerate(corpus.severities) if s == sev]
            if idx:
                rows.append(row(sev, idx))
    rows.append(row("average", list(range(len(corpus)))))
    return rows


def format_eval(rows) -> str:
    head = f"{'split':<8} {'n':>5} {'acc_SR':>7} {'acc_bic':>7} {'acc_HR':>7} {'psnr_SR':>8} {'psnr_bic':>8} {'ssim_SR':>7} {'ssim_bic':>8}"
    lines = [head]
    for r in rows:
        lines.append(
            f"{r.name:<8} {r.count:>5} {100 * r.acc_sr:>6.1f}% {100 * r.acc_bicubic:>6.1f}% "
            f"{100 * r.acc_hr:>6.1f}% {r.psnr_sr:>8.2f} {r.psnr_bicubic:>8.2f} {r.ssim_sr:>7.4f} {r.ssim_bicubic:>8.4f}"
        )
    return "\n".join(lines)
