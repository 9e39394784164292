"""Command-line entry points: gen-data, pretrain, train, eval, profile, infer."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import data as data_mod
from .checkpoint import CheckpointError
from .config import ConfigFileError, RunConfig
from .data import Corpus, DatasetError, bicubic_baseline, generate_corpus, load_dataset, psnr
from .losses import TrainingAbort
from .profiler import (
    compare,
    flops_reduction,
    format_comparison,
    load_recognizer_table,
    load_reference_table,
    profile_model,
    reference_row,
)
from .recognizer import DivergenceError, build_recognizer, pretrain
from .train import (
    Trainer,
    build_model,
    evaluate,
    format_eval,
    load_model,
    load_recognizer,
    save_recognizer,
    super_resolve,
)

log = logging.getLogger("sgenet")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise UsageError(f"cannot write to {out}: {e.strerror}") from None
    corpus = data_mod.write_dataset(out, args.n, args.seed, args.severity)
    print(f"wrote {len(corpus)} pairs to {out}")


def _split_heldout(corpus: Corpus, fraction=0.1):
    n_held = max(1, int(len(corpus) * fraction))
    idx = list(range(len(corpus)))
    return corpus.subset(idx[:-n_held]), corpus.subset(idx[-n_held:])


def cmd_pretrain(args):
    corpus = load_dataset(args.data)
    if args.heldout:
        train, held = corpus, load_dataset(args.heldout)
    else:
        train, held = _split_heldout(corpus)
    if args.extra:
        extra = generate_corpus(args.extra, seed=args.extra_seed)
        train = Corpus(
            np.concatenate([train.lr, extra.lr]),
            np.concatenate([train.hr, extra.hr]),
            train.labels + extra.labels,
            train.severities + extra.severities if train.severities else [],
        )
    torch.manual_seed(args.seed)
    model = build_recognizer(args.which, args.preset)
    report = pretrain(
        model, args.which, train, epochs=args.epochs, lr=args.lr, batch_size=args.batch,
        seed=args.seed, heldout=held, max_steps=args.max_steps or None,
    )
    meta = {"heldout_accuracy": report.heldout_accuracy}
    if report.heldout_position_accuracy is not None:
        meta["heldout_position_accuracy"] = report.heldout_position_accuracy
    save_recognizer(args.out, model, args.which, args.preset, meta)
    print(f"initial loss {report.initial_loss:.4f} final loss {report.final_loss:.4f}")
    print(f"train accuracy {100 * report.train_accuracy:.1f}%")
    print(f"held-out accuracy {100 * report.heldout_accuracy:.1f}% ({len(held)} samples)")
    if report.heldout_position_accuracy is not None:
        print(f"held-out per-position accuracy {100 * report.heldout_position_accuracy:.1f}%")


def _train_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {
        "data": args.data,
        "guidance_ckpt": args.guidance,
        "lossrec_ckpt": args.lossrec,
        "out": args.out,
        "log": args.log,
    }
    cfg = cfg.replace(**{k: v for k, v in overrides.items() if v})
    if args.steps:
        cfg = cfg.replace(max_steps=args.steps)
    for key in ("data", "lossrec_ckpt", "out"):
        if not getattr(cfg, key):
            raise UsageError(f"train needs {key} (flag or config)")
    return cfg


def cmd_train(args):
    cfg = _train_config(args)
    corpus = load_dataset(cfg.data)
    lossrec, kind = load_recognizer(cfg.lossrec_ckpt)
    if kind != "loss":
        raise UsageError(f"{cfg.lossrec_ckpt} holds a {kind} recognizer, expected loss")
    if args.resume:
        trainer = Trainer.resume(args.resume, corpus, lossrec, cfg.log or None)
        if args.steps:
            trainer.cfg = trainer.cfg.replace(max_steps=args.steps)
    else:
        guidance = None
        if cfg.guidance_ckpt:
            guidance, kind = load_recognizer(cfg.guidance_ckpt)
            if kind != "guidance":
                raise UsageError(f"{cfg.guidance_ckpt} holds a {kind} recognizer, expected guidance")
        trainer = Trainer(cfg, corpus, build_model(cfg, guidance), lossrec, log_path=cfg.log or None)
    history = trainer.run(cfg.out)
    if history:
        print(f"trained {trainer.step_count} steps; L_rc {history[0]['rc']:.5f} -> {history[-1]['rc']:.5f}")
    print(f"checkpoint written to {cfg.out}")


def cmd_eval(args):
    corpus = load_dataset(args.data)
    model, cfg = load_model(args.model)
    recognizer, _ = load_recognizer(args.recognizer)
    rows = evaluate(model, recognizer, corpus)
    print(format_eval(rows))


def _parse_ablation(spec):
    if "=" not in spec:
        raise UsageError(f"bad --ablate {spec!r}; expected srbs=2,4,6 or recognizer=tiny,large")
    key, values = spec.split("=", 1)
    values = [v for v in values.split(",") if v]
    if key == "srbs":
        try:
            return key, [int(v) for v in values]
        except ValueError:
            raise UsageError(f"srbs values must be integers: {values}") from None
    if key == "recognizer":
        bad = [v for v in values if v not in ("tiny", "large")]
        if bad:
            raise UsageError(f"unknown recognizer preset(s) {bad}")
        return key, values
    raise UsageError(f"unknown ablation key {key!r} (use srbs or recognizer)")


def cmd_profile(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    base = cfg.sr_config()
    fmt = args.format
    table = load_reference_table()
    out = []

    if args.ablate:
        key, values = _parse_ablation(args.ablate)
        from dataclasses import replace

        variants = [
            replace(base, n_srb=v) if key == "srbs" else replace(base, recognizer_preset=v) for v in values
        ]
        reports = [profile_model(v) for v in variants]
        if fmt == "tsv":
            out.append(f"{key}\tparams\tflops")
            out += [f"{v}\t{r.params}\t{r.flops}" for v, r in zip(values, reports)]
        else:
            out.append(f"# ablation over {key}")
            out.append(f"{key:<12} {'params':>12} {'FLOPs':>16}")
            out += [f"{str(v):<12} {r.params:>12,} {r.flops:>16,}" for v, r in zip(values, reports)]
            if key == "recognizer":
                b = reports[0]
                for v, r in zip(values[1:], reports[1:]):
                    out.append(
                        f"cost delta {values[0]} -> {v}: params {r.params - b.params:+,}, "
                        f"FLOPs {r.flops - b.flops:+,} (x{r.flops / b.flops:.2f})"
                    )
                rec = load_recognizer_table()
                out.append(
                    f"published guidance swap SVTR-T -> ABINet: {rec['SVTR-T']:.2f} G -> {rec['ABINet']:.2f} G "
                    f"(x{rec['ABINet'] / rec['SVTR-T']:.2f})"
                )
        print("\n".join(out))
        return

    report = profile_model(base)
    out.append(report.format(fmt))
    paper = reference_row(table, "SGENet")
    out.append("")
    out.append(format_comparison("SGENet (published)", compare(paper.params_m, paper.flops_g, table), fmt))
    lemma = reference_row(table, "LEMMA")
    if fmt != "tsv":
        out.append(
            f"FLOPs reduction vs LEMMA (published figures): "
            f"{100 * flops_reduction(paper.flops_g, lemma.flops_g):.2f}%"
        )
    out.append("")
    out.append(
        format_comparison(
            "this config (analytic)", compare(report.params / 1e6, report.flops / 1e9, table), fmt
        )
    )
    print("\n".join(out))


def _read_image(path):
    img = Image.open(path).convert("RGB")
    h, w = data_mod.LR_SIZE
    if img.size != (w, h):
        log.warning("resizing %s from %dx%d to %dx%d", path, img.size[0], img.size[1], w, h)
        img = img.resize((w, h), Image.BICUBIC)
    return (np.asarray(img, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def _write_image(arr, path):
    a = np.round(np.clip(arr, 0, 1).transpose(1, 2, 0) * 255).astype(np.uint8)
    Image.fromarray(a, mode="RGB").save(path)


def cmd_infer(args):
    model, _ = load_model(args.model)
    lr = _read_image(args.inp)
    sr = super_resolve(model, torch.from_numpy(lr)[None])[0].numpy()
    _write_image(sr, args.out)
    if args.strip:
        _write_image(np.concatenate([bicubic_baseline(lr), sr], axis=2), args.strip)
    print(f"wrote {args.out}")


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="sgenet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic LR/HR corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--severity", choices=["easy", "medium", "hard", "mixed"], default="mixed")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="train a toy recognizer")
    t.add_argument("--data", required=True)
    t.add_argument("--which", choices=["guidance", "loss", "eval"], required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--preset", choices=["tiny", "large"], default="tiny")
    t.add_argument("--heldout", help="held-out corpus (default: last 10%% of --data)")
    t.add_argument("--extra", type=int, default=0, help="extra freshly rendered training pairs")
    t.add_argument("--extra-seed", type=int, default=10_000_000)
    t.add_argument("--epochs", type=int, default=8)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--max-steps", type=int, default=0)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_pretrain)

    r = sub.add_parser("train", help="train the SR model")
    r.add_argument("--data")
    r.add_argument("--guidance")
    r.add_argument("--lossrec")
    r.add_argument("--config")
    r.add_argument("--out")
    r.add_argument("--log")
    r.add_argument("--steps", type=int, default=0, help="stop after this many steps")
    r.add_argument("--resume", help="continue from a training checkpoint")
    r.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="recognition accuracy and PSNR/SSIM of SR vs bicubic")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--recognizer", required=True)
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("profile", help="parameter / FLOPs report")
    f.add_argument("--config")
    f.add_argument("--ablate")
    f.add_argument("--format", choices=["text", "tsv"], default="text")
    f.set_defaults(func=cmd_profile)

    i = sub.add_parser("infer", help="super-resolve one image")
    i.add_argument("--model", required=True)
    i.add_argument("--in", dest="inp", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--strip", help="also write a bicubic | SR comparison strip")
    i.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    try:
        args.func(args)
    except UsageError as e:
        print(f"sgenet {args.command}: {e}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, ConfigFileError, TrainingAbort, DivergenceError,
            FileNotFoundError, ValueError) as e:
        print(f"sgenet {args.command}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
