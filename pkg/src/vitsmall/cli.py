"""Command-line entry point: ``vitsmall {pretrain,finetune,eval,attnmap,init-compare}``.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import ConfigError, RunConfig, load_config, load_dataset, save_config
from .data import load_raw, normalize
from .distill import pretrain
from .evaluation import (attention_maps, corruption_errors, init_compare, mce, save_attention, top1,
                         write_rows)
from .finetune import finetune, load_backbone, model_from_checkpoint
from .vit import ViT, ViTConfig

log = logging.getLogger("vitsmall")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vitsmall", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("pretrain", "finetune", "eval", "attnmap", "init-compare"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int, help="override the stage's epoch count")
        sp.add_argument("--out", help="output directory")
        if name in ("finetune", "eval", "attnmap"):
            sp.add_argument("--checkpoint", help="checkpoint to start from / evaluate")
    return p


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "checkpoint", None):
        cfg.checkpoint = args.checkpoint
    if args.epochs is not None:
        if args.epochs < 0:
            raise ConfigError("--epochs", "must be >= 0")
        try:
            if args.command in ("pretrain", "init-compare"):
                warm = min(cfg.distill.warmup_epochs, max(args.epochs - 1, 0))
                cfg.distill = replace(cfg.distill, epochs=args.epochs, warmup_epochs=warm)
            if args.command in ("finetune", "init-compare"):
                cfg.finetune = replace(cfg.finetune, epochs=args.epochs)
        except ValueError as exc:
            raise ConfigError("--epochs", str(exc)) from None
    return cfg


def _run(command: str, cfg: RunConfig) -> None:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.json", cfg)
    data = load_dataset(cfg.dataset)
    log.info("dataset=%s train=%d test=%d classes=%d", cfg.dataset.name, len(data.train), len(data.test),
             data.num_classes)

    if command == "pretrain":
        pretrain(data, cfg.vit, cfg.distill, cfg.views, cfg.seed, out_dir=out)
    elif command == "finetune":
        ckpt = load_checkpoint(cfg.checkpoint) if cfg.checkpoint else None
        ft = cfg.finetune
        if ckpt is None and ft.init_source.startswith("self-supervised"):
            raise ConfigError("checkpoint", f"init_source {ft.init_source!r} needs --checkpoint")
        _, hist = finetune(data, cfg.vit, ft, cfg.seed, ckpt=ckpt, out_dir=out)
        log.info("finetune done test_top1=%.4f", hist[-1]["test_top1"])
    elif command == "eval":
        path = cfg.checkpoint or cfg.eval.checkpoint
        if not path:
            raise ConfigError("checkpoint", "eval needs a fine-tuned checkpoint")
        model = model_from_checkpoint(load_checkpoint(path), cfg.vit)
        test_x = normalize(data.test.images.astype(np.float64), data.mean, data.std).astype(cfg.vit.np_dtype)
        acc = top1(model, test_x, data.test.labels, cfg.eval.batch_size)
        report = {"test_top1": acc, "test_error": 100 * (1 - acc)}
        if cfg.eval.corrupted:
            sets = []
            for c in cfg.eval.corrupted:
                ds = load_raw(c.path, c.name)
                x = normalize(ds.images.astype(np.float64), data.mean, data.std).astype(cfg.vit.np_dtype)
                sets.append((c.name, x, ds.labels))
            errors = corruption_errors(model, sets)
            report["corruption_errors"] = errors
            report["mce"] = mce(errors.values())
            write_rows(out / "corruption_errors.csv", [{"set": k, "error": v} for k, v in errors.items()])
        (out / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        log.info("eval %s", " ".join(f"{k}={v}" for k, v in report.items() if not isinstance(v, dict)))
    elif command == "attnmap":
        path = cfg.checkpoint or cfg.eval.checkpoint
        if not path:
            raise ConfigError("checkpoint", "attnmap needs a checkpoint")
        backbone = _backbone(load_checkpoint(path), cfg.vit)
        n = min(cfg.eval.attention_images, len(data.test))
        x = normalize(data.test.images[:n].astype(np.float64), data.mean, data.std).astype(cfg.vit.np_dtype)
        for i, amap in enumerate(attention_maps(backbone, x)):
            save_attention(out / "attention", f"test{i:04d}", amap)
        log.info("attnmap wrote %d maps to %s", n, out / "attention")
    elif command == "init-compare":
        init_compare(data, cfg.vit, cfg.finetune, cfg.compare.schemes, cfg.compare.seeds,
                     distill_cfg=cfg.distill, view_cfg=cfg.views, out_dir=out)


def _backbone(ckpt, vit_cfg: ViTConfig) -> ViT:
    if any(k.startswith("backbone.") for k in ckpt.tensors):
        return ViT(vit_cfg, params=ckpt.subset("backbone."))
    return load_backbone(ckpt, vit_cfg, "teacher")


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s %(message)s")
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _resolve(args)
        _run(args.command, cfg)
    except ConfigError as exc:
        log.error("config error at %s", exc)
        return 2
    except Exception as exc:
        log.exception("run failed: %s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
