"""Accuracy, corruption error, CLS attention maps and initialization comparison."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T

log = logging.getLogger(__name__)


def top1_from_logits(logits: np.ndarray, labels) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("top1 on an empty set")
    return float((np.argmax(logits, axis=1) == labels).mean())


def top1(model, images: np.ndarray, labels, batch_size: int = 256) -> float:
    """Top-1 accuracy of ``model`` in eval mode; ``images`` already normalized.

    ``model`` is anything with ``logits(images)`` or a plain callable
    returning logits.
    """
    if len(labels) == 0:
        raise ValueError("top1 on an empty set")
    fn = model.logits if hasattr(model, "logits") else model
    out = [np.asarray(fn(images[i:i + batch_size])) for i in range(0, len(images), batch_size)]
    return top1_from_logits(np.concatenate(out), labels)


def mce(errors: Sequence[float]) -> float:
    """Unweighted mean of per-corruption top-1 error percentages."""
    errors = list(errors)
    if not errors:
        raise ValueError("mCE needs at least one corrupted set")
    return float(sum(errors) / len(errors))


def corruption_errors(model, corrupted: Sequence[tuple[str, np.ndarray, np.ndarray]]) -> dict[str, float]:
    """Top-1 error percentage per named (images, labels) corrupted set."""
    if not corrupted:
        raise ValueError("no corrupted sets given")
    return {name: 100.0 * (1.0 - top1(model, x, y)) for name, x, y in corrupted}


# ---------------------------------------------------------------- attention maps

@dataclass
class AttentionMap:
    raw: np.ndarray        # (heads, n+1) CLS row of the last block, CLS->CLS included
    heads: np.ndarray      # (heads, gh, gw) patch attention renormalized without CLS->CLS
    mean: np.ndarray       # (gh, gw) head average of ``heads``
    overlay: np.ndarray    # (H, W) nearest-neighbour upsample of ``mean``


def cls_attention(attention_last: np.ndarray, grid: tuple[int, int], image_size: tuple[int, int]) -> AttentionMap:
    """Build the displayed map from one image's last-block attention (heads, n+1, n+1)."""
    raw = attention_last[:, 0, :]
    patches = raw[:, 1:]
    heads = patches / patches.sum(axis=1, keepdims=True)
    heads = heads.reshape(-1, *grid)
    avg = heads.mean(axis=0)
    ry, rx = image_size[0] // grid[0], image_size[1] // grid[1]
    overlay = np.repeat(np.repeat(avg, ry, axis=0), rx, axis=1)
    return AttentionMap(raw, heads, avg, overlay)


def attention_maps(backbone, images: np.ndarray) -> list[AttentionMap]:
    """Maps for a batch of (normalized) images."""
    cfg = backbone.config
    with T.no_grad():
        out = backbone.forward(images, want_attention=True)
    last = out.attention[-1]
    grid = (images.shape[1] // cfg.patch_size, images.shape[2] // cfg.patch_size)
    return [cls_attention(last[i], grid, images.shape[1:3]) for i in range(len(images))]


def attention_map(backbone, image: np.ndarray) -> AttentionMap:
    return attention_maps(backbone, image[None])[0]


def write_pgm(path, raster: np.ndarray) -> None:
    """Binary (P5) portable graymap, min-max scaled to 0..255."""
    r = np.asarray(raster, dtype=np.float64)
    lo, hi = r.min(), r.max()
    scaled = np.zeros_like(r) if hi <= lo else (r - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w)


def save_attention(out_dir, name: str, amap: AttentionMap) -> Path:
    """Write ``<name>.pgm`` (display overlay) and ``<name>.npz`` (raw rows + per-head grids)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_pgm(out_dir / f"{name}.pgm", amap.overlay)
    np.savez(out_dir / f"{name}.npz", raw=amap.raw, heads=amap.heads, mean=amap.mean)
    return out_dir / f"{name}.pgm"


def quadrant_mass(amap: AttentionMap, quadrant: int) -> float:
    """Share of the displayed (head-averaged) attention inside one grid quadrant."""
    gh, gw = amap.mean.shape
    r, c = divmod(int(quadrant), 2)
    block = amap.mean[r * gh // 2:(r + 1) * gh // 2, c * gw // 2:(c + 1) * gw // 2]
    return float(block.sum() / amap.mean.sum())


# ---------------------------------------------------------------- init comparison

SUPPORTED_SCHEMES = ("uniform", "xavier", "truncated-normal", "self-supervised")


def init_compare(data, vit_cfg, finetune_cfg, schemes: Sequence[str], seeds: Sequence[int],
                 distill_cfg=None, view_cfg=None, out_dir=None,
                 pretrain_fn: Callable | None = None) -> tuple[list[dict], list[dict]]:
    """Fine-tune once per (scheme, seed) under an identical budget and data order.

    Returns (runs, summary): one row per run and one row per scheme with the
    mean and range of final test top-1 over seeds.
    """
    from .distill import pretrain
    from .finetune import finetune

    for s in schemes:
        if s not in SUPPORTED_SCHEMES:
            raise ValueError(f"unknown init scheme {s!r}; supported: {SUPPORTED_SCHEMES}")
    if "self-supervised" in schemes and distill_cfg is None:
        raise ValueError("the self-supervised scheme needs a distill config for its pre-training phase")
    pretrain_fn = pretrain_fn or pretrain
    out_dir = Path(out_dir) if out_dir is not None else None
    runs = []
    for scheme in schemes:
        for seed in seeds:
            run_dir = out_dir / f"{scheme}_seed{seed}" if out_dir else None
            ckpt = None
            if scheme == "self-supervised":
                ckpt = pretrain_fn(data, vit_cfg, distill_cfg, view_cfg, seed, out_dir=run_dir)
                cfg = replace(finetune_cfg, init_source="self-supervised-teacher")
            else:
                cfg = replace(finetune_cfg, init_source=scheme)
            _, hist = finetune(data, vit_cfg, cfg, seed, ckpt=ckpt, out_dir=run_dir)
            runs.append({"scheme": scheme, "seed": seed, "test_top1": hist[-1]["test_top1"]})
            log.info("init-compare scheme=%s seed=%d test_top1=%.4f", scheme, seed, runs[-1]["test_top1"])
    summary = []
    for scheme in schemes:
        accs = np.array([r["test_top1"] for r in runs if r["scheme"] == scheme])
        summary.append({"scheme": scheme, "n": len(accs), "mean_top1": float(accs.mean()),
                        "min_top1": float(accs.min()), "max_top1": float(accs.max())})
    if out_dir:
        write_rows(out_dir / "init_compare_runs.csv", runs)
        write_rows(out_dir / "init_compare.csv", summary)
    return runs, summary


def write_rows(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)


ORDERING_ARMS = ("self-supervised-teacher", "self-supervised-student", "scratch", "scratch-long")


def transfer_ordering(data, vit_cfg, distill_cfg, finetune_cfg, view_cfg, seeds: Sequence[int],
                      scratch_scheme: str = "truncated-normal", long_epochs: int | None = None,
                      out_dir=None, keep_models: bool = False):
    """Pretrain + fine-tune against scratch baselines, per seed.

    Arms: fine-tune from the pretrained teacher and from the student, from
    ``scratch_scheme`` for the same fine-tuning epochs, and from scratch for
    ``long_epochs`` (default: pretrain + fine-tune epochs, budget matched).
    Returns (runs, summary, models); ``models`` maps (arm, seed) to the
    trained classifier when ``keep_models`` is set.
    """
    from .distill import pretrain
    from .finetune import finetune

    long_epochs = distill_cfg.epochs + finetune_cfg.epochs if long_epochs is None else long_epochs
    sources = {"self-supervised-teacher": (finetune_cfg.epochs, "self-supervised-teacher"),
               "self-supervised-student": (finetune_cfg.epochs, "self-supervised-student"),
               "scratch": (finetune_cfg.epochs, scratch_scheme),
               "scratch-long": (long_epochs, scratch_scheme)}
    out_dir = Path(out_dir) if out_dir is not None else None
    runs, models = [], {}
    for seed in seeds:
        sub = (lambda name: out_dir / f"seed{seed}" / name) if out_dir else (lambda name: None)
        ckpt = pretrain(data, vit_cfg, distill_cfg, view_cfg, seed, out_dir=sub("pretrain"))
        for arm in ORDERING_ARMS:
            epochs, source = sources[arm]
            cfg = replace(finetune_cfg, epochs=epochs, init_source=source)
            model, hist = finetune(data, vit_cfg, cfg, seed, ckpt=ckpt if arm.startswith("self") else None,
                                   out_dir=sub(arm))
            runs.append({"arm": arm, "seed": seed, "epochs": epochs, "test_top1": hist[-1]["test_top1"]})
            if keep_models:
                models[(arm, seed)] = model
            log.info("ordering arm=%s seed=%d test_top1=%.4f", arm, seed, runs[-1]["test_top1"])
    summary = []
    for arm in ORDERING_ARMS:
        accs = np.array([r["test_top1"] for r in runs if r["arm"] == arm])
        summary.append({"arm": arm, "n": len(accs), "mean_top1": float(accs.mean()),
                        "min_top1": float(accs.min()), "max_top1": float(accs.max())})
    if out_dir:
        write_rows(out_dir / "ordering_runs.csv", runs)
        write_rows(out_dir / "ordering.csv", summary)
    return runs, summary, models
