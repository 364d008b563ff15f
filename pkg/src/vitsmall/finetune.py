"""Supervised fine-tuning from transferred (or freshly initialized) weights."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .data import Splits, normalize
from .evaluation import top1
from .metrics import MetricsWriter
from .optim import Adam, clip_grad_norm, warmup_cosine
from .rng import stream
from .tensor import DimensionError, ParameterError
from .vit import INIT_SCHEMES, LinearClassifier, ViT, ViTClassifier, ViTConfig, init_weights_shapes

log = logging.getLogger(__name__)

INIT_SOURCES = ("self-supervised-teacher", "self-supervised-student") + INIT_SCHEMES


@dataclass
class FinetuneConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 0.002
    min_lr: float = 1e-6
    warmup_epochs: int = 0
    weight_decay: float = 5e-2
    label_smoothing: float = 0.1
    mixup_alpha: float = 0.8
    cutmix_alpha: float = 1.0
    mix_prob: float = 0.5
    switch_prob: float = 0.5
    random_erase_p: float = 0.25
    pad_crop: int = 4
    hflip: bool = True
    dropout: float = 0.0
    clip_grad: float | None = None
    init_source: str = "self-supervised-teacher"
    eval_every: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.label_smoothing < 1:
            raise ParameterError("label_smoothing must lie in [0, 1)")
        if not (self.mixup_alpha > 0 and self.cutmix_alpha > 0):
            raise ParameterError("mixup/cutmix alpha must be > 0")
        for name in ("mix_prob", "switch_prob", "random_erase_p"):
            if not 0 <= getattr(self, name) <= 1:
                raise ParameterError(f"{name} must lie in [0, 1]")
        if self.init_source not in INIT_SOURCES:
            raise ParameterError(f"unknown init_source {self.init_source!r}; expected one of {INIT_SOURCES}")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ParameterError("epochs >= 0, batch_size >= 1 and lr > 0 required")

    @classmethod
    def plain(cls, **kw) -> "FinetuneConfig":
        """All augmentation and smoothing off: bare cross-entropy minimization."""
        base = dict(label_smoothing=0.0, mix_prob=0.0, random_erase_p=0.0, pad_crop=0, hflip=False)
        base.update(kw)
        return cls(**base)


# ---------------------------------------------------------------- targets & mixing

def one_hot(labels, k: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), k), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def label_smooth(y: np.ndarray, eps: float) -> np.ndarray:
    """(1 - eps) * y + eps / k."""
    if not 0 <= eps < 1:
        raise ParameterError(f"label smoothing eps must lie in [0, 1), got {eps}")
    k = y.shape[-1]
    return ((1 - eps) * y + eps / k).astype(y.dtype)


def mixup(x1, y1, x2, y2, alpha: float, rng: np.random.Generator, lam: float | None = None):
    """Convex blend of two samples (or batches) and their targets; lam ~ Beta(alpha, alpha)."""
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    x = (lam * x1 + (1 - lam) * x2).astype(x1.dtype)
    y = (lam * y1 + (1 - lam) * y2).astype(y1.dtype)
    return x, y


def cutmix_box(h: int, w: int, lam: float, rng: np.random.Generator):
    """Box of area ratio (1 - lam), uniformly centred, clipped to the image."""
    cut = math.sqrt(1.0 - lam)
    ch, cw = int(h * cut), int(w * cut)
    cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
    y0, y1 = np.clip(cy - ch // 2, 0, h), np.clip(cy + ch - ch // 2, 0, h)
    x0, x1 = np.clip(cx - cw // 2, 0, w), np.clip(cx + cw - cw // 2, 0, w)
    return int(y0), int(y1), int(x0), int(x1)


def cutmix(x1, y1, x2, y2, alpha: float, rng: np.random.Generator, lam: float | None = None, box=None):
    """Paste a box of ``x2`` into ``x1``; label weight is 1 - box area / image area.

    Images are (..., H, W, C). Returns (x, y, lam_effective).
    """
    h, w = x1.shape[-3], x1.shape[-2]
    if box is None:
        if lam is None:
            lam = float(rng.beta(alpha, alpha))
        box = cutmix_box(h, w, lam, rng)
    y0, y1_, x0, x1_ = box
    x = np.array(x1, copy=True)
    x[..., y0:y1_, x0:x1_, :] = x2[..., y0:y1_, x0:x1_, :]
    lam_eff = 1.0 - (y1_ - y0) * (x1_ - x0) / (h * w)
    y = (lam_eff * y1 + (1 - lam_eff) * y2).astype(y1.dtype)
    return x, y, lam_eff


def random_erase(x: np.ndarray, p: float, rng: np.random.Generator, scale=(0.02, 0.33),
                 ratio=(0.3, 3.3), attempts: int = 10, return_box: bool = False):
    """With probability ``p``, fill one box (area fraction in ``scale``) with N(0, 1) noise.

    ``x`` is a single (H, W, C) image in normalized space.
    """
    box = None
    out = x
    if p > 0 and rng.random() < p:
        h, w = x.shape[:2]
        area = h * w
        for _ in range(attempts):
            target = rng.uniform(*scale) * area
            ar = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
            eh = int(round(math.sqrt(target * ar)))
            ew = int(round(math.sqrt(target / ar)))
            if 0 < eh < h and 0 < ew < w and scale[0] <= eh * ew / area <= scale[1]:
                top = int(rng.integers(0, h - eh + 1))
                left = int(rng.integers(0, w - ew + 1))
                out = np.array(x, copy=True)
                out[top:top + eh, left:left + ew] = rng.standard_normal((eh, ew, x.shape[2]))
                box = (top, left, eh, ew)
                break
    return (out, box) if return_box else out


def pad_crop_flip(images: np.ndarray, rng: np.random.Generator, pad: int = 4, flip: bool = True) -> np.ndarray:
    """Zero-pad by ``pad``, random crop back to size, random horizontal flip."""
    b, h, w, c = images.shape
    out = images
    if pad:
        padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        ys = rng.integers(0, 2 * pad + 1, b)
        xs = rng.integers(0, 2 * pad + 1, b)
        out = np.stack([padded[i, ys[i]:ys[i] + h, xs[i]:xs[i] + w] for i in range(b)])
    if flip:
        mask = rng.random(b) < 0.5
        out = np.where(mask[:, None, None, None], out[:, :, ::-1], out)
    return out


def make_batch(images, labels, k: int, cfg: FinetuneConfig, rng: np.random.Generator, mean, std, dtype):
    """Augmented, normalized inputs and soft targets for one training batch."""
    x = pad_crop_flip(images, rng, cfg.pad_crop, cfg.hflip)
    x = normalize(x.astype(np.float64), mean, std)
    y = label_smooth(one_hot(labels, k, np.float64), cfg.label_smoothing)
    if cfg.mix_prob and rng.random() < cfg.mix_prob:
        x2, y2 = x[::-1], y[::-1]
        if rng.random() < cfg.switch_prob:
            x, y, _ = cutmix(x, y, x2, y2, cfg.cutmix_alpha, rng)
        else:
            x, y = mixup(x, y, x2, y2, cfg.mixup_alpha, rng)
    if cfg.random_erase_p:
        x = np.stack([random_erase(xi, cfg.random_erase_p, rng) for xi in x])
    return x.astype(dtype), y.astype(dtype)


# ---------------------------------------------------------------- model construction

def load_backbone(ckpt: Checkpoint, config: ViTConfig, source: str = "teacher") -> ViT:
    """Backbone tensors from a pre-training checkpoint (``teacher`` or ``student``)."""
    if source not in ("teacher", "student"):
        raise ParameterError(f"source must be 'teacher' or 'student', got {source!r}")
    params = ckpt.subset(f"{source}.")
    for name, shape in init_weights_shapes(config).items():
        if name not in params:
            raise KeyError(f"checkpoint has no tensor {source}.{name}")
        if tuple(params[name].shape) != shape:
            raise DimensionError(f"checkpoint tensor {source}.{name} has shape {params[name].shape}, "
                                 f"model expects {shape}")
    return ViT(config, params=params)


def build_model(config: ViTConfig, num_classes: int, cfg: FinetuneConfig, seed: int,
                ckpt: Checkpoint | None = None) -> ViTClassifier:
    src = cfg.init_source
    if src.startswith("self-supervised"):
        if ckpt is None:
            raise ParameterError(f"init_source {src!r} needs a pre-training checkpoint")
        backbone = load_backbone(ckpt, config, src.rsplit("-", 1)[1])
    else:
        backbone = ViT(config, scheme=src, rng=stream(seed, "init"))
    head = LinearClassifier(config.dim, num_classes, stream(seed, "classifier"), config.np_dtype)
    return ViTClassifier(backbone, head)


def model_checkpoint(model: ViTClassifier, meta: dict) -> Checkpoint:
    tensors = {f"backbone.{k}": v.data.copy() for k, v in model.backbone.params.items()}
    tensors.update({k: v.data.copy() for k, v in model.head.params.items()})
    return Checkpoint(tensors, meta)


def model_from_checkpoint(ckpt: Checkpoint, config: ViTConfig | None = None) -> ViTClassifier:
    """Rebuild a fine-tuned classifier from its checkpoint."""
    config = config or ViTConfig(**ckpt.metadata["vit"])
    backbone = ViT(config, params=ckpt.subset("backbone."))
    w = ckpt.tensors["classifier.weight"]
    head = LinearClassifier(config.dim, w.shape[1], stream(0, "unused"), config.np_dtype)
    head.params["classifier.weight"].data[...] = w
    head.params["classifier.bias"].data[...] = ckpt.tensors["classifier.bias"]
    return ViTClassifier(backbone, head)


# ---------------------------------------------------------------- training loop

def finetune(data: Splits, config: ViTConfig, cfg: FinetuneConfig, seed: int, ckpt: Checkpoint | None = None,
             out_dir=None, model: ViTClassifier | None = None):
    """Train with soft-target cross-entropy; returns (model, per-epoch metrics).

    The batch order and augmentation draws depend only on ``seed``, so runs
    that differ only in initialization see identical data.
    """
    k = data.num_classes
    train, test = data.train, data.test
    if tuple(train.image_size) != tuple(config.image_size):
        raise DimensionError(f"dataset images {train.image_size} vs model input {config.image_size}")
    if cfg.dropout:
        config = replace(config, dropout=cfg.dropout)
    if model is None:
        model = build_model(config, k, cfg, seed, ckpt)
    dt = config.np_dtype
    test_x = normalize(test.images.astype(np.float64), data.mean, data.std).astype(dt)
    n = len(train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = max(cfg.epochs * steps_per_epoch, 1)
    schedule = warmup_cosine(cfg.lr, total, min(cfg.warmup_epochs * steps_per_epoch, total - 1), final=cfg.min_lr)
    params = model.params
    opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay,
               no_decay=[k_ for k_, p in params.items() if p.ndim < 2 or k_.endswith(("cls_token", "pos_embed"))])
    out_dir = Path(out_dir) if out_dir is not None else None
    writer = MetricsWriter(out_dir / "finetune_metrics.csv",
                           ["epoch", "train_loss", "train_top1", "test_top1", "lr", "seconds"]) if out_dir else None
    meta = {"stage": "finetune", "seed": seed, "vit": config.to_dict(), "finetune": asdict(cfg),
            "num_classes": k}
    history = []
    best = -1.0
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.time()
        order = stream(seed, "order", epoch).permutation(n)
        aug = stream(seed, "augment", epoch)
        losses, correct = [], 0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x, y = make_batch(train.images[idx], train.labels[idx], k, cfg, aug, data.mean, data.std, dt)
            logits, _ = model.forward(x, train=True, rng=stream(seed, "dropout", epoch, b))
            loss = T.cross_entropy(logits, y)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"finetune loss is {loss.item()} at epoch {epoch} batch {b}")
            opt.zero_grad()
            T.backward(loss)
            if cfg.clip_grad:
                clip_grad_norm(params.values(), cfg.clip_grad)
            lr = schedule(min(step, total))
            opt.step(lr=max(lr, 1e-12))
            step += 1
            losses.append(loss.item())
            correct += int((np.argmax(logits.data, axis=1) == train.labels[idx]).sum())
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "train_top1": correct / n, "lr": lr,
               "test_top1": None}
        last = epoch == cfg.epochs - 1
        if last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0):
            row["test_top1"] = top1(model, test_x, test.labels)
        row["seconds"] = round(time.time() - t0, 3)
        history.append(row)
        log.info("finetune epoch=%d train_loss=%.4f train_top1=%.4f test_top1=%s lr=%.3g", epoch,
                 row["train_loss"], row["train_top1"], row["test_top1"], lr)
        if writer:
            writer.write(row)
        if out_dir and row["test_top1"] is not None and row["test_top1"] > best:
            best = row["test_top1"]
            save_checkpoint(out_dir / "finetune_best.svtc", model_checkpoint(model, {**meta, "epoch": epoch + 1}))
    if cfg.epochs == 0:
        history.append({"epoch": -1, "train_loss": None, "train_top1": None,
                        "test_top1": top1(model, test_x, test.labels), "lr": None, "seconds": 0.0})
    if out_dir:
        save_checkpoint(out_dir / "finetune_final.svtc", model_checkpoint(model, {**meta, "epoch": cfg.epochs}))
    return model, history
