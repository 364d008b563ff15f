"""Self-supervised view prediction: EMA teacher / student self-distillation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .data import ImageDataset, Splits
from .metrics import MetricsWriter
from .optim import Adam, Schedule, clip_grad_norm, scaled_lr, warmup_cosine
from .rng import stream
from .tensor import DimensionError, ParameterError, Tensor
from .views import ViewConfig, generate_batch
from .vit import ViT, ViTConfig, truncated_normal

log = logging.getLogger(__name__)


@dataclass
class DistillConfig:
    epochs: int = 100
    batch_size: int = 256
    warmup_epochs: int = 10
    base_lr: float = 0.0005
    min_lr: float = 1e-6
    weight_decay: float = 0.04
    student_temp: float = 0.1
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    teacher_temp_warmup_epochs: int = 30
    momentum_start: float = 0.996
    momentum_end: float = 1.0
    out_dim: int = 1024
    hidden_dim: int = 1024
    bottleneck_dim: int = 256
    center_momentum: float = 0.9
    symmetric: bool = True
    clip_grad: float | None = None
    checkpoint_every: int = 0
    init_scheme: str = "truncated-normal"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("student_temp", "teacher_temp_start", "teacher_temp_end"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("epochs must be >= 0 and batch_size >= 1")
        if self.epochs > 0 and not 0 <= self.warmup_epochs < self.epochs:
            raise ParameterError(f"warmup_epochs {self.warmup_epochs} must be < epochs {self.epochs}")
        if not 0 <= self.center_momentum < 1:
            raise ParameterError("center_momentum must lie in [0, 1)")
        if not 0 <= self.momentum_start <= self.momentum_end <= 1:
            raise ParameterError("teacher momentum must satisfy 0 <= start <= end <= 1")

    @property
    def peak_lr(self) -> float:
        return scaled_lr(self.batch_size, self.base_lr)


class ProjectionHead:
    """Three linear layers with GELU, unit-norm bottleneck, then a map to K outputs.

    The last map uses unit-norm columns, so each output is a cosine
    similarity in [-1, 1] and the temperatures alone set the sharpness.
    """

    def __init__(self, in_dim: int, rng: np.random.Generator, hidden_dim: int = 1024,
                 bottleneck_dim: int = 256, out_dim: int = 1024, dtype=np.float32,
                 params: dict[str, np.ndarray] | None = None):
        shapes = {"fc1.weight": (in_dim, hidden_dim), "fc1.bias": (hidden_dim,),
                  "fc2.weight": (hidden_dim, hidden_dim), "fc2.bias": (hidden_dim,),
                  "fc3.weight": (hidden_dim, bottleneck_dim), "fc3.bias": (bottleneck_dim,),
                  "last.weight": (bottleneck_dim, out_dim)}
        if params is None:
            params = {k: (truncated_normal(rng, s) if k.endswith("weight") else np.zeros(s))
                      for k, s in shapes.items()}
        for k, s in shapes.items():
            if tuple(params[k].shape) != s:
                raise DimensionError(f"head tensor {k!r} has shape {params[k].shape}, expected {s}")
        self.params = {k: T.parameter(np.array(params[k], dtype=dtype), name=k) for k in shapes}

    def bottleneck(self, x: Tensor) -> Tensor:
        P = self.params
        x = T.gelu(T.linear(x, P["fc1.weight"], P["fc1.bias"]))
        x = T.gelu(T.linear(x, P["fc2.weight"], P["fc2.bias"]))
        x = T.linear(x, P["fc3.weight"], P["fc3.bias"])
        return T.l2_normalize(x, axis=-1)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(self.bottleneck(x), T.l2_normalize(self.params["last.weight"], axis=0))

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}


# ---------------------------------------------------------------- loss pieces

def teacher_distribution(logits, center, temp: float) -> np.ndarray:
    """softmax((logits - center) / temp); a constant target (no graph)."""
    if not temp > 0:
        raise ParameterError(f"teacher temperature must be > 0, got {temp}")
    z = (np.asarray(logits.data if isinstance(logits, Tensor) else logits) - center) / temp
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def student_log_distribution(logits: Tensor, temp: float) -> Tensor:
    return T.log_softmax(logits, axis=-1, temperature=temp)


def _stack(views) -> Tensor:
    if isinstance(views, Tensor):
        return views
    parts = [v if isinstance(v, Tensor) else Tensor(np.asarray(v)) for v in views]
    return T.concat([T.reshape(v, (1,) + v.shape) for v in parts], axis=0)


def pair_weights(teacher: np.ndarray, n_views: int, symmetric: bool = True) -> tuple[np.ndarray, int]:
    """Per-student-view target sums and the number of (teacher, student) pairs.

    Teacher view g pairs with every student view v != g; student views are
    ordered globals first, so view g of the student is teacher global g.
    """
    g = teacher.shape[0]
    teachers = range(g) if symmetric else range(1)
    w = np.zeros((n_views,) + teacher.shape[1:], dtype=teacher.dtype)
    pairs = 0
    for ti in teachers:
        for v in range(n_views):
            if v != ti:
                w[v] += teacher[ti]
                pairs += 1
    return w, pairs


def distill_loss(teacher_globals, student_globals, student_locals=None, symmetric: bool = True) -> Tensor:
    """Cross-entropy between teacher targets and student views.

    Student views are (n, B, K) tensors or sequences of (B, K) log-dists.
    Symmetric form averages the terms of all (teacher global g, student
    view v != g) pairs, 2 x 9 with the default counts. With
    ``symmetric=False`` only the first teacher global is used and its
    1 + n_local terms are summed.
    """
    t = np.stack([np.asarray(x) for x in teacher_globals])
    sg = _stack(student_globals)
    if sg.shape[0] != t.shape[0]:
        raise ValueError(f"{t.shape[0]} teacher globals but {sg.shape[0]} student globals")
    has_locals = student_locals is not None and (
        student_locals.shape[0] if isinstance(student_locals, Tensor) else len(student_locals))
    s = T.concat([sg, _stack(student_locals)], axis=0) if has_locals else sg
    if s.shape[1:] != t.shape[1:]:
        raise DimensionError(f"teacher {t.shape} and student {s.shape} view shapes differ")
    w, pairs = pair_weights(t.astype(s.dtype), s.shape[0], symmetric)
    batch = t.shape[1]
    denom = pairs * batch if symmetric else batch
    return T.scale(T.tsum(T.mul(Tensor(w), s)), -1.0 / denom)


def update_center(center: np.ndarray, teacher_logits, m: float = 0.9) -> np.ndarray:
    """EMA of the batch-mean teacher logit vector over all global views."""
    if not 0 <= m < 1:
        raise ParameterError(f"center momentum must lie in [0, 1), got {m}")
    x = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits)
    batch_mean = x.reshape(-1, x.shape[-1]).mean(axis=0)
    return (m * center + (1 - m) * batch_mean).astype(center.dtype)


def ema_update(teacher: dict, student: dict, lam: float) -> None:
    """In place: teacher <- lam * teacher + (1 - lam) * student, for every tensor."""
    if not 0 <= lam <= 1:
        raise ParameterError(f"EMA momentum must lie in [0, 1], got {lam}")
    if teacher.keys() != student.keys():
        raise DimensionError("teacher and student tensor names differ")
    for k, t in teacher.items():
        td = t.data if isinstance(t, Tensor) else t
        sd = student[k].data if isinstance(student[k], Tensor) else student[k]
        if td.shape != sd.shape:
            raise DimensionError(f"EMA shape mismatch on {k!r}: {td.shape} vs {sd.shape}")
        dt = td.dtype.type
        td *= dt(lam)
        td += dt(1.0 - lam) * sd


def entropy(p: np.ndarray) -> float:
    """Mean row entropy (nats)."""
    return float(-(p * np.log(np.clip(p, 1e-30, None))).sum(axis=-1).mean())


# ---------------------------------------------------------------- training state

class DistillState:
    """Student/teacher backbones and heads, center, optimizer and schedules."""

    def __init__(self, vit_cfg: ViTConfig, cfg: DistillConfig, seed: int, steps_per_epoch: int):
        self.vit_cfg, self.cfg, self.seed = vit_cfg, cfg, seed
        init = stream(seed, "init")
        dt = vit_cfg.np_dtype
        self.student = ViT(vit_cfg, scheme=cfg.init_scheme, rng=init)
        self.student_head = ProjectionHead(vit_cfg.dim, init, cfg.hidden_dim, cfg.bottleneck_dim,
                                           cfg.out_dim, dtype=dt)
        self.teacher = ViT(vit_cfg, params=self.student.state())
        self.teacher_head = ProjectionHead(vit_cfg.dim, init, cfg.hidden_dim, cfg.bottleneck_dim,
                                           cfg.out_dim, dtype=dt, params=self.student_head.state())
        for p in list(self.teacher.params.values()) + list(self.teacher_head.params.values()):
            p.requires_grad = False
        self.center = np.zeros(cfg.out_dim, dtype=dt)
        self.step = 0
        self.epoch = 0
        self.steps_per_epoch = steps_per_epoch
        total = max(cfg.epochs * steps_per_epoch, 1)
        self.lr_schedule = warmup_cosine(cfg.peak_lr, total, min(cfg.warmup_epochs * steps_per_epoch, total - 1),
                                         start=0.0, final=cfg.min_lr)
        self.momentum_schedule = Schedule("cosine", peak=cfg.momentum_start, final=cfg.momentum_end,
                                          total_steps=total)
        self.teacher_temp_schedule = teacher_temp_schedule(cfg)
        params = self.student_params()
        self.optimizer = Adam(params, lr=cfg.peak_lr, weight_decay=cfg.weight_decay,
                              no_decay=[k for k, p in params.items() if p.ndim < 2 or k.endswith(("cls_token", "pos_embed"))])

    def student_params(self) -> dict[str, Tensor]:
        return {**{f"backbone.{k}": v for k, v in self.student.params.items()},
                **{f"head.{k}": v for k, v in self.student_head.params.items()}}

    def teacher_params(self) -> dict[str, Tensor]:
        return {**{f"backbone.{k}": v for k, v in self.teacher.params.items()},
                **{f"head.{k}": v for k, v in self.teacher_head.params.items()}}

    def checkpoint(self, view_cfg: ViewConfig | None = None) -> Checkpoint:
        tensors = {}
        for prefix, model in (("teacher.", self.teacher), ("student.", self.student)):
            tensors.update({prefix + k: v.data.copy() for k, v in model.params.items()})
        for prefix, head in (("teacher_head.", self.teacher_head), ("student_head.", self.student_head)):
            tensors.update({prefix + k: v.data.copy() for k, v in head.params.items()})
        tensors["center"] = self.center.copy()
        meta = {"stage": "pretrain", "epoch": self.epoch, "step": self.step, "seed": self.seed,
                "vit": self.vit_cfg.to_dict(), "distill": asdict(self.cfg)}
        if view_cfg is not None:
            meta["views"] = view_cfg.to_dict()
        return Checkpoint(tensors, meta)


def teacher_temp_schedule(cfg: DistillConfig) -> Schedule:
    """Per-epoch linear warmup 0.04 -> 0.07, constant afterwards."""
    warm = cfg.teacher_temp_warmup_epochs if cfg.epochs == 0 else min(cfg.teacher_temp_warmup_epochs, cfg.epochs)
    total = max(cfg.epochs, warm, 1)
    return Schedule("linear-warmup", start=cfg.teacher_temp_start, peak=cfg.teacher_temp_end,
                    warmup_steps=warm, total_steps=total)


def teacher_targets(state: DistillState, global_views: np.ndarray, temp: float) -> tuple[np.ndarray, np.ndarray]:
    """Teacher logits and centred/sharpened targets for the global views only.

    ``global_views`` is (n_global, B, g, g, 3) at the configured global size.
    """
    g = state.vit_cfg.image_size
    if global_views.ndim != 5 or tuple(global_views.shape[2:4]) != tuple(g):
        raise DimensionError(f"teacher only processes global views of size {g}, got {global_views.shape}")
    n, b = global_views.shape[:2]
    with T.no_grad():
        feats = state.teacher.forward(global_views.reshape((n * b,) + global_views.shape[2:])).cls
        logits = state.teacher_head(feats).data.reshape(n, b, -1)
    return logits, teacher_distribution(logits, state.center, temp)


def student_logits(state: DistillState, global_views: np.ndarray, local_views: np.ndarray) -> Tensor:
    """(n_global + n_local, B, K) student logits; globals first."""
    outs = []
    for views in (global_views, local_views):
        if views.size == 0:
            continue
        n, b = views.shape[:2]
        feats = state.student.forward(views.reshape((n * b,) + views.shape[2:])).cls
        outs.append(T.reshape(state.student_head(feats), (n, b, -1)))
    return outs[0] if len(outs) == 1 else T.concat(outs, axis=0)


def train_step(state: DistillState, global_views: np.ndarray, local_views: np.ndarray) -> dict:
    """One optimization step: student update, EMA, then centre update."""
    cfg = state.cfg
    temp_t = state.teacher_temp_schedule(min(state.epoch, state.teacher_temp_schedule.total_steps))
    t_logits, t_probs = teacher_targets(state, global_views, temp_t)
    s_logp = student_log_distribution(student_logits(state, global_views, local_views), cfg.student_temp)
    n_g = global_views.shape[0]
    loss = distill_loss(list(t_probs), T.slice_axis(s_logp, 0, 0, n_g),
                        T.slice_axis(s_logp, 0, n_g, s_logp.shape[0]) if s_logp.shape[0] > n_g else None,
                        symmetric=cfg.symmetric)
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"distill loss is {loss.item()} at epoch {state.epoch} step {state.step}")
    state.optimizer.zero_grad()
    T.backward(loss)
    if cfg.clip_grad:
        clip_grad_norm(state.optimizer.params.values(), cfg.clip_grad)
    total = state.lr_schedule.total_steps
    lr = state.lr_schedule(min(state.step, total))
    state.optimizer.step(lr=max(lr, 1e-12))
    lam = state.momentum_schedule(min(state.step, total))
    ema_update(state.teacher_params(), state.student_params(), lam)
    state.center = update_center(state.center, t_logits, cfg.center_momentum)
    state.step += 1
    return {"loss": loss.item(), "teacher_entropy": entropy(t_probs), "lr": lr, "momentum": lam,
            "teacher_temp": temp_t}


def pretrain(data, vit_cfg: ViTConfig, cfg: DistillConfig, view_cfg: ViewConfig, seed: int,
             out_dir=None, mean=None, std=None, log_every: int = 0) -> Checkpoint:
    """Run view-prediction pre-training and return the final checkpoint.

    ``data`` is an :class:`ImageDataset` or :class:`Splits` (train split used).
    With ``out_dir`` the per-epoch metrics CSV and checkpoints are written there.
    """
    if isinstance(data, Splits):
        mean = data.mean if mean is None else mean
        std = data.std if std is None else std
        data = data.train
    if mean is None:
        mean, std = data.channel_stats()
    if tuple(data.image_size) != tuple(vit_cfg.image_size) or view_cfg.global_size != vit_cfg.image_size[0]:
        raise DimensionError(f"dataset images {data.image_size}, global views {view_cfg.global_size} "
                             f"and model input {vit_cfg.image_size} must agree")
    n = len(data)
    steps_per_epoch = n // cfg.batch_size if n >= cfg.batch_size else 1
    state = DistillState(vit_cfg, cfg, seed, steps_per_epoch)
    out_dir = Path(out_dir) if out_dir is not None else None
    writer = MetricsWriter(out_dir / "pretrain_metrics.csv",
                           ["epoch", "loss", "teacher_entropy", "lr", "momentum", "teacher_temp",
                            "collapse_warning", "seconds"]) if out_dir else None
    collapse_floor = 0.1 * math.log(cfg.out_dim)
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        t0 = time.time()
        order = stream(seed, "order", epoch).permutation(n)
        rows = []
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            gv, lv = generate_batch(data.images[idx], data.ids[idx], view_cfg, seed, epoch, mean, std)
            gv = gv.astype(vit_cfg.np_dtype, copy=False)
            lv = lv.astype(vit_cfg.np_dtype, copy=False)
            rows.append(train_step(state, gv, lv))
            if log_every and state.step % log_every == 0:
                log.info("pretrain epoch=%d step=%d loss=%.4f entropy=%.3f", epoch, state.step,
                         rows[-1]["loss"], rows[-1]["teacher_entropy"])
        collapsed = max(r["teacher_entropy"] for r in rows) < collapse_floor
        if collapsed:
            log.warning("teacher output collapsed: entropy below %.3f for all of epoch %d", collapse_floor, epoch)
        summary = {"epoch": epoch,
                   "loss": float(np.mean([r["loss"] for r in rows])),
                   "teacher_entropy": float(np.mean([r["teacher_entropy"] for r in rows])),
                   "lr": rows[-1]["lr"], "momentum": rows[-1]["momentum"],
                   "teacher_temp": rows[0]["teacher_temp"], "collapse_warning": int(collapsed),
                   "seconds": round(time.time() - t0, 3)}
        log.info("pretrain %s", " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                                         for k, v in summary.items()))
        if writer:
            writer.write(summary)
        state.epoch = epoch + 1
        if out_dir and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"pretrain_epoch{state.epoch:04d}.svtc", state.checkpoint(view_cfg))
    ckpt = state.checkpoint(view_cfg)
    if out_dir:
        save_checkpoint(out_dir / "pretrain_final.svtc", ckpt)
    return ckpt
