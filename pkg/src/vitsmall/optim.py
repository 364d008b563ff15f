"""Adam with decoupled weight decay, and step schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ParameterError, Tensor

SCHEDULE_KINDS = ("constant", "linear-warmup", "cosine", "warmup-then-cosine")


def scaled_lr(batch_size: int, base: float = 0.0005) -> float:
    """Peak learning rate ``base * batch_size / 256``."""
    return base * batch_size / 256


@dataclass(frozen=True)
class Schedule:
    """Scalar schedule over integer steps ``0..total_steps``.

    ``linear-warmup`` ramps start→peak over ``warmup_steps`` then holds peak.
    ``cosine`` runs a half cosine from peak (step 0) to final (total).
    ``warmup-then-cosine`` ramps start→peak, then half cosine peak→final.
    """

    kind: str
    start: float = 0.0
    peak: float = 1.0
    final: float = 0.0
    warmup_steps: int = 0
    total_steps: int = 1

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ParameterError(f"unknown schedule kind {self.kind!r}")
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ParameterError("schedule steps must be non-negative")
        if self.warmup_steps > self.total_steps:
            raise ParameterError(f"warmup_steps {self.warmup_steps} > total_steps {self.total_steps}")

    def __call__(self, step: float) -> float:
        return self.value(step)

    def value(self, step: float) -> float:
        if step < 0 or step > self.total_steps:
            raise ParameterError(f"step {step} outside [0, {self.total_steps}]")
        if self.kind == "constant":
            return self.peak
        if self.kind in ("linear-warmup", "warmup-then-cosine") and step < self.warmup_steps:
            return self.start + (self.peak - self.start) * step / self.warmup_steps
        if self.kind == "linear-warmup":
            return self.peak
        begin = self.warmup_steps if self.kind == "warmup-then-cosine" else 0
        span = self.total_steps - begin
        if span == 0:
            return self.final
        if step == self.total_steps:
            return self.final
        progress = (step - begin) / span
        return self.final + (self.peak - self.final) * 0.5 * (1.0 + math.cos(math.pi * progress))


def warmup_cosine(peak: float, total_steps: int, warmup_steps: int, start: float = 0.0,
                  final: float = 1e-6) -> Schedule:
    """Learning-rate schedule with the 1e-6 cosine floor used by both stages."""
    if warmup_steps == 0:
        return Schedule("cosine", start, peak, final, 0, total_steps)
    return Schedule("warmup-then-cosine", start, peak, final, warmup_steps, total_steps)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    base_lr: float = 1e-3
    weight_decay: float = 0.0


class Adam:
    """Bias-corrected Adam; weight decay is decoupled: ``p -= lr * wd * p``.

    ``params`` maps names to tensors. Names in ``no_decay`` skip weight decay.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8, no_decay=()):
        if not lr > 0:
            raise ParameterError(f"lr must be > 0, got {lr}")
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.no_decay = set(no_decay)
        self.state = OptimizerState(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
            base_lr=lr, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None, weight_decay: float | None = None) -> None:
        lr = self.state.base_lr if lr is None else lr
        wd = self.state.weight_decay if weight_decay is None else weight_decay
        if not lr > 0:
            raise ParameterError(f"lr must be > 0, got {lr}")
        for name, p in self.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        st = self.state
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for name, p in self.params.items():
            g = p.grad
            data = p.data
            dt = data.dtype.type
            if wd and name not in self.no_decay:
                data *= dt(1.0 - lr * wd)
            if g is None:
                continue
            m, v = st.m[name], st.v[name]
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * (g * g)
            denom = np.sqrt(v / dt(c2))
            denom += dt(self.eps)
            data -= dt(lr / c1) * m / denom


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if total > max_norm:
        factor = max_norm / (total + 1e-6)
        for g in grads:
            g *= g.dtype.type(factor)
    return total
