"""Optimizer, run-length schedules, and the EMA tie between parameter trees.

Learning rate warms up linearly to its peak and then follows a cosine decay
to the final value; weight decay and the EMA momentum move linearly across
the entire run. Endpoint values at step 0, the warmup junction, and the
final step are exact, and the warmup/cosine junction is continuous.

The optimizer is a decoupled-weight-decay adaptive-moment method: decay is
applied as ``p -= lr * wd * p`` alongside the bias-corrected moment step,
never mixed into the gradient. Biases, normalization affines, positional
embeddings, and the mask token are exempt from decay by default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class ScheduleRangeError(ValueError):
    """A schedule was queried outside [0, total_steps]."""


class OptimStepError(RuntimeError):
    """An optimizer step was aborted (NaN gradient or structural problem)."""


@dataclass(frozen=True)
class Schedules:
    total_epochs: int = 100
    warmup_epochs: int = 5
    steps_per_epoch: int = 1
    lr_start: float = 1e-4
    lr_peak: float = 1e-3
    lr_final: float = 1e-6
    wd_start: float = 0.04
    wd_final: float = 0.4
    ema_start: float = 0.996
    ema_final: float = 1.0

    def __post_init__(self):
        if self.total_epochs <= 0 or self.steps_per_epoch <= 0:
            raise ValueError("run length must be positive")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError("warmup must fit inside the run")
        for name in ("lr_start", "lr_peak", "lr_final", "wd_start", "wd_final"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not (0.0 <= self.ema_start <= 1.0 and 0.0 <= self.ema_final <= 1.0):
            raise ValueError("ema momentum must lie in [0, 1]")

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    def _check(self, step: int) -> None:
        if not 0 <= step <= self.total_steps:
            raise ScheduleRangeError(f"step {step} outside [0, {self.total_steps}]")

    def lr_at(self, step: int) -> float:
        self._check(step)
        if step < self.warmup_steps:
            frac = step / self.warmup_steps
            return self.lr_start + (self.lr_peak - self.lr_start) * frac
        span = self.total_steps - self.warmup_steps
        if span == 0:
            return self.lr_peak if step == self.warmup_steps else self.lr_final
        progress = (step - self.warmup_steps) / span
        return self.lr_final + (self.lr_peak - self.lr_final) * 0.5 * (1.0 + math.cos(math.pi * progress))

    def _linear(self, step: int, start: float, final: float) -> float:
        self._check(step)
        if self.total_steps == 0:
            return final
        return start + (final - start) * (step / self.total_steps)

    def wd_at(self, step: int) -> float:
        return self._linear(step, self.wd_start, self.wd_final)

    def ema_at(self, step: int) -> float:
        return self._linear(step, self.ema_start, self.ema_final)


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    params: dict[str, Tensor]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.0  # 0 disables clipping
    decay_exempt: tuple[str, ...] = ("bias", "gamma", "beta", "pos_embed", "mask_token")
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    def _exempt(self, name: str) -> bool:
        return any(pat in name for pat in self.decay_exempt)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float, wd: float) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        if self.grad_clip > 0.0:
            total = math.sqrt(
                sum(float(np.sum(p.grad**2)) for p in self.params.values() if p.grad is not None)
            )
            clip_scale = min(1.0, self.grad_clip / (total + 1e-12))
        else:
            clip_scale = 1.0
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise OptimStepError(f"non-finite gradient in parameter group {name!r}")
            if clip_scale != 1.0:
                g = g * clip_scale
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if wd and not self._exempt(name):
                update = update + wd * p.data
            p.data -= lr * update


def ema_update(context_params: dict[str, Tensor], target_params: dict[str, Tensor], momentum: float) -> None:
    """target <- momentum * target + (1 - momentum) * context, elementwise."""
    if context_params.keys() != target_params.keys():
        raise OptimStepError("EMA: parameter trees have different keys")
    for name, src in context_params.items():
        dst = target_params[name]
        if dst.data.shape != src.data.shape:
            raise OptimStepError(f"EMA: shape mismatch for {name!r}")
        dst.data *= momentum
        dst.data += (1.0 - momentum) * src.data


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Frozen structural copy used to initialize the target-side tree."""
    return {name: Tensor(p.data.copy()) for name, p in params.items()}
