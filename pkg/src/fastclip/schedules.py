"""Scalar schedules: inner LR, outer LR, epsilon switch and the tau-LR latch."""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class GammaSchedule:
    kind: str = "cosine"  # "constant" | "cosine"
    gamma_const: float = 0.6
    gamma_min: float = 0.2
    decay_epochs: int = 18
    iters_per_epoch: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise ValueError(f"unknown gamma schedule kind {self.kind!r}")
        if not 0 < self.gamma_const <= 1 or not 0 < self.gamma_min <= 1:
            raise ValueError("gamma values must lie in (0, 1]")
        if self.decay_epochs < 1 or self.iters_per_epoch < 1:
            raise ValueError("decay_epochs and iters_per_epoch must be positive")


def gamma_at(sched: GammaSchedule, t: int) -> float:
    if sched.kind == "constant":
        return sched.gamma_const
    epoch = t // sched.iters_per_epoch
    if epoch >= sched.decay_epochs:
        return sched.gamma_min
    c = 0.5 * (1.0 + math.cos(math.pi * epoch / sched.decay_epochs))
    return c * (1.0 - sched.gamma_min) + sched.gamma_min


@dataclass(frozen=True)
class OuterLRSchedule:
    peak_lr: float = 1e-3
    min_lr: float = 0.0
    warmup_iters: int = 0
    total_iters: int = 1


def lr_at(sched: OuterLRSchedule, t: int) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to ``min_lr``."""
    if t >= sched.total_iters:
        return sched.min_lr
    if t < sched.warmup_iters:
        return sched.peak_lr * t / sched.warmup_iters
    if t == sched.warmup_iters:
        return sched.peak_lr
    span = sched.total_iters - sched.warmup_iters
    frac = (t - sched.warmup_iters) / span
    # mean-plus-amplitude form keeps the midpoint exact: cos(pi/2) is ~6e-17, not 0
    mean = 0.5 * (sched.peak_lr + sched.min_lr)
    return mean + 0.5 * (sched.peak_lr - sched.min_lr) * math.cos(math.pi * frac)


@dataclass(frozen=True)
class EpsilonSchedule:
    eps_initial: float = 1e-14
    eps_late: float = 1e-14
    switch_epoch: float = math.inf

    def at(self, epoch: int) -> float:
        return self.eps_late if epoch >= self.switch_epoch else self.eps_initial


class TauLRLatch:
    """One-way switch that scales the temperature LR once tau dips below a threshold."""

    def __init__(self, threshold: float = 0.03, factor: float = 1.0 / 3.0, tripped: bool = False):
        self.threshold = threshold
        self.factor = factor
        self.tripped = tripped

    def __call__(self, current_tau: float) -> float:
        if current_tau < self.threshold:
            self.tripped = True
        return self.factor if self.tripped else 1.0


def tau_lr_modifier(current_tau: float, threshold: float = 0.03, factor: float = 1.0 / 3.0,
                    latch: TauLRLatch | None = None) -> float:
    if latch is None:
        latch = TauLRLatch(threshold, factor)
    return latch(current_tau)
