"""Decoupled-weight-decay Adam and the linear warmup/decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import ShapeError, Tensor


class DivergenceError(RuntimeError):
    """Non-finite gradient: the training run has diverged."""


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError(f"betas must be in [0, 1), got {self.beta1}, {self.beta2}")


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus the shared step counter."""

    config: AdamConfig
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Adam with decoupled weight decay and bias correction.

    ``no_decay`` names parameters (bias and norm terms, conventionally)
    whose weight-decay multiplier is zero. Updates are in-place on
    ``params``; gradients are left untouched so callers can inspect them.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        config: AdamConfig | None = None,
        no_decay: set[str] | None = None,
    ):
        self.params = params
        self.config = config or AdamConfig()
        self.no_decay = no_decay or set()
        unknown = self.no_decay - params.keys()
        if unknown:
            raise KeyError(f"no_decay names unknown parameters: {sorted(unknown)}")
        self.state = OptimizerState(
            config=self.config,
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        """One update over all parameters that have a gradient."""
        cfg = self.config
        if lr is None:
            lr = cfg.lr
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ShapeError(
                    f"gradient shape {p.grad.shape} does not match parameter "
                    f"{name} shape {p.data.shape}"
                )
            if not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient in parameter {name}")
        self.state.step += 1
        t = self.state.step
        bias1 = 1.0 - cfg.beta1**t
        bias2 = 1.0 - cfg.beta2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.state.m[name]
            v = self.state.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
            if cfg.weight_decay and name not in self.no_decay:
                update = update + cfg.weight_decay * p.data
            p.data -= np.asarray(lr * update, dtype=p.data.dtype)


def scheduled_lr(
    base_lr: float,
    step: int,
    total_steps: int,
    warmup_steps: int | None = None,
    warmup_frac: float = 0.01,
) -> float:
    """Learning rate at 0-based ``step``: linear warmup, then linear decay to 0.

    Warmup defaults to ``ceil(warmup_frac * total_steps)`` steps (at least 1).
    """
    if total_steps < 1:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step:
        raise ValueError(f"step must be non-negative, got {step}")
    if warmup_steps is None:
        warmup_steps = max(1, int(np.ceil(warmup_frac * total_steps)))
    if not 1 <= warmup_steps <= total_steps:
        raise ValueError(
            f"warmup_steps must be in [1, {total_steps}], got {warmup_steps}"
        )
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if total_steps == warmup_steps:
        return 0.0
    remaining = max(0, total_steps - step - 1)
    return base_lr * remaining / (total_steps - warmup_steps)
