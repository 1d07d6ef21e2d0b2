"""Adam with the inverse-square-root warmup schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class OptimizerSettings:
    peak_lr: float = 3e-3
    warmup: int = 200
    steps: int = 1000
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    grad_clip: float = 5.0   # global L2 norm; 0 disables

    def validate(self) -> None:
        if self.warmup < 1:
            raise ConfigError(f"warmup must be >= 1, got {self.warmup}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not self.peak_lr > 0:
            raise ConfigError(f"peak_lr must be > 0, got {self.peak_lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("Adam betas must lie in [0, 1) and eps must be > 0")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0")


def learning_rate(step: int, settings: OptimizerSettings) -> float:
    """peak * min(step / warmup, sqrt(warmup / step)) for 1-based ``step``."""
    step = max(int(step), 1)
    return settings.peak_lr * min(step / settings.warmup, math.sqrt(settings.warmup / step))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm <= 0 or norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


class Adam:
    def __init__(self, params: dict[str, np.ndarray], settings: OptimizerSettings):
        settings.validate()
        self.settings = settings
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Return updated parameters; the inputs are not modified."""
        s = self.settings
        self.t += 1
        grads = clip_by_global_norm(grads, s.grad_clip)
        lr = learning_rate(self.t, s)
        c1 = 1.0 - s.beta1 ** self.t
        c2 = 1.0 - s.beta2 ** self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = s.beta1 * self.m[k] + (1.0 - s.beta1) * g
            self.v[k] = s.beta2 * self.v[k] + (1.0 - s.beta2) * g * g
            out[k] = p - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + s.eps)
        return out


def optimizer_step(params, grads, state: Adam) -> dict[str, np.ndarray]:
    return state.step(params, grads)
