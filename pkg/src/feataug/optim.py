"""SGD with momentum, LARS trust ratios, schedules, clipping and EMA."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from feataug.autodiff import BatchNormState, Tensor
from feataug.networks import Network


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 0.4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    lars: bool = True
    lars_trust_coef: float = 0.02
    lars_eps: float = 1e-9
    clip_norm: float = 1.0  # <= 0 disables clipping
    accum_steps: int = 1
    warmup_epochs: int = 1
    total_epochs: int = 20

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.accum_steps < 1:
            raise ValueError("accum_steps must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.warmup_epochs < 0 or self.total_epochs < 1:
            raise ValueError("need warmup_epochs >= 0 and total_epochs >= 1")
        if self.warmup_epochs >= self.total_epochs:
            raise ValueError("warmup must be shorter than training")


@dataclass(frozen=True)
class EmaConfig:
    m_base: float = 0.99

    def __post_init__(self):
        if not 0 < self.m_base <= 1:
            raise ValueError("m_base must lie in (0, 1]")


def excluded_from_lars(name: str) -> bool:
    """Biases and BN parameters get neither LARS scaling nor weight decay."""
    return name.endswith(".bias") or ".bn." in name


def cosine_warmup_lr(step: int, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    if warmup_steps >= total_steps:
        raise ValueError("warmup_steps must be smaller than total_steps")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def lars_local_lr(w: np.ndarray, g: np.ndarray, cfg: OptimConfig, name: str | None = None) -> float:
    """trust * |w| / (|g| + wd * |w| + eps); 1.0 for excluded or degenerate tensors."""
    if np.shape(w) != np.shape(g):
        raise ValueError("weight and gradient shapes differ")
    if name is not None and excluded_from_lars(name):
        return 1.0
    w_norm = float(np.linalg.norm(w))
    g_norm = float(np.linalg.norm(g))
    if w_norm == 0.0 or g_norm == 0.0:
        return 1.0
    return cfg.lars_trust_coef * w_norm / (g_norm + cfg.weight_decay * w_norm + cfg.lars_eps)


def sgd_step(
    params: dict[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: dict[str, np.ndarray],
    lr: float,
    cfg: OptimConfig,
) -> None:
    """One momentum-SGD update; replaces the tensors in ``params`` with updated leaves.

    v <- momentum * v + (g + wd * w);  w <- w - lr * local_lr * v
    """
    for name in params:
        w = params[name].data
        g = grads[name]
        excluded = excluded_from_lars(name)
        d = g if excluded or cfg.weight_decay == 0 else g + cfg.weight_decay * w
        v = state.get(name)
        v = d.copy() if v is None else cfg.momentum * v + d
        state[name] = v
        local = lars_local_lr(w, g, cfg, name) if cfg.lars else 1.0
        params[name] = Tensor(w - (lr * local) * v, True)


def global_grad_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


def ema_momentum(step: int, total: int, m_base: float) -> float:
    """Cosine ramp of the target momentum from ``m_base`` (step 0) to 1 (step ``total``)."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return 1.0 - (1.0 - m_base) * 0.5 * (math.cos(math.pi * step / total) + 1.0)


def ema_update(online: Network, target: Network, m: float) -> None:
    """target <- m * target + (1 - m) * online, parameters and BN running stats."""
    if m == 1.0:
        return
    tp = target.state.params
    for name, p in online.state.params.items():
        tp[name] = Tensor(m * tp[name].data + (1.0 - m) * p.data, True)
    for name, src in online.state.bn_state.items():
        dst: BatchNormState = target.state.bn_state[name]
        dst.running_mean = (m * dst.running_mean + (1.0 - m) * src.running_mean).astype(dst.running_mean.dtype)
        dst.running_var = (m * dst.running_var + (1.0 - m) * src.running_var).astype(dst.running_var.dtype)
