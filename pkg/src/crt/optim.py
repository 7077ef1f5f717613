"""Adaptive-moment optimizer with warmup and global-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class OptimizerConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    warmup_steps: int = 100
    steps: int = 1000
    batch_lanes: int = 4
    eval_every: int = 250


def global_norm(grads) -> float:
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    return float(np.sqrt(total))


class Adam:
    """Per-name first/second moment state; step() applies one clipped update in place."""

    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def lr_at(self, t: int) -> float:
        warm = max(self.cfg.warmup_steps, 1)
        return self.cfg.lr * min(1.0, t / warm)

    def step(self, named_grads) -> float:
        """Apply one update to (name, array, grad) triples; returns the pre-clip norm."""
        named_grads = list(named_grads)
        self.t += 1
        gn = global_norm(g for _, _, g in named_grads)
        scale = 1.0
        if self.cfg.clip_norm > 0.0 and gn > self.cfg.clip_norm:
            scale = self.cfg.clip_norm / gn
        lr = self.lr_at(self.t)
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, value, grad in named_grads:
            g = grad * scale
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(value)
                self._m[name] = m
                self._v[name] = np.zeros_like(value)
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            value -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        return gn
