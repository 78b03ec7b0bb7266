"""Trainable parameters and an adaptive-moment (Adam) optimizer."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Parameter(Tensor):
    """Named model weight. Frozen parameters receive no optimizer updates."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def freeze(self) -> None:
        self.trainable = False
        self.requires_grad = False
        self.grad = None


class AdamState:
    """Per-parameter first/second moment accumulators plus a step counter."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(state: AdamState, lr: float | None = None) -> None:
    """One bias-corrected Adam update over the state's trainable parameters.

    Parameters with no accumulated gradient are treated as zero-gradient.
    """
    state.step_count += 1
    t = state.step_count
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(state.params, state.m, state.v):
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if m.shape != p.data.shape or g.shape != p.data.shape:
            raise ValueError(
                f"accumulator/gradient shape does not match parameter "
                f"{p.name or '<unnamed>'} shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def zero_grads(params: list[Parameter]) -> None:
    for p in params:
        p.grad = None


def cosine_lr(base_lr: float, step: int, total_steps: int, floor: float = 0.05) -> float:
    """Cosine decay from base_lr to floor*base_lr over total_steps."""
    if total_steps <= 1:
        return base_lr
    frac = min(step / (total_steps - 1), 1.0)
    return base_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + np.cos(np.pi * frac)))
