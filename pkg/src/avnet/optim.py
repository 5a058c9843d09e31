"""Adam optimizer over a ParameterStore."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .blocks import ParameterStore
from .tensor import GradientError


@dataclass
class AdamState:
    """First/second moment estimates and step counter for one parameter set."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adam(store: ParameterStore, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name, p in store.parameters():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(store: ParameterStore, state: AdamState) -> None:
    """One bias-corrected Adam update, in place; clears gradients afterward.

    Every trainable parameter must hold a gradient: a missing one means the
    forward/backward pass skipped it, which is reported rather than ignored.
    """
    for name, p in store.parameters():
        if p.grad is None:
            raise GradientError(f"parameter {name!r} has no gradient; run backward first")

    state.step_count += 1
    bc1 = 1.0 - state.beta1 ** state.step_count
    bc2 = 1.0 - state.beta2 ** state.step_count
    for name, p in store.parameters():
        g = p.grad.data
        m = state.m[name]
        v = state.v[name]
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.grad = None
