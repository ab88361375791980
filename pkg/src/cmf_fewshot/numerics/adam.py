"""Adam with bias correction, as a pure function over numpy arrays."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Dict, Mapping, Tuple

import numpy as np

DEFAULT_LR = 0.0005


@dataclass(frozen=True)
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(0, np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> Tuple[np.ndarray, AdamState]:
    """One Adam update. Returns the new parameter and the new state; inputs are not modified."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ValueError(f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    dt = param.dtype.type
    step = state.step + 1
    m = dt(state.beta1) * state.m + dt(1 - state.beta1) * grad
    v = dt(state.beta2) * state.v + dt(1 - state.beta2) * (grad * grad)
    m_hat = m / dt(1 - state.beta1**step)
    v_hat = v / dt(1 - state.beta2**step)
    new = param - dt(state.lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))
    return new.astype(param.dtype, copy=False), replace(state, step=step, m=m, v=v)


class Adam:
    """Keeps one :class:`AdamState` per named parameter."""

    def __init__(self, params: Mapping[str, np.ndarray], lr: float = DEFAULT_LR, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.states: Dict[str, AdamState] = {
            k: AdamState.zeros_like(v, lr=lr, beta1=beta1, beta2=beta2, eps=eps) for k, v in params.items()
        }

    def step(self, params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
        out = dict(params)
        for name in sorted(self.states):
            out[name], self.states[name] = adam_step(params[name], grads[name], self.states[name])
        return out
