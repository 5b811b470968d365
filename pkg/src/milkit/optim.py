"""Adam optimizer over named parameter sets (plain float64 arrays)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["AdamState", "adam_step"]


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, params: dict[str, np.ndarray], lr: float = 0.001, **kw) -> "AdamState":
        return cls(lr=lr,
                   m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> tuple[AdamState, dict[str, np.ndarray]]:
    """One bias-corrected Adam update; returns new state and parameters."""
    t = state.step + 1
    new_m, new_v, new_p = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient {k} has shape {g.shape}, "
                             f"parameter has {p.shape}")
        m = state.beta1 * state.m[k] + (1 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        new_m[k], new_v[k] = m, v
        new_p[k] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    next_state = AdamState(lr=state.lr, beta1=state.beta1, beta2=state.beta2,
                           eps=state.eps, step=t, m=new_m, v=new_v)
    return next_state, new_p
