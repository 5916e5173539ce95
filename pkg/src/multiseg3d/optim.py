"""AdamW with decoupled weight decay and a polynomial learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ContractError, NumericError


def polynomial_lr(step: int, lr0: float, total_steps: int, power: float = 0.9) -> float:
    """lr(t) = lr0 * (1 - t/T)^power, clamped at 0 past T."""
    if total_steps <= 0:
        raise ContractError("polynomial_lr: total_steps must be positive")
    frac = max(0.0, 1.0 - step / total_steps)
    return lr0 * frac ** power


@dataclass
class AdamWState:
    """Moment accumulators and schedule settings for one parameter list."""

    lr0: float
    weight_decay: float
    total_steps: int
    power: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    constant_lr: bool = False
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def init_moments(self, params: list[Tensor]) -> None:
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def lr(self) -> float:
        if self.constant_lr:
            return self.lr0
        return polynomial_lr(self.step, self.lr0, self.total_steps, self.power)


def adamw_step(state: AdamWState, params: list[Tensor], grads: list[np.ndarray],
               names: list[str] | None = None) -> None:
    """One decoupled-decay update in place.

    With a zero gradient the parameter scales by exactly (1 - lr*wd),
    which is the decay-first formulation p <- p*(1 - lr*wd) - lr*m_hat/(sqrt(v_hat)+eps).
    """
    if not state.m:
        state.init_moments(params)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("adamw_step: params/grads/moments length mismatch")
    lr = state.lr()
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ContractError(f"adamw_step: gradient shape {g.shape} != param {p.data.shape}")
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"param[{i}]"
            raise NumericError(f"adamw_step: non-finite gradient for {name}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data = p.data * (1.0 - lr * state.weight_decay) - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    state.step = t
