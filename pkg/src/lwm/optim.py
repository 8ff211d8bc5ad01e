"""Adam optimizer with classic L2 weight decay folded into the gradient."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class AdamState:
    """Optimizer moments and hyperparameters for one parameter list."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ContractError("Adam betas must lie in (0, 1)")
        if self.eps <= 0.0 or self.lr < 0.0:
            raise ContractError("Adam needs eps > 0 and lr >= 0")

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8,
                   weight_decay: float = 0.0) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One Adam update with bias correction; clears gradients afterwards.

    Weight decay enters as an additive ``weight_decay * theta`` term in the
    gradient before the moment updates (classic L2, not decoupled).
    """
    if len(state.m) != len(params):
        raise ContractError("optimizer state does not match parameter list")
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {i} has no gradient")
    state.step += 1
    t = state.step
    corr1 = 1.0 - state.beta1 ** t
    corr2 = 1.0 - state.beta2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        if state.weight_decay != 0.0:
            g = g + state.weight_decay * p.data
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        p.grad = None
