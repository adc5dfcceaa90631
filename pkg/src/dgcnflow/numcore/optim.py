from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **hyper,
        )


def adam_step(state: AdamState, params: Sequence[Tensor]) -> None:
    """Bias-corrected ADAM update of ``params`` in place; grads are left untouched."""
    if len(state.m) != len(params):
        raise ContractError(f"optimizer state tracks {len(state.m)} parameters, got {len(params)}")
    for k, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {p.name or k!s} has no gradient")
        if state.m[k].shape != p.shape:
            raise ContractError(
                f"parameter {p.name or k!s}: state shape {state.m[k].shape} != parameter shape {p.shape}"
            )
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for k, p in enumerate(params):
        g = p.grad
        m, v = state.m[k], state.v[k]
        tmp = np.multiply(g, 1.0 - state.beta1)
        m *= state.beta1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - state.beta2
        v *= state.beta2
        v += tmp
        np.multiply(v, 1.0 / bc2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += state.epsilon
        np.divide(m, tmp, out=tmp)
        tmp *= state.lr / bc1
        p.data = p.data - tmp
