"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, Tensor, backward


class DeterminismError(RuntimeError):
    pass


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    # floor keeps near-zero gradients from turning rounding noise into large ratios
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradcheckReport:
    """Compare backprop gradients of ``loss_fn()`` with central differences per parameter.

    ``loss_fn`` must read the current values of ``params`` each call.
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    for p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    base = float(loss.data)
    if float(loss_fn().data) != base:
        raise DeterminismError("loss changed between two evaluations at the same point")
    errors: dict[str, float] = {}
    for k, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2.0 * h)
        if float(loss_fn().data) != base:
            raise DeterminismError(f"loss not reproducible after probing {p.name or k}")
        err = relative_error(analytic, numeric, floor)
        errors[p.name or f"param{k}"] = float(err.max()) if err.size else 0.0
    return GradcheckReport(errors, tol)
