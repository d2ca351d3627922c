"""Adam with bias correction, plus global-norm gradient clipping."""

from __future__ import annotations

import logging
import math
from typing import Mapping, Optional

import numpy as np

from ..errors import DimensionError, InputError, NumericDomainError

logger = logging.getLogger(__name__)


def adam_update(
    param: np.ndarray,
    grad: np.ndarray,
    moment1: np.ndarray,
    moment2: np.ndarray,
    step: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam step.

    Returns:
        (updated param, updated first moment, updated second moment)

    Raises:
        InputError: If ``step`` < 1
        NumericDomainError: If ``grad`` holds NaN or inf
    """
    if step < 1:
        raise InputError(f"Adam step counts from 1, got {step}")
    if not (param.shape == grad.shape == moment1.shape == moment2.shape):
        raise DimensionError(
            f"adam_update: param {param.shape}, grad {grad.shape}, "
            f"moments {moment1.shape}/{moment2.shape}"
        )
    if not np.all(np.isfinite(grad)):
        raise NumericDomainError("adam_update: non-finite gradient")

    m = beta1 * moment1 + (1.0 - beta1) * grad
    v = beta2 * moment2 + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    updated = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return updated, m, v


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(
    grads: Mapping[str, np.ndarray], max_norm: Optional[float]
) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients together so their joint L2 norm is <= ``max_norm``.

    Returns:
        (clipped gradients, norm before clipping)
    """
    norm = global_norm(grads)
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return dict(grads), norm
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}, norm


class Adam:
    """Adam state over a named parameter set."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.moment1: dict[str, np.ndarray] = {}
        self.moment2: dict[str, np.ndarray] = {}

    def apply(
        self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float
    ) -> dict[str, np.ndarray]:
        """Advance one step and return the updated parameter payloads."""
        self.step += 1
        updated = {}
        for name, value in params.items():
            grad = grads.get(name)
            if grad is None:
                updated[name] = value
                continue
            m = self.moment1.get(name, np.zeros_like(value))
            v = self.moment2.get(name, np.zeros_like(value))
            updated[name], self.moment1[name], self.moment2[name] = adam_update(
                value, grad, m, v, self.step, lr, self.beta1, self.beta2, self.eps
            )
        return updated

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat arrays for the checkpoint container."""
        arrays = {"adam.step": np.array([float(self.step)])}
        for name, m in self.moment1.items():
            arrays[f"adam.m.{name}"] = m
            arrays[f"adam.v.{name}"] = self.moment2[name]
        return arrays

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.step = int(arrays["adam.step"][0])
        self.moment1 = {k[len("adam.m.") :]: v for k, v in arrays.items() if k.startswith("adam.m.")}
        self.moment2 = {k[len("adam.v.") :]: v for k, v in arrays.items() if k.startswith("adam.v.")}
        logger.debug(f"Restored Adam state at step {self.step} ({len(self.moment1)} moments)")
