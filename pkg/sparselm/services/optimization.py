import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from sparselm.errors import NonFiniteGradientError
from sparselm.services.autodiff import Tensor

log = logging.getLogger("optimization")


@dataclass(frozen=True)
class OptimizerState:
    """Per-parameter slots (momentum buffers, or first then second moments) and the step counter."""

    slots: Tuple[Tuple[np.ndarray, ...], ...] = field(default_factory=tuple)
    step: int = 0


def _check_finite(grads: Sequence[np.ndarray]) -> None:
    for n, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {n}; step aborted")


def sgd_momentum_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: OptimizerState,
    lr: float,
    momentum: float = 0.9,
) -> Tuple[List[np.ndarray], OptimizerState]:
    """v <- momentum * v + g;  p <- p - lr * v."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    _check_finite(grads)
    buffers = state.slots or tuple((np.zeros_like(p),) for p in params)
    new_params, new_slots = [], []
    for p, g, (v,) in zip(params, grads, buffers):
        v = momentum * v + g
        new_params.append(p - lr * v)
        new_slots.append((v,))
    return new_params, OptimizerState(tuple(new_slots), state.step + 1)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: OptimizerState,
    lr: float = 0.001,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> Tuple[List[np.ndarray], OptimizerState]:
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    _check_finite(grads)
    beta1, beta2 = betas
    moments = state.slots or tuple((np.zeros_like(p), np.zeros_like(p)) for p in params)
    step = state.step + 1
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    new_params, new_slots = [], []
    for p, g, (m, v) in zip(params, grads, moments):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_params.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_slots.append((m, v))
    return new_params, OptimizerState(tuple(new_slots), step)


def exp_decay_schedule(lr0: float, epoch: int, factor: float = 0.97) -> float:
    if not 0.0 < factor <= 1.0:
        raise ValueError(f"decay factor must lie in (0, 1], got {factor}")
    return lr0 * factor**epoch


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float) -> Tuple[List[np.ndarray], float]:
    """Global-norm clipping; returns the (possibly scaled) grads and the norm before clipping."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads), norm
    factor = max_norm / norm
    return [g * factor for g in grads], norm


class Optimizer:
    """Applies one of the step functions to a fixed list of parameter tensors."""

    def __init__(self, parameters: Sequence[Tensor], lr: float, kind: str = "sgd", momentum: float = 0.9,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, clip_norm=None) -> None:
        if kind not in ("sgd", "adam"):
            raise ValueError(f"Unknown optimizer: {kind}")
        self.parameters = list(parameters)
        self.kind = kind
        self.lr = lr
        self.momentum = momentum
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.state = OptimizerState()

    def step(self) -> float:
        """Update parameters from their ``.grad``; returns the gradient norm before clipping."""
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.parameters]
        _check_finite(grads)
        if self.clip_norm:
            grads, norm = clip_gradients(grads, self.clip_norm)
        else:
            norm = global_norm(grads)
        values = [p.data for p in self.parameters]
        if self.kind == "sgd":
            new_values, self.state = sgd_momentum_step(values, grads, self.state, self.lr, self.momentum)
        else:
            new_values, self.state = adam_step(values, grads, self.state, self.lr, self.betas, self.eps)
        for p, value in zip(self.parameters, new_values):
            p.data = value
        return norm

    def zero_grad(self) -> None:
        for p in self.parameters:
            p.grad = None
