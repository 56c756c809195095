#!/usr/bin/env python3
"""
Optimizers and spectral normalization.

Adam with decoupled weight decay drives the GAN; momentum SGD with a stepped
learning-rate schedule is the alternative for detector training.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .errors import GradientError, ShapeError
from .tensor_engine import Tensor, as_tensor, clip, matmul, reshape, tsum

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-12


@dataclass
class OptimState:
    """Adam moments and hyperparameters for one group of parameters."""
    lr: float = 1e-4
    beta1: float = 0.1
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 7e-5
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def scalars(self) -> Dict[str, float]:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.step}

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {f"m/{k}": a for k, a in self.m.items()}
        out.update({f"v/{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def restore(cls, scalars: Dict[str, float], arrays: Dict[str, np.ndarray]) -> "OptimState":
        state = cls(lr=float(scalars["lr"]), beta1=float(scalars["beta1"]), beta2=float(scalars["beta2"]),
                    eps=float(scalars["eps"]), weight_decay=float(scalars["weight_decay"]),
                    step=int(scalars["step"]))
        for key, value in arrays.items():
            kind, name = key.split("/", 1)
            getattr(state, kind)[name] = np.array(value, copy=True)
        return state


def _check_grads(params: Dict[str, Tensor], grads: Dict[str, np.ndarray]) -> None:
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise GradientError(f"no gradient supplied for parameter '{name}'")
        if np.shape(g) != p.shape:
            raise ShapeError(f"gradient for '{name}' has shape {np.shape(g)}, parameter {p.shape}")
        if np.isnan(g).any():
            raise GradientError(f"NaN gradient for parameter '{name}'")


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: OptimState) -> OptimState:
    """
    Bias-corrected Adam followed by decoupled weight decay, in place.

    Args:
        params: name -> parameter tensor
        grads: name -> gradient array, shape-matched
        state: moments and hyperparameters; its step counter is advanced

    Returns:
        The same state object
    """
    if state.step < 0:
        raise GradientError(f"optimizer step counter is negative ({state.step})")
    _check_grads(params, grads)

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m.astype(p.dtype), v.astype(p.dtype)

        m_hat = m / correction1
        v_hat = v / correction2
        updated = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay:
            updated = updated * (1.0 - state.lr * state.weight_decay)
        p.data = updated.astype(p.dtype)
    return state


@dataclass
class StepSchedule:
    """Learning rate multiplied by `factor` at each boundary step."""
    base_lr: float
    boundaries: Tuple[int, ...] = ()
    factor: float = 0.1

    def lr_at(self, step: int) -> float:
        passed = sum(1 for b in self.boundaries if step >= b)
        return self.base_lr * self.factor ** passed


@dataclass
class MomentumState:
    schedule: StepSchedule
    momentum: float = 0.9
    weight_decay: float = 1e-5
    step: int = 0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)


def momentum_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: MomentumState) -> MomentumState:
    """SGD with momentum and coupled weight decay: v = mu*v + g + wd*p; p -= lr*v."""
    _check_grads(params, grads)
    lr = state.schedule.lr_at(state.step)
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype) + state.weight_decay * p.data
        v = state.velocity.get(name, np.zeros_like(p.data))
        v = state.momentum * v + g
        state.velocity[name] = v.astype(p.dtype)
        p.data = (p.data - lr * v).astype(p.dtype)
    state.step += 1
    return state


@dataclass
class SpectralState:
    """Power-iteration vectors for one weight (u over output rows, v over the rest)."""
    u: np.ndarray
    v: np.ndarray
    iterations: int = 0

    @classmethod
    def init(cls, weight_shape: Sequence[int], rng: np.random.Generator,
             dtype: str = "float32") -> "SpectralState":
        rows = int(weight_shape[0])
        cols = int(np.prod(weight_shape[1:]))
        u = rng.normal(size=rows)
        v = rng.normal(size=cols)
        return cls(u=(u / np.linalg.norm(u)).astype(dtype), v=(v / np.linalg.norm(v)).astype(dtype))


def _normalized(vec: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vec)
    if norm < SIGMA_FLOOR:
        return fallback
    return vec / norm


def power_iteration(weight: np.ndarray, state: SpectralState, iters: int = 1) -> SpectralState:
    """Refine u, v towards the leading singular pair of weight reshaped to (out, rest)."""
    w = weight.reshape(weight.shape[0], -1).astype(np.float64)
    u = state.u.astype(np.float64)
    v = state.v.astype(np.float64)
    for _ in range(iters):
        v = _normalized(w.T @ u, v)
        u = _normalized(w @ v, u)
    state.u = u.astype(state.u.dtype)
    state.v = v.astype(state.v.dtype)
    state.iterations += iters
    return state


def estimate_sigma(weight: np.ndarray, state: SpectralState) -> float:
    w = weight.reshape(weight.shape[0], -1)
    return float(state.u @ (w @ state.v))


def spectral_normalize(weight: Tensor, state: SpectralState, iters: int = 1, update: bool = True) -> Tensor:
    """
    Divide a weight by the power-iteration estimate of its largest singular value.

    Args:
        weight: Parameter tensor; rows are output features
        state: u/v estimates; refined in place when `update` is set
        iters: Power iterations to run before normalizing
        update: Skip the refinement to reuse the current estimate

    Returns:
        weight / max(sigma, 1e-12), differentiable with respect to weight
    """
    if update and iters > 0:
        power_iteration(weight.data, state, iters)
    rows = weight.shape[0]
    matrix = reshape(weight, (rows, -1))
    wv = matmul(matrix, as_tensor(state.v.astype(weight.dtype).reshape(-1, 1), weight))
    sigma = tsum(wv * as_tensor(state.u.astype(weight.dtype).reshape(-1, 1), weight))
    sigma = clip(sigma, lo=SIGMA_FLOOR)
    return weight / sigma
