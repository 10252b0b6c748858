"""RAdam (rectified Adam), SGD with momentum, and clamped cross-entropy."""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from errors import BoundsError, ConfigError, NumericError, ShapeError
from linalg_core import Matrix, as_matrix
from nn_layers import named_params, replace_params

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "radam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.name not in ("radam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.name!r}; expected 'radam' or 'sgd'")
        if not self.lr >= 0.0:
            raise ConfigError(f"invalid learning rate: {self.lr}")
        if not 0.0 <= self.beta1 < 1.0:
            raise ConfigError(f"invalid beta1: {self.beta1}")
        if not 0.0 <= self.beta2 < 1.0:
            raise ConfigError(f"invalid beta2: {self.beta2}")
        if not self.eps >= 0.0:
            raise ConfigError(f"invalid epsilon: {self.eps}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"invalid momentum: {self.momentum}")
        if self.clip_norm is not None and not self.clip_norm > 0.0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")


@dataclass(frozen=True, eq=False)
class RAdamState:
    m: Matrix
    v: Matrix
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    lr: float = 1e-3
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Matrix, cfg: OptimizerConfig = OptimizerConfig()) -> "RAdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), 0, cfg.beta1, cfg.beta2, cfg.lr, cfg.eps)

    @property
    def rho_inf(self) -> float:
        return 2.0 / (1.0 - self.beta2) - 1.0


def rho(t: int, beta2: float) -> float:
    """Length of the approximated simple moving average after ``t`` steps."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    b2t = beta2 ** t
    return rho_inf - 2.0 * t * b2t / (1.0 - b2t)


def first_rectified_step(beta2: float, limit: int = 10_000) -> int:
    for t in range(1, limit + 1):
        if rho(t, beta2) > 4.0:
            return t
    raise ConfigError(f"no rectified step within {limit} steps for beta2={beta2}")


def radam_step(state: RAdamState, param: Matrix, grad: Matrix):
    """One RAdam update. Returns ``(new_param, new_state)``; inputs are not mutated."""
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ShapeError(f"param {param.shape}, grad {grad.shape} and state {state.m.shape} must match")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient passed to RAdam")
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    rho_inf = state.rho_inf
    rho_t = rho(t, b2)
    if rho_t > 4.0:
        r_t = math.sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
        v_hat = np.sqrt(v / (1.0 - b2 ** t))
        new_param = param - state.lr * r_t * m_hat / (v_hat + state.eps)
    else:
        new_param = param - state.lr * m_hat
    return new_param, replace(state, m=m, v=v, t=t)


@dataclass(frozen=True, eq=False)
class MomentumState:
    velocity: Matrix
    lr: float = 1e-3
    momentum: float = 0.9


def sgd_momentum_step(state: MomentumState, param: Matrix, grad: Matrix):
    if param.shape != grad.shape:
        raise ShapeError(f"param {param.shape} and grad {grad.shape} must match")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient passed to SGD")
    velocity = state.momentum * state.velocity + grad
    return param - state.lr * velocity, replace(state, velocity=velocity)


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


@dataclass
class Optimizer:
    """Keeps one optimizer state per named parameter tensor of a model."""

    cfg: OptimizerConfig = field(default_factory=OptimizerConfig)
    states: dict = field(default_factory=dict)

    def step(self, params, grads):
        """Return updated params (same container type) after one step."""
        flat_p = named_params(params)
        flat_g = named_params(grads)
        if self.cfg.clip_norm is not None:
            norm = global_norm(flat_g)
            if norm > self.cfg.clip_norm:
                scale = self.cfg.clip_norm / norm
                logger.debug(f"clipping gradient norm {norm:.4g} to {self.cfg.clip_norm}")
                flat_g = {k: g * scale for k, g in flat_g.items()}
        updated = {}
        # sorted keys: fixed update order regardless of dataclass field order
        for name in sorted(flat_p):
            param, grad = flat_p[name], flat_g[name]
            if self.cfg.name == "radam":
                state = self.states.get(name) or RAdamState.for_param(param, self.cfg)
                updated[name], self.states[name] = radam_step(state, param, grad)
            else:
                state = self.states.get(name) or MomentumState(np.zeros_like(param), self.cfg.lr, self.cfg.momentum)
                updated[name], self.states[name] = sgd_momentum_step(state, param, grad)
        return replace_params(params, updated)


def cross_entropy(pred, target_index: int):
    """Loss ``-log(max(pred[target], 1e-12))`` and its gradient w.r.t. the logits."""
    row = as_matrix(pred)
    if row.shape[0] != 1:
        raise ShapeError(f"cross_entropy expects a single probability row, got {row.shape}")
    losses, grads = cross_entropy_rows(row, np.array([target_index]))
    return float(losses[0]), grads[0]


def cross_entropy_rows(probs: Matrix, targets):
    """Row-wise cross-entropy for a ``B x K`` probability array.

    Returns ``(losses[B], dlogits[B, K])`` where ``dlogits = probs - one_hot``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n_rows, n_classes = probs.shape
    if targets.shape != (n_rows,):
        raise ShapeError(f"{targets.shape[0] if targets.ndim else 1} targets for {n_rows} rows")
    if np.any(targets < 0) or np.any(targets >= n_classes):
        raise BoundsError(f"target index out of range for {n_classes} classes")
    rows = np.arange(n_rows)
    losses = -np.log(np.maximum(probs[rows, targets], PROB_FLOOR))
    grads = probs.copy()
    grads[rows, targets] -= 1.0
    return losses, grads
