"""LSTM cell and MLP head with hand-written backpropagation, plus inverted dropout.

Gate layout: one weight block per gate acting on the concatenation
``z = [u; h_prev]``::

    f = sigmoid(W_f z + b_f)    i = sigmoid(W_i z + b_i)
    g = tanh(W_g z + b_g)       o = sigmoid(W_o z + b_o)
    c = f * c_prev + i * g      h = o * tanh(c)

All functions work on column batches (``dim x B``); B = 1 is a single record.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from errors import ConfigError, ProtocolError, ShapeError
from linalg_core import Matrix, RngStream, elu, elu_grad, matmul, sigmoid, softmax_rows, uniform_init

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LstmParams:
    W_f: Matrix
    W_i: Matrix
    W_g: Matrix
    W_o: Matrix
    b_f: Matrix
    b_i: Matrix
    b_g: Matrix
    b_o: Matrix

    def __post_init__(self):
        shape = self.W_f.shape
        for name in ("W_i", "W_g", "W_o"):
            if getattr(self, name).shape != shape:
                raise ShapeError(f"gate block {name} has shape {getattr(self, name).shape}, expected {shape}")
        for name in ("b_f", "b_i", "b_g", "b_o"):
            if getattr(self, name).shape != (shape[0], 1):
                raise ShapeError(f"bias {name} has shape {getattr(self, name).shape}, expected {(shape[0], 1)}")

    @property
    def hidden_dim(self) -> int:
        return self.W_f.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_f.shape[1] - self.W_f.shape[0]


@dataclass(frozen=True, eq=False)
class LstmState:
    h: Matrix
    c: Matrix

    @classmethod
    def zeros(cls, hidden_dim: int, batch: int = 1) -> "LstmState":
        return cls(np.zeros((hidden_dim, batch)), np.zeros((hidden_dim, batch)))


@dataclass(frozen=True, eq=False)
class LstmStepCache:
    z: Matrix
    f: Matrix
    i: Matrix
    g: Matrix
    o: Matrix
    c_prev: Matrix
    tanh_c: Matrix


@dataclass(eq=False)
class TapeCache:
    """Per-step caches of one forward pass, tied to the parameters that produced them."""

    params: object
    steps: list = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class MlpParams:
    W_hidden: Matrix
    b_hidden: Matrix
    W_out: Matrix
    b_out: Matrix

    def __post_init__(self):
        if self.b_hidden.shape != (self.W_hidden.shape[0], 1):
            raise ShapeError(f"b_hidden shape {self.b_hidden.shape} does not match W_hidden {self.W_hidden.shape}")
        if self.W_out.shape[1] != self.W_hidden.shape[0]:
            raise ShapeError(f"W_out {self.W_out.shape} does not chain after W_hidden {self.W_hidden.shape}")
        if self.b_out.shape != (self.W_out.shape[0], 1):
            raise ShapeError(f"b_out shape {self.b_out.shape} does not match W_out {self.W_out.shape}")

    @property
    def n_classes(self) -> int:
        return self.W_out.shape[0]


@dataclass(frozen=True)
class DropoutSpec:
    rate: float = 0.0
    rng: Optional[RngStream] = None

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.rate}")


NO_DROPOUT = DropoutSpec()


@dataclass(frozen=True, eq=False)
class MlpCache:
    x: Matrix
    z_hidden: Matrix
    mask: Optional[Matrix]
    a_dropped: Matrix


# -- parameter containers ---------------------------------------------------

def named_params(obj, prefix: str = "") -> dict:
    """Flatten a (nested) parameter dataclass into ``{"enc1.W_f": array, ...}``."""
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if isinstance(value, np.ndarray):
            out[key] = value
        elif dataclasses.is_dataclass(value):
            out.update(named_params(value, key + "."))
    return out


def replace_params(obj, values: dict, prefix: str = ""):
    """Return a copy of ``obj`` with the arrays named in ``values`` swapped in."""
    changes = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if isinstance(value, np.ndarray):
            if key in values:
                changes[f.name] = values[key]
        elif dataclasses.is_dataclass(value):
            changes[f.name] = replace_params(value, values, key + ".")
    return dataclasses.replace(obj, **changes)


def map_params(fn: Callable, obj):
    return replace_params(obj, {k: fn(v) for k, v in named_params(obj).items()})


def zeros_like_params(obj):
    return map_params(np.zeros_like, obj)


def count_params(obj) -> int:
    return sum(v.size for v in named_params(obj).values())


# -- initialization ---------------------------------------------------------

def init_lstm(rng: RngStream, input_dim: int, hidden_dim: int, forget_bias: float = 1.0) -> LstmParams:
    fan_in = input_dim + hidden_dim
    blocks = {name: uniform_init(rng.child(name), hidden_dim, fan_in, fan_in)
              for name in ("W_f", "W_i", "W_g", "W_o")}
    return LstmParams(
        **blocks,
        b_f=np.full((hidden_dim, 1), forget_bias),
        b_i=np.zeros((hidden_dim, 1)),
        b_g=np.zeros((hidden_dim, 1)),
        b_o=np.zeros((hidden_dim, 1)),
    )


def init_mlp(rng: RngStream, input_dim: int, hidden_dim: int, n_classes: int) -> MlpParams:
    return MlpParams(
        W_hidden=uniform_init(rng.child("W_hidden"), hidden_dim, input_dim, input_dim),
        b_hidden=np.zeros((hidden_dim, 1)),
        W_out=uniform_init(rng.child("W_out"), n_classes, hidden_dim, hidden_dim),
        b_out=np.zeros((n_classes, 1)),
    )


# -- LSTM -------------------------------------------------------------------

def lstm_step(p: LstmParams, u: Matrix, prev: LstmState):
    if u.ndim != 2 or u.shape[0] != p.input_dim:
        raise ShapeError(f"LSTM input has shape {u.shape}, expected ({p.input_dim}, B)")
    if prev.h.shape != (p.hidden_dim, u.shape[1]):
        raise ShapeError(f"LSTM state has shape {prev.h.shape}, expected ({p.hidden_dim}, {u.shape[1]})")
    z = np.vstack([u, prev.h])
    f = sigmoid(matmul(p.W_f, z) + p.b_f)
    i = sigmoid(matmul(p.W_i, z) + p.b_i)
    g = np.tanh(matmul(p.W_g, z) + p.b_g)
    o = sigmoid(matmul(p.W_o, z) + p.b_o)
    c = f * prev.c + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return LstmState(h, c), LstmStepCache(z, f, i, g, o, prev.c, tanh_c)


def lstm_step_backward(p: LstmParams, cache: LstmStepCache, dh: Matrix, dc: Matrix, grads: dict):
    """Backpropagate one step; accumulates parameter gradients into ``grads``.

    Returns ``(du, dh_prev, dc_prev)``.
    """
    do = dh * cache.tanh_c
    dc_total = dc + dh * cache.o * (1.0 - cache.tanh_c ** 2)
    df = dc_total * cache.c_prev
    di = dc_total * cache.g
    dg = dc_total * cache.i
    dc_prev = dc_total * cache.f

    da = {
        "f": df * cache.f * (1.0 - cache.f),
        "i": di * cache.i * (1.0 - cache.i),
        "g": dg * (1.0 - cache.g ** 2),
        "o": do * cache.o * (1.0 - cache.o),
    }
    dz = np.zeros_like(cache.z)
    for gate, d in da.items():
        grads[f"W_{gate}"] += d @ cache.z.T
        grads[f"b_{gate}"] += d.sum(axis=1, keepdims=True)
        dz += getattr(p, f"W_{gate}").T @ d
    n_in = p.input_dim
    return dz[:n_in], dz[n_in:], dc_prev


def lstm_grad_buffers(p: LstmParams) -> dict:
    return {k: np.zeros_like(v) for k, v in named_params(p).items()}


def lstm_forward(p: LstmParams, inputs: list, initial: Optional[LstmState] = None):
    """Run the cell over a sequence of ``input_dim x B`` inputs.

    Returns ``(states, tape)`` with one state and one tape entry per step.
    """
    batch = inputs[0].shape[1] if inputs else 1
    state = initial if initial is not None else LstmState.zeros(p.hidden_dim, batch)
    tape = TapeCache(params=p)
    states = []
    for u in inputs:
        state, cache = lstm_step(p, u, state)
        tape.steps.append(cache)
        states.append(state)
    return states, tape


def lstm_backward(p: LstmParams, tape: TapeCache, upstream_grads: list):
    """Exact BPTT through a tape from :func:`lstm_forward`.

    ``upstream_grads[t]`` is dLoss/dh_t from outside the recurrence. Returns
    ``(param_grads, input_grads, dh0, dc0)``.
    """
    if tape.params is not p:
        raise ProtocolError("tape was recorded with different LSTM parameters")
    if len(upstream_grads) != len(tape.steps):
        raise ProtocolError(f"{len(upstream_grads)} upstream gradients for a tape of {len(tape.steps)} steps")
    grads = lstm_grad_buffers(p)
    input_grads = [None] * len(tape.steps)
    if not tape.steps:
        return LstmParams(**grads), input_grads, None, None
    dh_next = np.zeros_like(tape.steps[0].c_prev)
    dc_next = np.zeros_like(dh_next)
    for t in reversed(range(len(tape.steps))):
        du, dh_next, dc_next = lstm_step_backward(p, tape.steps[t], upstream_grads[t] + dh_next, dc_next, grads)
        input_grads[t] = du
    return LstmParams(**grads), input_grads, dh_next, dc_next


# -- dropout and MLP head ---------------------------------------------------

def apply_dropout(x: Matrix, rate: float, rng: RngStream):
    """Inverted dropout: survivors are scaled by 1/(1 - rate). Returns ``(output, mask)``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        mask = np.ones_like(x)
    else:
        mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def mlp_forward(p: MlpParams, x: Matrix, train_mode: bool = False, dropout: DropoutSpec = NO_DROPOUT):
    """ELU hidden layer, optional inverted dropout, softmax output.

    ``x`` is ``input_dim x B``; the result is a ``B x n_classes`` probability
    array (one row per record) and the cache for :func:`mlp_backward`.
    """
    z_hidden = matmul(p.W_hidden, x) + p.b_hidden
    a = elu(z_hidden)
    mask = None
    if train_mode and dropout.rate > 0.0:
        if dropout.rng is None:
            raise ConfigError("dropout in train mode needs a random stream")
        a, mask = apply_dropout(a, dropout.rate, dropout.rng)
    logits = matmul(p.W_out, a) + p.b_out
    return softmax_rows(logits.T), MlpCache(x, z_hidden, mask, a)


def mlp_backward(p: MlpParams, cache: MlpCache, dlogits: Matrix):
    """``dlogits`` is ``B x n_classes``. Returns ``(MlpParams gradients, dx)``."""
    d_out = dlogits.T
    dW_out = d_out @ cache.a_dropped.T
    db_out = d_out.sum(axis=1, keepdims=True)
    da = p.W_out.T @ d_out
    if cache.mask is not None:
        da = da * cache.mask
    dz = da * elu_grad(cache.z_hidden)
    dW_hidden = dz @ cache.x.T
    db_hidden = dz.sum(axis=1, keepdims=True)
    dx = p.W_hidden.T @ dz
    return MlpParams(dW_hidden, db_hidden, dW_out, db_out), dx


# -- finite-difference check ------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    group_errors: dict
    failures: int
    checked: int

    @property
    def passed(self) -> bool:
        return self.failures == 0


def check_gradients(loss_fn: Callable, params, analytic, eps: float = 1e-5,
                    rel_tol: float = 1e-4, abs_tol: float = 1e-9) -> GradCheckReport:
    """Compare ``analytic`` gradients against central differences of ``loss_fn(params)``.

    An entry passes when ``|a - b| <= max(rel_tol * max(|a|, |b|, 1e-8), abs_tol)``.
    """
    flat = named_params(params)
    grads = named_params(analytic)
    group_errors = {}
    failures = 0
    checked = 0
    for name, value in flat.items():
        worst = 0.0
        for idx in np.ndindex(value.shape):
            plus = value.copy()
            plus[idx] += eps
            minus = value.copy()
            minus[idx] -= eps
            numeric = (loss_fn(replace_params(params, {name: plus}))
                       - loss_fn(replace_params(params, {name: minus}))) / (2.0 * eps)
            a = grads[name][idx]
            diff = abs(a - numeric)
            rel = diff / max(abs(a), abs(numeric), 1e-8)
            # round-off floor: entries within abs_tol do not count towards the worst ratio
            if diff > abs_tol:
                worst = max(worst, rel)
            if diff > max(rel_tol * max(abs(a), abs(numeric), 1e-8), abs_tol):
                failures += 1
                logger.debug(f"gradient mismatch at {name}{idx}: analytic {a}, numeric {numeric}")
            checked += 1
        group_errors[name] = worst
    max_rel = max(group_errors.values(), default=0.0)
    return GradCheckReport(max_rel, group_errors, failures, checked)
