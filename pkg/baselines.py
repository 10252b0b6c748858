"""Plain RNN and single-LSTM classifiers over the full 17-token presentation order."""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from biomarker_data import TOKEN_DIM, encode_tokens
from errors import ConfigError, ProtocolError
from linalg_core import Matrix, RngStream, matmul, uniform_init
from nn_layers import (
    NO_DROPOUT,
    DropoutSpec,
    LstmParams,
    MlpParams,
    count_params,
    init_lstm,
    init_mlp,
    lstm_backward,
    lstm_forward,
    mlp_backward,
    mlp_forward,
)
from optimizer import cross_entropy_rows
from trilstm_model import ModelConfig, YES, decision_targets, init_params

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RnnParams:
    W_xh: Matrix
    W_hh: Matrix
    b_h: Matrix
    final_head: MlpParams


@dataclass(frozen=True, eq=False)
class SingleLstmParams:
    W_e: Matrix
    cell: LstmParams
    final_head: MlpParams


@dataclass(eq=False)
class RnnTape:
    params: RnnParams
    inputs: np.ndarray
    hidden: list
    final_cache: object


@dataclass(eq=False)
class LstmBaselineTape:
    params: SingleLstmParams
    inputs: np.ndarray
    cell_tape: object
    final_cache: object


def _head_size(hidden: int, head_hidden: int) -> int:
    return head_hidden * hidden + head_hidden + 2 * head_hidden + 2


def rnn_param_count(hidden: int, head_hidden: int) -> int:
    return hidden * TOKEN_DIM + hidden * hidden + hidden + _head_size(hidden, head_hidden)


def lstm_param_count(embed: int, hidden: int, head_hidden: int) -> int:
    return embed * TOKEN_DIM + 4 * hidden * (embed + hidden) + 4 * hidden + _head_size(hidden, head_hidden)


def parity_hidden(kind: str, cfg: ModelConfig, limit: int = 1024) -> int:
    """Baseline hidden size whose parameter count is closest to TRI-LSTM's."""
    if cfg.baseline_hidden is not None:
        return cfg.baseline_hidden
    target = count_params(init_params(cfg, RngStream(0)))
    counters = {
        "rnn": lambda h: rnn_param_count(h, cfg.head_hidden),
        "lstm": lambda h: lstm_param_count(cfg.embed_dim, h, cfg.head_hidden),
    }
    if kind not in counters:
        raise ConfigError(f"unknown baseline kind {kind!r}")
    count = counters[kind]
    best = min(range(1, limit + 1), key=lambda h: (abs(count(h) - target), h))
    logger.debug(f"{kind} baseline hidden size {best}: {count(best)} parameters vs {target}")
    return best


def init_rnn(cfg: ModelConfig, rng: RngStream) -> RnnParams:
    h = parity_hidden("rnn", cfg)
    return RnnParams(
        W_xh=uniform_init(rng.child("W_xh"), h, TOKEN_DIM, TOKEN_DIM + h),
        W_hh=uniform_init(rng.child("W_hh"), h, h, TOKEN_DIM + h),
        b_h=np.zeros((h, 1)),
        final_head=init_mlp(rng.child("final_head"), h, cfg.head_hidden, 2),
    )


def init_lstm_baseline(cfg: ModelConfig, rng: RngStream) -> SingleLstmParams:
    h = parity_hidden("lstm", cfg)
    return SingleLstmParams(
        W_e=uniform_init(rng.child("W_e"), cfg.embed_dim, TOKEN_DIM, TOKEN_DIM),
        cell=init_lstm(rng.child("cell"), cfg.embed_dim, h),
        final_head=init_mlp(rng.child("final_head"), h, cfg.head_hidden, 2),
    )


def _dropout(train_mode: bool, rate: float, rng: Optional[RngStream]) -> DropoutSpec:
    if not train_mode or rate == 0.0:
        return NO_DROPOUT
    if rng is None:
        raise ConfigError("dropout in train mode needs a random stream")
    return DropoutSpec(rate, rng.child("final"))


# -- RNN --------------------------------------------------------------------

def rnn_forward(p: RnnParams, inputs: np.ndarray, train_mode: bool = False,
                dropout_rate: float = 0.0, rng: Optional[RngStream] = None):
    """``h_t = tanh(W_xh x_t + W_hh h_{t-1} + b_h)`` over ``T x D x B`` tokens; classify from h_T."""
    steps, _, batch = inputs.shape
    h = np.zeros((p.W_hh.shape[0], batch))
    hidden = [h]
    for t in range(steps):
        h = np.tanh(matmul(p.W_xh, inputs[t]) + matmul(p.W_hh, h) + p.b_h)
        hidden.append(h)
    probs, cache = mlp_forward(p.final_head, h, train_mode, _dropout(train_mode, dropout_rate, rng))
    return probs, RnnTape(p, inputs, hidden, cache)


def rnn_backward(p: RnnParams, tape: RnnTape, dlogits: Matrix) -> RnnParams:
    if tape.params is not p:
        raise ProtocolError("tape was recorded with different RNN parameters")
    head_grads, dh = mlp_backward(p.final_head, tape.final_cache, dlogits)
    dW_xh, dW_hh, db_h = np.zeros_like(p.W_xh), np.zeros_like(p.W_hh), np.zeros_like(p.b_h)
    for t in reversed(range(tape.inputs.shape[0])):
        h, h_prev = tape.hidden[t + 1], tape.hidden[t]
        da = dh * (1.0 - h ** 2)
        dW_xh += da @ tape.inputs[t].T
        dW_hh += da @ h_prev.T
        db_h += da.sum(axis=1, keepdims=True)
        dh = p.W_hh.T @ da
    return RnnParams(dW_xh, dW_hh, db_h, head_grads)


# -- single LSTM ------------------------------------------------------------

def lstm_baseline_forward(p: SingleLstmParams, inputs: np.ndarray, train_mode: bool = False,
                          dropout_rate: float = 0.0, rng: Optional[RngStream] = None):
    embedded = [matmul(p.W_e, x) for x in inputs]
    states, cell_tape = lstm_forward(p.cell, embedded)
    probs, cache = mlp_forward(p.final_head, states[-1].h, train_mode, _dropout(train_mode, dropout_rate, rng))
    return probs, LstmBaselineTape(p, inputs, cell_tape, cache)


def lstm_baseline_backward(p: SingleLstmParams, tape: LstmBaselineTape, dlogits: Matrix) -> SingleLstmParams:
    if tape.params is not p:
        raise ProtocolError("tape was recorded with different LSTM parameters")
    head_grads, dh_last = mlp_backward(p.final_head, tape.final_cache, dlogits)
    upstream = [np.zeros_like(dh_last) for _ in tape.cell_tape.steps]
    upstream[-1] = dh_last
    cell_grads, input_grads, _, _ = lstm_backward(p.cell, tape.cell_tape, upstream)
    dW_e = sum(du @ x.T for du, x in zip(input_grads, tape.inputs))
    return SingleLstmParams(dW_e, cell_grads, head_grads)


# -- batch helpers shared with the training harness ---------------------------

def sequence_tokens(values: np.ndarray, permutations: np.ndarray) -> np.ndarray:
    """All 17 biomarkers in presentation order: ``17 x TOKEN_DIM x B``."""
    return encode_tokens(values, permutations.T)


def _classification_loss(probs: Matrix, labels):
    losses, dlogits = cross_entropy_rows(probs, decision_targets(labels))
    return float(losses.mean()), dlogits / len(losses)


def rnn_batch_loss(p: RnnParams, values, permutations, labels, dropout_rate=0.0, rng=None):
    probs, tape = rnn_forward(p, sequence_tokens(values, permutations), dropout_rate > 0.0, dropout_rate, rng)
    loss, dlogits = _classification_loss(probs, labels)
    return loss, rnn_backward(p, tape, dlogits)


def lstm_batch_loss(p: SingleLstmParams, values, permutations, labels, dropout_rate=0.0, rng=None):
    probs, tape = lstm_baseline_forward(p, sequence_tokens(values, permutations), dropout_rate > 0.0,
                                        dropout_rate, rng)
    loss, dlogits = _classification_loss(probs, labels)
    return loss, lstm_baseline_backward(p, tape, dlogits)


def rnn_scores(p: RnnParams, values, permutations) -> np.ndarray:
    probs, _ = rnn_forward(p, sequence_tokens(values, permutations))
    return probs[:, YES]


def lstm_scores(p: SingleLstmParams, values, permutations) -> np.ndarray:
    probs, _ = lstm_baseline_forward(p, sequence_tokens(values, permutations))
    return probs[:, YES]
