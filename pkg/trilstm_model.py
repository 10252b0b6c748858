"""TRI-LSTM: two cross-fed encoder LSTMs, two relationship heads, a fusion LSTM.

Step schedule for t = 1..T (the encoders would otherwise need each other's
current state, so encoder 1 reads encoder 2's previous state)::

    u1_t = [W_e1 x1_t ; h2_{t-1}]          -> enc1   -> h1_t
    u2_t = [W_e2 x2_t ; h1_t]              -> enc2   -> h2_t
    head1(h1_t), head2(h2_t)                  distributions over parent classes
    u3_t = [W_e3 [x1_t; x2_t] ; h1_t ; h2_t] -> fusion -> h3_t

and the diagnosis is ``final_head(h3_T)`` over [Yes, No].
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from biomarker_data import (
    NULL_TOKEN,
    SCHEMA,
    TOKEN_DIM,
    BiomarkerSchema,
    PatientRecord,
    encode_tokens,
    partition_halves,
    partition_halves_batch,
)
from errors import ConfigError, ProtocolError, ShapeError
from linalg_core import Matrix, RngStream, matmul, uniform_init
from nn_layers import (
    NO_DROPOUT,
    DropoutSpec,
    LstmParams,
    LstmState,
    MlpParams,
    init_lstm,
    init_mlp,
    lstm_grad_buffers,
    lstm_step,
    lstm_step_backward,
    mlp_backward,
    mlp_forward,
)
from optimizer import cross_entropy_rows

YES, NO = 0, 1
DECISIONS = ("Yes", "No")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 16
    hidden_dim: int = 32
    head_hidden: int = 32
    n_classes: int = 21
    baseline_hidden: Optional[int] = None

    def __post_init__(self):
        for name in ("embed_dim", "hidden_dim", "head_hidden", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.baseline_hidden is not None and self.baseline_hidden < 1:
            raise ConfigError(f"baseline_hidden must be positive, got {self.baseline_hidden}")


@dataclass(frozen=True, eq=False)
class TriLstmParams:
    W_e1: Matrix
    W_e2: Matrix
    W_e3: Matrix
    enc1: LstmParams
    enc2: LstmParams
    fusion: LstmParams
    head1: MlpParams
    head2: MlpParams
    final_head: MlpParams

    def __post_init__(self):
        embed = self.W_e1.shape[0]
        if self.W_e2.shape[0] != embed or self.W_e3.shape[0] != embed:
            raise ShapeError("the three input embeddings must share one embedding size")
        if self.head1.n_classes != self.head2.n_classes:
            raise ShapeError("both relationship heads must score the same parent classes")
        if self.final_head.n_classes != 2:
            raise ShapeError("the final head must score exactly two decisions")

    @property
    def embed_dim(self) -> int:
        return self.W_e1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.enc1.hidden_dim


@dataclass(eq=False)
class TriLstmOutput:
    h1_traj: list
    h2_traj: list
    h3_traj: list
    head1_dists: np.ndarray   # T x B x K
    head2_dists: np.ndarray
    final_dist: np.ndarray    # B x 2, columns [Yes, No]


@dataclass(eq=False)
class TriLstmTape:
    params: TriLstmParams
    stream1: np.ndarray
    stream2: np.ndarray
    enc1_steps: list = field(default_factory=list)
    enc2_steps: list = field(default_factory=list)
    fusion_steps: list = field(default_factory=list)
    head1_caches: list = field(default_factory=list)
    head2_caches: list = field(default_factory=list)
    final_cache: object = None
    consumed: bool = False


@dataclass(eq=False)
class LossBreakdown:
    loss1: float
    loss2: float
    loss_final: float
    lam: float
    alpha: float
    total: float
    final_weight: float = 1.0
    # dLoss/dlogits for each head, consumed by backward()
    seeds: Optional[dict] = field(default=None, repr=False)


@dataclass(frozen=True)
class Prediction:
    decision: str
    probability: float
    parent_dists: dict


def init_params(cfg: ModelConfig, rng: RngStream) -> TriLstmParams:
    e, h = cfg.embed_dim, cfg.hidden_dim
    return TriLstmParams(
        W_e1=uniform_init(rng.child("W_e1"), e, TOKEN_DIM, TOKEN_DIM),
        W_e2=uniform_init(rng.child("W_e2"), e, TOKEN_DIM, TOKEN_DIM),
        W_e3=uniform_init(rng.child("W_e3"), e, 2 * TOKEN_DIM, 2 * TOKEN_DIM),
        enc1=init_lstm(rng.child("enc1"), e + h, h),
        enc2=init_lstm(rng.child("enc2"), e + h, h),
        fusion=init_lstm(rng.child("fusion"), e + 2 * h, h),
        head1=init_mlp(rng.child("head1"), h, cfg.head_hidden, cfg.n_classes),
        head2=init_mlp(rng.child("head2"), h, cfg.head_hidden, cfg.n_classes),
        final_head=init_mlp(rng.child("final_head"), h, cfg.head_hidden, 2),
    )


def forward(p: TriLstmParams, stream1: np.ndarray, stream2: np.ndarray,
            train_mode: bool = False, dropout_rate: float = 0.0, rng: Optional[RngStream] = None):
    """Run the three LSTMs over token streams of shape ``T x TOKEN_DIM x B``."""
    if stream1.shape != stream2.shape:
        raise ProtocolError(f"stream shapes differ after padding: {stream1.shape} vs {stream2.shape}")
    steps, _, batch = stream1.shape
    hd = p.hidden_dim
    tape = TriLstmTape(p, stream1, stream2)
    s1 = LstmState.zeros(hd, batch)
    s2 = LstmState.zeros(hd, batch)
    s3 = LstmState.zeros(hd, batch)
    h1_traj, h2_traj, h3_traj = [], [], []
    d1, d2 = [], []

    def _dropout(label):
        if not train_mode or dropout_rate == 0.0:
            return NO_DROPOUT
        if rng is None:
            raise ConfigError("dropout in train mode needs a random stream")
        return DropoutSpec(dropout_rate, rng.child(label))

    for t in range(steps):
        x1, x2 = stream1[t], stream2[t]
        s1, c1 = lstm_step(p.enc1, np.vstack([matmul(p.W_e1, x1), s2.h]), s1)
        s2, c2 = lstm_step(p.enc2, np.vstack([matmul(p.W_e2, x2), s1.h]), s2)
        prob1, m1 = mlp_forward(p.head1, s1.h, train_mode, _dropout(f"head1-{t}"))
        prob2, m2 = mlp_forward(p.head2, s2.h, train_mode, _dropout(f"head2-{t}"))
        x_bar = np.vstack([x1, x2])
        s3, c3 = lstm_step(p.fusion, np.vstack([matmul(p.W_e3, x_bar), s1.h, s2.h]), s3)
        tape.enc1_steps.append(c1)
        tape.enc2_steps.append(c2)
        tape.fusion_steps.append(c3)
        tape.head1_caches.append(m1)
        tape.head2_caches.append(m2)
        h1_traj.append(s1.h)
        h2_traj.append(s2.h)
        h3_traj.append(s3.h)
        d1.append(prob1)
        d2.append(prob2)

    final, tape.final_cache = mlp_forward(p.final_head, s3.h, train_mode, _dropout("final"))
    out = TriLstmOutput(h1_traj, h2_traj, h3_traj, np.stack(d1), np.stack(d2), final)
    return out, tape


def head_targets(index: np.ndarray, schema: BiomarkerSchema = SCHEMA) -> np.ndarray:
    """Ground-truth parent class per stream position; -1 marks padding."""
    # NULL_TOKEN == len(schema), so the appended -1 is the padding target
    parents = np.array(schema.ground_truth_parents() + (-1,))
    return parents[index]


def _masked_head_loss(dists: np.ndarray, targets: np.ndarray):
    """Mean over the batch of each record's mean cross-entropy over non-padded steps."""
    steps, batch, n_classes = dists.shape
    mask = targets >= 0
    counts = np.maximum(mask.sum(axis=0), 1)
    safe = np.where(mask, targets, 0)
    losses, grads = cross_entropy_rows(dists.reshape(-1, n_classes), safe.reshape(-1))
    weights = mask / counts / batch
    loss = float(np.sum(losses.reshape(steps, batch) * weights))
    return loss, grads.reshape(dists.shape) * weights[:, :, None]


def compute_loss(out: TriLstmOutput, targets1: np.ndarray, targets2: np.ndarray, labels,
                 lam: float = 0.5, alpha: float = 5.0, final_weight: float = 1.0) -> LossBreakdown:
    """``total = lam * loss1 + alpha * loss2 + final_weight * loss_final``.

    Head targets are ``T x B`` class indices with -1 on padded steps; ``labels``
    are 1 for glaucoma (decision Yes) and 0 for normal.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    loss1, g1 = _masked_head_loss(out.head1_dists, np.asarray(targets1))
    loss2, g2 = _masked_head_loss(out.head2_dists, np.asarray(targets2))
    final_losses, gf = cross_entropy_rows(out.final_dist, decision_targets(labels))
    batch = len(labels)
    loss_final = float(final_losses.mean())
    total = lam * loss1 + alpha * loss2 + final_weight * loss_final
    seeds = {"head1": lam * g1, "head2": alpha * g2, "final": final_weight * gf / batch}
    return LossBreakdown(loss1, loss2, loss_final, lam, alpha, total, final_weight, seeds)


def decision_targets(labels) -> np.ndarray:
    return np.where(np.asarray(labels) == 1, YES, NO)


def backward(p: TriLstmParams, tape: TriLstmTape, loss: LossBreakdown) -> TriLstmParams:
    """Exact gradient of ``loss.total`` w.r.t. every parameter, through all cross-feed paths."""
    if tape.params is not p:
        raise ProtocolError("tape was recorded with different parameters")
    if tape.consumed:
        raise ProtocolError("tape has already been consumed by a backward pass")
    if loss.seeds is None:
        raise ProtocolError("loss breakdown carries no gradient seeds")
    tape.consumed = True
    steps = len(tape.enc1_steps)
    e, hd = p.embed_dim, p.hidden_dim
    batch = tape.stream1.shape[2]
    g_enc1, g_enc2, g_fus = lstm_grad_buffers(p.enc1), lstm_grad_buffers(p.enc2), lstm_grad_buffers(p.fusion)
    dW_e1, dW_e2, dW_e3 = np.zeros_like(p.W_e1), np.zeros_like(p.W_e2), np.zeros_like(p.W_e3)
    head1_grads, head2_grads = [], []

    final_grads, dh3 = mlp_backward(p.final_head, tape.final_cache, loss.seeds["final"])
    zeros = np.zeros((hd, batch))
    dc1, dc2, dc3 = zeros, zeros, zeros
    dh1_rec, dh2_rec = zeros, zeros
    # h2_t feeds u1_{t+1}; carried backwards separately from enc2's own recurrence
    dh2_from_enc1 = zeros

    for t in reversed(range(steps)):
        du3, dh3, dc3 = lstm_step_backward(p.fusion, tape.fusion_steps[t], dh3, dc3, g_fus)
        x_bar = np.vstack([tape.stream1[t], tape.stream2[t]])
        dW_e3 += du3[:e] @ x_bar.T
        dh1_from_fusion = du3[e:e + hd]
        dh2_from_fusion = du3[e + hd:]

        hg2, dh2_head = mlp_backward(p.head2, tape.head2_caches[t], loss.seeds["head2"][t])
        head2_grads.append(hg2)
        dh2 = dh2_rec + dh2_from_enc1 + dh2_from_fusion + dh2_head
        du2, dh2_rec, dc2 = lstm_step_backward(p.enc2, tape.enc2_steps[t], dh2, dc2, g_enc2)
        dW_e2 += du2[:e] @ tape.stream2[t].T
        dh1_from_enc2 = du2[e:]

        hg1, dh1_head = mlp_backward(p.head1, tape.head1_caches[t], loss.seeds["head1"][t])
        head1_grads.append(hg1)
        dh1 = dh1_rec + dh1_from_fusion + dh1_from_enc2 + dh1_head
        du1, dh1_rec, dc1 = lstm_step_backward(p.enc1, tape.enc1_steps[t], dh1, dc1, g_enc1)
        dW_e1 += du1[:e] @ tape.stream1[t].T
        dh2_from_enc1 = du1[e:]

    return TriLstmParams(
        W_e1=dW_e1, W_e2=dW_e2, W_e3=dW_e3,
        enc1=LstmParams(**g_enc1), enc2=LstmParams(**g_enc2), fusion=LstmParams(**g_fus),
        head1=_sum_mlp(head1_grads, p.head1), head2=_sum_mlp(head2_grads, p.head2),
        final_head=final_grads,
    )


def _sum_mlp(grads: list, like: MlpParams) -> MlpParams:
    if not grads:
        return MlpParams(*(np.zeros_like(getattr(like, n)) for n in ("W_hidden", "b_hidden", "W_out", "b_out")))
    return MlpParams(
        sum(g.W_hidden for g in grads), sum(g.b_hidden for g in grads),
        sum(g.W_out for g in grads), sum(g.b_out for g in grads),
    )


# -- batch helpers shared with the training harness ---------------------------

@dataclass(frozen=True, eq=False)
class EncodedBatch:
    stream1: np.ndarray
    stream2: np.ndarray
    index1: np.ndarray
    index2: np.ndarray
    targets1: np.ndarray
    targets2: np.ndarray


def encode_batch(values: np.ndarray, permutations: np.ndarray, schema: BiomarkerSchema = SCHEMA) -> EncodedBatch:
    index1, index2 = partition_halves_batch(permutations)
    return EncodedBatch(
        encode_tokens(values, index1), encode_tokens(values, index2), index1, index2,
        head_targets(index1, schema), head_targets(index2, schema),
    )


def batch_loss(p: TriLstmParams, values, permutations, labels, lam=0.5, alpha=5.0, final_weight=1.0,
               dropout_rate=0.0, rng: Optional[RngStream] = None):
    """Forward, loss and backward for one mini-batch. Returns ``(LossBreakdown, grads)``."""
    enc = encode_batch(values, permutations)
    out, tape = forward(p, enc.stream1, enc.stream2, train_mode=dropout_rate > 0.0,
                        dropout_rate=dropout_rate, rng=rng)
    loss = compute_loss(out, enc.targets1, enc.targets2, labels, lam, alpha, final_weight)
    return loss, backward(p, tape, loss)


def positive_scores(p: TriLstmParams, values, permutations) -> np.ndarray:
    """P(Yes) per record with dropout disabled."""
    enc = encode_batch(values, permutations)
    out, _ = forward(p, enc.stream1, enc.stream2)
    return out.final_dist[:, YES]


def parent_distributions(out: TriLstmOutput, enc: EncodedBatch, n_biomarkers: int) -> np.ndarray:
    """``B x n_biomarkers x K``: each biomarker's head distribution from the stream that carried it."""
    steps, batch, n_classes = out.head1_dists.shape
    dists = np.zeros((batch, n_biomarkers, n_classes))
    cols = np.arange(batch)
    for t in range(steps):
        for index, head in ((enc.index1[t], out.head1_dists[t]), (enc.index2[t], out.head2_dists[t])):
            real = index != NULL_TOKEN
            dists[cols[real], index[real]] = head[real]
    return dists


def decide(p_yes) -> str:
    """Yes only when P(Yes) strictly exceeds P(No); an exact tie is No."""
    return DECISIONS[YES] if p_yes > 0.5 else DECISIONS[NO]


def predict(p: TriLstmParams, record: PatientRecord, schema: BiomarkerSchema = SCHEMA,
            permutation=None) -> Prediction:
    """Diagnose one normalized record under a biomarker presentation order."""
    if permutation is None:
        permutation = range(len(schema))
    first, second = partition_halves(schema, permutation)
    perm = np.array(first + second)
    values = np.array([[
        [record.od[i], record.os[i], np.nan if record.ie[i] is None else record.ie[i]]
        for i in range(len(schema))
    ]])
    enc = encode_batch(values, perm.reshape(1, -1), schema)
    out, _ = forward(p, enc.stream1, enc.stream2)
    p_yes = float(out.final_dist[0, YES])
    dists = parent_distributions(out, enc, len(schema))[0]
    return Prediction(decide(p_yes), p_yes, {code: dists[i] for i, code in enumerate(schema.codes)})
