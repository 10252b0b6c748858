"""Training loop, classification metrics, repeated evaluation and the benchmark grid."""

import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

import baselines
import trilstm_model
from biomarker_data import (
    SCHEMA,
    BiomarkerSchema,
    Dataset,
    NormalizerStats,
    apply_normalizer,
    fit_normalizer,
    presentation_orders,
    shuffle_order_augment,
    split_75_25,
)
from checkpoint import load_checkpoint, restore_params, save_checkpoint
from errors import AucUndefinedError, CheckpointError, ConfigError, NumericError, TrainingError
from linalg_core import RngStream
from nn_layers import GradCheckReport, check_gradients, named_params
from optimizer import Optimizer, OptimizerConfig
from trilstm_model import ModelConfig

logger = logging.getLogger(__name__)

DECISION_THRESHOLD = 0.5


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    minibatch: int = 512
    dropout: float = 0.1
    lam: float = 0.5
    alpha: float = 5.0
    final_weight: float = 1.0
    shuffle_order: bool = True
    shuffle_copies: int = 4
    seed: int = 7
    eval_repeats: int = 10
    eval_order: str = "shuffled"
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=1e-2))
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.minibatch < 1:
            raise ConfigError(f"minibatch must be at least 1, got {self.minibatch}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 < self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in (0, 1], got {self.lam}")
        if not 1.0 <= self.alpha < 10.0:
            raise ConfigError(f"alpha must lie in [1, 10), got {self.alpha}")
        if not self.final_weight >= 0.0:
            raise ConfigError(f"final_weight must be non-negative, got {self.final_weight}")
        if self.shuffle_copies < 1:
            raise ConfigError(f"shuffle_copies must be at least 1, got {self.shuffle_copies}")
        if self.eval_repeats < 1:
            raise ConfigError(f"eval_repeats must be at least 1, got {self.eval_repeats}")
        if self.eval_order not in ("shuffled", "identity"):
            raise ConfigError(f"eval_order must be 'shuffled' or 'identity', got {self.eval_order!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


def config_from_dict(cls, data: dict):
    """Build a (nested) config dataclass from plain JSON data; unknown keys are an error.

    A nested object overrides only the keys it names; the rest keep the
    field's default.
    """
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for {cls.__name__}, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        if dataclasses.is_dataclass(ftype) and isinstance(value, dict):
            value = config_from_dict(ftype, {**_field_default(fields[name]), **value})
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"invalid {cls.__name__}: {e}") from None


def _field_default(f: dataclasses.Field) -> dict:
    if f.default_factory is not dataclasses.MISSING:
        return dataclasses.asdict(f.default_factory())
    if f.default is not dataclasses.MISSING and dataclasses.is_dataclass(f.default):
        return dataclasses.asdict(f.default)
    return {}


# -- model registry ---------------------------------------------------------

def _tri_loss(p, values, perms, labels, cfg: TrainConfig, rng):
    loss, grads = trilstm_model.batch_loss(p, values, perms, labels, cfg.lam, cfg.alpha, cfg.final_weight,
                                           cfg.dropout, rng)
    return loss.total, grads


def _rnn_loss(p, values, perms, labels, cfg: TrainConfig, rng):
    return baselines.rnn_batch_loss(p, values, perms, labels, cfg.dropout, rng)


def _lstm_loss(p, values, perms, labels, cfg: TrainConfig, rng):
    return baselines.lstm_batch_loss(p, values, perms, labels, cfg.dropout, rng)


@dataclass(frozen=True)
class ModelKind:
    name: str
    display: str
    init: Callable
    loss: Callable
    scores: Callable


MODEL_KINDS = {
    "lstm": ModelKind("lstm", "LSTM", baselines.init_lstm_baseline, _lstm_loss, baselines.lstm_scores),
    "rnn": ModelKind("rnn", "RNN", baselines.init_rnn, _rnn_loss, baselines.rnn_scores),
    "tri-lstm": ModelKind("tri-lstm", "TRI-LSTM", trilstm_model.init_params, _tri_loss,
                          trilstm_model.positive_scores),
}


def model_kind(name: str) -> ModelKind:
    if name not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {name!r}; expected one of {sorted(MODEL_KINDS)}")
    return MODEL_KINDS[name]


# -- training ---------------------------------------------------------------

@dataclass(eq=False)
class TrainResult:
    model_kind: str
    params: object
    loss_trace: list


def _all_finite(grads) -> bool:
    return all(np.all(np.isfinite(g)) for g in named_params(grads).values())


def train(kind_name: str, train_data: Dataset, cfg: TrainConfig) -> TrainResult:
    """
    Mini-batch training with seeded record order and optional presentation-order augmentation.
    Args:
        kind_name: "lstm", "rnn" or "tri-lstm".
        train_data (Dataset): normalized training records.
        cfg (TrainConfig): schedule, loss weights, optimizer, model sizes and seed.
    Returns:
        TrainResult: final parameters and the mean loss of every epoch.
    Raises:
        TrainingError: a non-finite loss, gradient or update, naming epoch and batch.
    """
    kind = model_kind(kind_name)
    if not train_data.normalized:
        raise ConfigError("training data must be normalized first")
    if not train_data.records:
        raise ConfigError("training data is empty")
    root = RngStream(cfg.seed).child(f"train/{kind.name}")
    params = kind.init(cfg.model, root.child("init"))
    opt = Optimizer(cfg.optimizer)
    values = train_data.values()
    labels = train_data.labels()
    copies = cfg.shuffle_copies if cfg.shuffle_order else 1
    trace = []
    for epoch in range(1, cfg.epochs + 1):
        view = shuffle_order_augment(train_data, copies, root.child(f"epoch-{epoch}/order"), cfg.shuffle_order)
        order = root.child(f"epoch-{epoch}/batches").permutation(len(view))
        batch_size = min(cfg.minibatch, len(view))
        running = 0.0
        for b, start in enumerate(range(0, len(view), batch_size)):
            rows = order[start:start + batch_size]
            idx = view.record_index[rows]
            loss, grads = kind.loss(params, values[idx], view.permutations[rows], labels[idx], cfg,
                                    root.child(f"epoch-{epoch}/batch-{b}/dropout"))
            if not math.isfinite(loss) or not _all_finite(grads):
                raise TrainingError(f"non-finite loss {loss} while training {kind.display}", epoch, b)
            try:
                params = opt.step(params, grads)
            except NumericError as e:
                raise TrainingError(str(e), epoch, b) from e
            running += loss * len(rows)
            logger.debug(f"[{kind.display}] epoch {epoch} batch {b} loss {loss:.5f}")
        trace.append(running / len(view))
        logger.info(f"[{kind.display}] epoch {epoch}/{cfg.epochs} loss {trace[-1]:.4f}")
    return TrainResult(kind.name, params, trace)


# -- metrics ----------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    auc: Optional[float]
    recall: Optional[float]
    specificity: Optional[float]
    accuracy: float
    tp: float
    fn: float
    tn: float
    fp: float
    model: str = ""
    order_shuffled: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "model": self.model, "order_shuffled": self.order_shuffled, "seed": self.seed,
            "auc": self.auc, "recall": self.recall, "specificity": self.specificity,
            "accuracy": self.accuracy, "tp": self.tp, "fn": self.fn, "tn": self.tn, "fp": self.fp,
        }


def tied_rank(x) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    _, first, counts = np.unique(x[order], return_index=True, return_counts=True)
    ranks = np.empty(len(x))
    ranks[order] = np.repeat(first + (counts + 1) / 2.0, counts)
    return ranks


def rank_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(positive outscores negative), ties counted half."""
    labels = np.asarray(labels)
    positives = labels == 1
    n_pos = int(positives.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise AucUndefinedError("AUC needs at least one positive and one negative record")
    ranks = tied_rank(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def compute_metrics(scores, labels, model: str = "", order_shuffled: bool = False, seed: int = 0) -> MetricsReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.size == 0 or scores.shape != labels.shape:
        raise ConfigError(f"need matching, non-empty scores and labels, got {scores.shape} and {labels.shape}")
    predicted = scores > DECISION_THRESHOLD
    tp = int(np.sum(predicted & (labels == 1)))
    fn = int(np.sum(~predicted & (labels == 1)))
    tn = int(np.sum(~predicted & (labels == 0)))
    fp = int(np.sum(predicted & (labels == 0)))
    recall = tp / (tp + fn) if tp + fn else None
    specificity = tn / (tn + fp) if tn + fp else None
    accuracy = (tp + tn) / len(labels)
    report = MetricsReport(None, recall, specificity, accuracy, tp, fn, tn, fp, model, order_shuffled, seed)
    if tp + fn == 0 or tn + fp == 0:
        raise AucUndefinedError("AUC is undefined for single-class labels", partial=report)
    return replace(report, auc=rank_auc(scores, labels))


def average_reports(reports: list) -> MetricsReport:
    def mean(name):
        values = [getattr(r, name) for r in reports]
        return None if any(v is None for v in values) else float(np.mean(values))

    first = reports[0]
    return MetricsReport(
        mean("auc"), mean("recall"), mean("specificity"), mean("accuracy"),
        mean("tp"), mean("fn"), mean("tn"), mean("fp"),
        first.model, first.order_shuffled, first.seed,
    )


def roc_points(scores, labels) -> list:
    """Raw (fpr, tpr) points, one per distinct threshold, from (0, 0) to (1, 1)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise AucUndefinedError("ROC needs both classes")
    points = [(0.0, 0.0)]
    for threshold in np.unique(scores)[::-1]:
        above = scores >= threshold
        points.append((float(np.sum(above & (labels == 0)) / n_neg), float(np.sum(above & (labels == 1)) / n_pos)))
    return points


def pass_scores(kind_name: str, params, test: Dataset, cfg: TrainConfig) -> list:
    """P(Yes) per record for each evaluation pass; params are only read."""
    kind = model_kind(kind_name)
    if not test.records:
        raise ConfigError("test set is empty")
    values = test.values()
    root = RngStream(cfg.seed).child("eval")
    passes = []
    for r in range(cfg.eval_repeats):
        rng = root.child(f"pass-{r}") if cfg.eval_order == "shuffled" else None
        perms = presentation_orders(len(test.records), len(test.schema), rng)
        passes.append(kind.scores(params, values, perms))
    return passes


def _metrics_or_partial(scores, labels, model: str, order_shuffled: bool, seed: int) -> MetricsReport:
    try:
        return compute_metrics(scores, labels, model, order_shuffled, seed)
    except AucUndefinedError as e:
        return e.partial


def summarize_passes(passes: list, labels, model: str = "", order_shuffled: bool = False,
                     seed: int = 0) -> MetricsReport:
    """Mean report over evaluation passes.

    Raises AucUndefinedError when the labels hold one class; its ``partial``
    is the mean of the metrics that still have denominators.
    """
    report = average_reports([_metrics_or_partial(s, labels, model, order_shuffled, seed) for s in passes])
    if report.auc is None:
        raise AucUndefinedError("AUC is undefined for single-class labels", partial=report)
    return report


def evaluate(kind_name: str, params, test: Dataset, cfg: TrainConfig, order_shuffled: bool = False) -> MetricsReport:
    """
    Mean metrics over ``eval_repeats`` passes, each with its own presentation order.
    Args:
        kind_name: "lstm", "rnn" or "tri-lstm".
        params: trained parameters of that kind; only read.
        test (Dataset): normalized held-out records.
        cfg (TrainConfig): supplies eval_repeats, eval_order and the seed.
        order_shuffled (bool): tag copied into the report.
    Returns:
        MetricsReport: per-metric means over the passes.
    """
    display = model_kind(kind_name).display
    passes = pass_scores(kind_name, params, test, cfg)
    try:
        report = summarize_passes(passes, test.labels(), display, order_shuffled, cfg.seed)
    except AucUndefinedError as e:
        logger.warning(f"[{display}] {e}; accuracy {e.partial.accuracy:.3f} over {cfg.eval_repeats} passes")
        raise
    logger.info(f"[{report.model}] AUC {report.auc:.3f}, accuracy {report.accuracy:.3f} "
                f"over {cfg.eval_repeats} passes")
    return report


# -- benchmark grid ---------------------------------------------------------

GRID_MODELS = ("lstm", "rnn", "tri-lstm")


@dataclass(frozen=True)
class BenchmarkRow:
    model: str
    order_shuffled: bool
    auc: Optional[float]
    recall: Optional[float]
    specificity: Optional[float]
    accuracy: float
    per_seed: tuple = ()

    def to_dict(self) -> dict:
        return {
            "model": self.model, "order_shuffled": self.order_shuffled, "auc": self.auc,
            "recall": self.recall, "specificity": self.specificity, "accuracy": self.accuracy,
            "per_seed": [r.to_dict() for r in self.per_seed],
        }


def prepare_split(dataset: Dataset, seed: int):
    """75:25 split with one seed for every model, normalized with training statistics."""
    train_raw, test_raw = split_75_25(dataset, seed)
    stats = fit_normalizer(train_raw)
    return apply_normalizer(train_raw, stats), apply_normalizer(test_raw, stats), stats


def run_cell(kind_name: str, shuffled: bool, seed: int, train_data: Dataset, test: Dataset,
             cfg: TrainConfig) -> MetricsReport:
    cell_cfg = replace(cfg, shuffle_order=shuffled, seed=seed)
    result = train(kind_name, train_data, cell_cfg)
    return evaluate(kind_name, result.params, test, cell_cfg, order_shuffled=shuffled)


def _run_cell_args(args):
    return run_cell(*args)


def benchmark_grid(dataset: Dataset, cfg: TrainConfig, n_seeds: int = 5, jobs: int = 1) -> list:
    """Six rows, {LSTM, RNN, TRI-LSTM} x {order fixed, order shuffled}, each averaged over seeds."""
    if n_seeds < 1:
        raise ConfigError(f"need at least one seed, got {n_seeds}")
    train_data, test, _ = prepare_split(dataset, cfg.seed)
    cells = [(kind, shuffled, cfg.seed + s) for kind in GRID_MODELS for shuffled in (False, True)
             for s in range(n_seeds)]
    args = [(kind, shuffled, seed, train_data, test, cfg) for kind, shuffled, seed in cells]
    logger.info(f"Running {len(cells)} benchmark cells with {jobs} job(s)")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_run_cell_args, args))
    else:
        reports = [run_cell(*a) for a in args]

    rows = []
    for i in range(0, len(cells), n_seeds):
        kind, shuffled, _ = cells[i]
        group = reports[i:i + n_seeds]
        mean = average_reports(group)
        rows.append(BenchmarkRow(MODEL_KINDS[kind].display, shuffled, mean.auc, mean.recall,
                                 mean.specificity, mean.accuracy, tuple(group)))
    return rows


def _cell(value) -> str:
    return "n/a" if value is None else f"{value:.2f}"


def format_table(rows: list) -> str:
    header = f"{'Model':<10}{'Order':<7}{'AUC':>6}{'Recall':>8}{'Specificity':>13}{'Accuracy':>10}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r.model:<10}{'✓' if r.order_shuffled else '×':<7}{_cell(r.auc):>6}{_cell(r.recall):>8}"
                     f"{_cell(r.specificity):>13}{_cell(r.accuracy):>10}")
    return "\n".join(lines) + "\n"


def table_json(rows: list) -> str:
    return json.dumps([r.to_dict() for r in rows], indent=2) + "\n"


# -- checkpoints and gradient checks ----------------------------------------

@dataclass(frozen=True, eq=False)
class LoadedModel:
    kind: str
    params: object
    config: TrainConfig
    stats: Optional[NormalizerStats]
    extra: dict


def save_model(path, result: TrainResult, cfg: TrainConfig, stats: NormalizerStats,
               schema: BiomarkerSchema = SCHEMA, extra: Optional[dict] = None) -> None:
    save_checkpoint(path, result.model_kind, result.params, dataclasses.asdict(cfg), schema,
                    {"normalizer": stats.to_dict(), **(extra or {})})


def load_model(path, schema: BiomarkerSchema = SCHEMA) -> LoadedModel:
    ck = load_checkpoint(path, schema)
    if ck.model_kind not in MODEL_KINDS:
        raise CheckpointError(f"checkpoint holds unknown model kind {ck.model_kind!r}")
    cfg = config_from_dict(TrainConfig, ck.config)
    template = MODEL_KINDS[ck.model_kind].init(cfg.model, RngStream(0))
    stats = NormalizerStats.from_dict(ck.extra["normalizer"]) if "normalizer" in ck.extra else None
    return LoadedModel(ck.model_kind, restore_params(template, ck.arrays), cfg, stats, ck.extra)


GRADCHECK_MODEL = ModelConfig(embed_dim=4, hidden_dim=6, head_hidden=5, n_classes=21, baseline_hidden=5)


def gradient_check_suite(seed: int = 0, batch: int = 3, model_cfg: ModelConfig = GRADCHECK_MODEL) -> dict:
    """Central-difference check of every analytic gradient, per model kind (dropout off)."""
    rng = RngStream(seed).child("gradcheck")
    values = rng.child("values").normal(size=(batch, len(SCHEMA), 3))
    perms = presentation_orders(batch, len(SCHEMA), rng.child("orders"))
    labels = np.arange(batch) % 2
    cfg = TrainConfig(dropout=0.0, model=model_cfg)
    reports = {}
    for name, kind in MODEL_KINDS.items():
        params = kind.init(model_cfg, rng.child(f"init-{name}"))
        _, grads = kind.loss(params, values, perms, labels, cfg, None)
        report: GradCheckReport = check_gradients(
            lambda p: kind.loss(p, values, perms, labels, cfg, None)[0], params, grads)
        logger.info(f"[{kind.display}] gradient check: {report.checked} entries, "
                    f"max rel err {report.max_rel_error:.2e}, {report.failures} failures")
        reports[name] = report
    return reports
