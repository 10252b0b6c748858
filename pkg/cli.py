"""Command-line entry point: gen-data, train, eval, bench, graph, gradcheck."""

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from biomarker_data import (
    SCHEMA,
    Dataset,
    GeneratorConfig,
    NormalizerStats,
    apply_normalizer,
    generate_synthetic,
    load_csv,
    save_csv,
    split_75_25,
)
from errors import AucUndefinedError, CheckpointError, ConfigError, ParseError, TriLstmError, ValidationError
from eval_harness import (
    MODEL_KINDS,
    TrainConfig,
    benchmark_grid,
    config_from_dict,
    format_table,
    gradient_check_suite,
    load_model,
    pass_scores,
    prepare_split,
    roc_points,
    save_model,
    summarize_passes,
    table_json,
    train,
)
from graph_extract import export_dot, export_json, extract_graph, graph_filename, summarize

# ==== CONFIGURATION ====
OUT_DIR = os.getenv("TRILSTM_OUT_DIR", "runs")
LOG_LEVEL = os.getenv("TRILSTM_LOG_LEVEL", "INFO")
JOBS = int(os.getenv("TRILSTM_JOBS", "1"))
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
LOG_FILE = "trilstm.log"

logger = logging.getLogger(__name__)

INPUT_ERRORS = (ConfigError, ParseError, ValidationError, CheckpointError, FileNotFoundError)


@dataclass(frozen=True)
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model_kind: str = "tri-lstm"
    data: Optional[str] = None
    checkpoint: Optional[str] = None
    out_dir: str = OUT_DIR
    jobs: int = JOBS
    bench_seeds: int = 5

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model_kind!r}; expected one of {sorted(MODEL_KINDS)}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be at least 1, got {self.jobs}")
        if self.bench_seeds < 1:
            raise ConfigError(f"bench_seeds must be at least 1, got {self.bench_seeds}")

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else self.out / f"model_{self.model_kind}.json"


def setup_logging(out_dir: Optional[Path], level: str) -> None:
    handlers = [logging.StreamHandler()]
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(out_dir / LOG_FILE))
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, handlers=handlers, force=True)


def write_json(path: Path, data) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)
        f.write("\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override its values")
    common.add_argument("--seed", type=int, help="seed for data generation, splitting and training")
    common.add_argument("--out", help=f"output directory (default {OUT_DIR})")
    common.add_argument("--jobs", type=int, help="worker processes for bench")
    common.add_argument("--log-level", default=LOG_LEVEL, help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--data", help="input CSV; a synthetic cohort is generated when omitted")
    common.add_argument("--model", choices=sorted(MODEL_KINDS), help="model kind")

    parser = argparse.ArgumentParser(prog="trilstm", description="Glaucoma biomarker relationship mining")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", parents=[common], help="write a synthetic cohort CSV")
    gen.add_argument("--n", type=int, help="number of patients")
    gen.add_argument("--glaucoma-fraction", type=float)
    gen.add_argument("--noise", type=float, help="noise scale")
    gen.add_argument("--separability", type=float)

    for name, text in (("train", "train a model and save a checkpoint"),
                       ("eval", "evaluate a checkpoint on the held-out split"),
                       ("bench", "run the model x ordering benchmark grid"),
                       ("graph", "extract decision graphs from a TRI-LSTM checkpoint")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="checkpoint path (default <out>/model_<kind>.json)")
        p.add_argument("--epochs", type=int)
        p.add_argument("--no-shuffle", action="store_true", help="train without order augmentation")
        if name == "bench":
            p.add_argument("--seeds", type=int, help="seeds per grid cell")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Dataclass defaults, then the JSON config file, then command-line flags."""
    run = RunConfig()
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                run = config_from_dict(RunConfig, json.load(f))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config} is not valid JSON: {e}") from None

    gen_changes, train_changes, run_changes = {}, {}, {}
    if args.seed is not None:
        gen_changes["seed"] = args.seed
        train_changes["seed"] = args.seed
    for flag, key in (("n", "n_patients"), ("glaucoma_fraction", "glaucoma_fraction"),
                      ("noise", "noise_scale"), ("separability", "separability")):
        if getattr(args, flag, None) is not None:
            gen_changes[key] = getattr(args, flag)
    if getattr(args, "epochs", None) is not None:
        train_changes["epochs"] = args.epochs
    if getattr(args, "no_shuffle", False):
        train_changes["shuffle_order"] = False
    for flag, key in (("out", "out_dir"), ("jobs", "jobs"), ("data", "data"), ("model", "model_kind"),
                      ("checkpoint", "checkpoint"), ("seeds", "bench_seeds")):
        if getattr(args, flag, None) is not None:
            run_changes[key] = getattr(args, flag)
    return replace(run, generator=replace(run.generator, **gen_changes),
                   train=replace(run.train, **train_changes), **run_changes)


def load_dataset(run: RunConfig, generator: Optional[GeneratorConfig] = None) -> Dataset:
    if run.data:
        return load_csv(run.data, SCHEMA)
    logger.info("No --data given; generating a synthetic cohort")
    return generate_synthetic(generator or run.generator, SCHEMA)


def held_out_split(run: RunConfig, extra: dict, stats: NormalizerStats) -> Dataset:
    """Rebuild the test split a checkpoint was trained against, normalized with its statistics."""
    generator = config_from_dict(GeneratorConfig, extra["generator"]) if "generator" in extra else None
    dataset = load_dataset(run, generator)
    _, test_raw = split_75_25(dataset, extra.get("split_seed", run.train.seed))
    return apply_normalizer(test_raw, stats)


# -- commands ---------------------------------------------------------------

def cmd_gen_data(run: RunConfig) -> int:
    dataset = generate_synthetic(run.generator, SCHEMA)
    path = run.out / "data.csv"
    save_csv(dataset, path)
    logger.info(f"Wrote {len(dataset)} records to {path}")
    return 0


def cmd_train(run: RunConfig) -> int:
    dataset = load_dataset(run)
    train_data, _, stats = prepare_split(dataset, run.train.seed)
    result = train(run.model_kind, train_data, run.train)
    extra = {"split_seed": run.train.seed}
    if not run.data:
        extra["generator"] = dataclasses.asdict(run.generator)
    save_model(run.checkpoint_path(), result, run.train, stats, SCHEMA, extra)
    write_json(run.out / f"loss_{run.model_kind}.json", result.loss_trace)
    return 0


def cmd_eval(run: RunConfig) -> int:
    model = load_model(run.checkpoint_path(), SCHEMA)
    if model.stats is None:
        raise CheckpointError("checkpoint carries no normalization statistics")
    test = held_out_split(run, model.extra, model.stats)
    cfg = replace(model.config, eval_repeats=run.train.eval_repeats, eval_order=run.train.eval_order)
    display = MODEL_KINDS[model.kind].display
    passes = pass_scores(model.kind, model.params, test, cfg)
    labels = test.labels()
    try:
        report = summarize_passes(passes, labels, display, cfg.shuffle_order, cfg.seed)
    except AucUndefinedError as e:
        write_json(run.out / f"metrics_{model.kind}.json", e.partial.to_dict())
        logger.warning(f"Wrote partial metrics for {display}: {e}")
        raise
    write_json(run.out / f"metrics_{model.kind}.json", report.to_dict())
    roc = roc_points(np.mean(passes, axis=0), labels)
    write_json(run.out / f"roc_{model.kind}.json", [list(p) for p in roc])
    print(f"{display}: AUC {report.auc:.4f}, recall {report.recall:.4f}, "
          f"specificity {report.specificity:.4f}, accuracy {report.accuracy:.4f}")
    return 0


def cmd_bench(run: RunConfig) -> int:
    rows = benchmark_grid(load_dataset(run), run.train, run.bench_seeds, run.jobs)
    table = format_table(rows)
    (run.out / "bench.txt").write_text(table, encoding="utf-8")
    (run.out / "bench.json").write_text(table_json(rows), encoding="utf-8")
    print(table, end="")
    return 0


def cmd_graph(run: RunConfig) -> int:
    model = load_model(run.checkpoint_path(), SCHEMA)
    if model.kind != "tri-lstm":
        raise ConfigError(f"graphs need a tri-lstm checkpoint, got {model.kind!r}")
    if model.stats is None:
        raise CheckpointError("checkpoint carries no normalization statistics")
    test = held_out_split(run, model.extra, model.stats)
    graphs = extract_graph(model.params, test, seed=run.train.seed)
    for decision, g in graphs.items():
        if g is None:
            continue
        (run.out / graph_filename(model.kind, run.train.seed, decision)).write_text(export_dot(g), encoding="utf-8")
        (run.out / graph_filename(model.kind, run.train.seed, decision, "json")).write_text(
            export_json(g), encoding="utf-8")
    summary = summarize(graphs, SCHEMA)
    print(summary or "no graphs: the test split is empty")
    return 0


def cmd_gradcheck(run: RunConfig) -> int:
    reports = gradient_check_suite(run.train.seed)
    write_json(run.out / "gradcheck.json", {
        name: {"passed": r.passed, "max_rel_error": r.max_rel_error, "failures": r.failures,
               "checked": r.checked, "groups": r.group_errors}
        for name, r in reports.items()
    })
    for name, r in reports.items():
        print(f"{MODEL_KINDS[name].display}: {'PASS' if r.passed else 'FAIL'}, "
              f"max rel err {r.max_rel_error:.2e} over {r.checked} entries")
    return 0 if all(r.passed for r in reports.values()) else 2


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "graph": cmd_graph,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = resolve_config(args)
    except INPUT_ERRORS as e:
        setup_logging(None, args.log_level)
        logger.error(f"Invalid configuration: {e}")
        return 1

    setup_logging(run.out, args.log_level)
    write_json(run.out / f"{args.command}_config.json", dataclasses.asdict(run))
    try:
        return COMMANDS[args.command](run)
    except INPUT_ERRORS as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    except (TriLstmError, ArithmeticError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
