import argparse
import csv
import logging
import os
import sys
from typing import List, Optional

import yaml
from pydantic import ValidationError

from sparselm.errors import (
    CorpusError,
    DivergenceError,
    InfeasibleSparsityError,
    NonFiniteGradientError,
    SparseLmError,
)
from sparselm.models.config import ExperimentConfig, load_experiment, read_config_mapping, split_sweep
from sparselm.services.corpus import build_vocabulary, read_lm_corpus, read_tagged_file
from sparselm.services.datasets import POS_TRAIN_TOKENS, RECITE_TOKENS, fetch_pos_corpus, fetch_recite_corpus
from sparselm.services.embedding import (
    allocate_lengths,
    length_histogram,
    solve_alpha,
    uniform_bins,
    write_allocation_csv,
)
from sparselm.services.networks import build_lm_model, build_pos_model, format_parameter_table, parameter_table
from sparselm.services.sparsity import (
    count_lstm_params,
    dense_lstm_params,
    describe_plan,
    plan_matching_dense,
    plan_recurrent_layer,
)
from sparselm.services.sweep import expand_sweep, run_sweep, swept_fields
from sparselm.services.trainer import evaluate, train

log = logging.getLogger("cli")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--config", "-c", required=required, help="Experiment YAML file")
    p.add_argument(
        "-o", "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="Override a config key (repeatable; values parsed as YAML)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sparselm", description="Predefined sparse LSTMs and embeddings")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="Print a sparse recurrent layer plan and its parameter count")
    p.add_argument("--i", type=int, required=True, dest="input_size", help="Input width")
    p.add_argument("--h", type=int, required=True, dest="hidden_size", help="Hidden width")
    p.add_argument("--n", type=int, default=1, dest="segments", help="Number of output segments N")
    p.add_argument("--gamma", type=float, default=1.0, help="Input window fraction")
    p.add_argument("--match-dense", type=int, default=None, help="Solve gamma to match a dense layer of this hidden size")
    p.add_argument("--match-dense-input", type=int, default=None, help="Input width of that dense layer (default: its hidden size)")

    p = sub.add_parser("solve-alpha", help="Solve the embedding decay factor and print the allocation summary")
    p.add_argument("--k", type=int, required=True, help="Maximum embedding length")
    p.add_argument("--delta", type=float, required=True, help="Embedding density")
    p.add_argument("--bins", type=int, default=None, help="Number of equal-width bins (default: one per dimension)")
    p.add_argument("--vocab-size", type=int, default=10000)
    p.add_argument("--corpus", default=None, help="Plain-text corpus whose vocabulary sets V and the frequencies")
    p.add_argument("--output", default=None, help="Write the per-word allocation CSV here")

    p = sub.add_parser("params", help="Print a full model's parameter table")
    _add_config_args(p)

    p = sub.add_parser("train", help="Train (or sweep) an experiment config")
    _add_config_args(p)
    p.add_argument("--workers", type=int, default=None, help="Parallel sweep runs (default: SPARSELM_WORKERS or 1)")

    p = sub.add_parser("eval", help="Evaluate a checkpoint on one split")
    _add_config_args(p, required=False)
    p.add_argument("--checkpoint", required=True, help="Checkpoint directory or manifest")
    p.add_argument("--split", default="valid", choices=["train", "valid", "test"])

    p = sub.add_parser("recite", help="Learning-to-recite run: train to memorize a corpus")
    _add_config_args(p)
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("fetch-data", help="Download and convert the public POS and recite corpora")
    p.add_argument("--data-dir", default=None, help="Target directory (default: SPARSELM_DATA_DIR or data/external)")
    p.add_argument("--only", choices=["pos", "recite"], default=None)
    p.add_argument("--pos-train-tokens", type=int, default=POS_TRAIN_TOKENS,
                   help="Keep whole training sentences up to this many tokens (0: all)")
    p.add_argument("--recite-tokens", type=int, default=RECITE_TOKENS)
    return parser


def cmd_plan(args) -> int:
    if args.match_dense is not None:
        dense_in = args.match_dense_input or args.match_dense
        plan = plan_matching_dense(dense_in, args.match_dense, args.input_size, args.hidden_size, args.segments)
        print(f"dense reference {dense_in}->{args.match_dense}: {dense_lstm_params(dense_in, args.match_dense):,} par.")
    else:
        plan = plan_recurrent_layer(args.input_size, args.hidden_size, args.segments, args.gamma)
    print(describe_plan(plan))
    print(f"parameters: {count_lstm_params(plan)}")
    return EXIT_OK


def cmd_solve_alpha(args) -> int:
    widths = uniform_bins(args.k, args.bins)
    alpha = solve_alpha(args.k, args.delta, widths)
    frequencies = None
    vocab_size = args.vocab_size
    if args.corpus:
        vocabulary = build_vocabulary(read_lm_corpus(args.corpus))
        frequencies = vocabulary.frequencies
        vocab_size = len(vocabulary)
    allocation = allocate_lengths(vocab_size, args.k, alpha, widths, args.delta)
    print(f"alpha={alpha:.6f}")
    print(f"vocab_size={vocab_size} parameters={allocation.parameter_count} density={allocation.realized_density:.6f}")
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["length", "words", "share"])
    for length, words in enumerate(length_histogram(allocation)):
        if words:
            writer.writerow([length, words, f"{words / vocab_size:.6f}"])
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="") as f:
            write_allocation_csv(allocation, f, frequencies)
        log.info(f"Allocation written to {args.output}")
    return EXIT_OK


def _vocab_size_for(config: ExperimentConfig) -> int:
    if config.vocab_size:
        return config.vocab_size
    if not config.train_path:
        raise ValueError("set vocab_size or train_path to size the vocabulary")
    if config.task == "pos":
        tokens = (w for words, _ in read_tagged_file(config.train_path) for w in words)
    else:
        tokens = read_lm_corpus(config.train_path)
    return len(build_vocabulary(tokens, config.min_count, config.order_strategy, config.seed))


def cmd_params(args) -> int:
    config, _ = load_experiment(args.config, args.overrides)
    vocab_size = _vocab_size_for(config)
    if config.task == "pos":
        model = build_pos_model(config, vocab_size, initialize=False)
    else:
        model = build_lm_model(config, vocab_size, initialize=False)
    print(format_parameter_table(parameter_table(model)))
    return EXIT_OK


def _train_or_sweep(args, overrides: List[str]) -> int:
    base, sweep = split_sweep(read_config_mapping(args.config, overrides))
    if not sweep:
        result = train(ExperimentConfig.model_validate(base))
        print(f"{result.run_id}: best {result.metric_name}={result.best_metric:.6f} at epoch {result.best_epoch}")
        print(f"metrics: {result.metrics_path}")
        return EXIT_OK
    configs = expand_sweep(base, sweep)
    workers = args.workers or int(os.getenv("SPARSELM_WORKERS", "1"))
    prefix = configs[0].output_dir or os.getenv("SPARSELM_OUTPUT_DIR", "runs")
    summary_path = os.path.join(prefix, f"{base.get('run_id') or base.get('task', 'run')}-sweep.csv")
    rows = run_sweep(configs, workers=workers, swept=swept_fields(sweep), summary_path=summary_path)
    for row in rows:
        print(f"{row['setting']}: {row['metric']} mean={row['mean']} stdev={row['stdev']} runs={row['runs']}")
    print(f"summary: {summary_path}")
    return EXIT_OK if all(r["failed"] == 0 for r in rows) else EXIT_DIVERGED


def cmd_train(args) -> int:
    return _train_or_sweep(args, args.overrides)


def cmd_recite(args) -> int:
    return _train_or_sweep(args, args.overrides + ["task=recite"])


def cmd_eval(args) -> int:
    config = None
    if args.config or args.overrides:
        config, _ = load_experiment(args.config, args.overrides)
    row = evaluate(config, args.checkpoint, args.split)
    print(",".join(row.to_csv_fields()))
    return EXIT_OK


def cmd_fetch_data(args) -> int:
    data_dir = args.data_dir or os.getenv("SPARSELM_DATA_DIR", os.path.join("data", "external"))
    fetched = []
    if args.only in (None, "pos"):
        fetched.append(fetch_pos_corpus(data_dir, args.pos_train_tokens or None))
    if args.only in (None, "recite"):
        fetched.append(fetch_recite_corpus(data_dir, args.recite_tokens))
    for corpus in fetched:
        for split, path in corpus.files.items():
            print(f"{corpus.name} {split}: {corpus.tokens[split]} tokens -> {path}")
    return EXIT_OK


COMMANDS = {
    "plan": cmd_plan,
    "solve-alpha": cmd_solve_alpha,
    "params": cmd_params,
    "train": cmd_train,
    "eval": cmd_eval,
    "recite": cmd_recite,
    "fetch-data": cmd_fetch_data,
}


def run(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv`` and dispatch; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.log_level:
        logging.getLogger().setLevel(args.log_level.upper())

    try:
        return COMMANDS[args.command](args)
    except (CorpusError, FileNotFoundError) as exc:
        log.error(f"Data error: {exc}")
        return EXIT_DATA
    except (DivergenceError, NonFiniteGradientError) as exc:
        log.error(f"Numerical divergence: {exc}")
        return EXIT_DIVERGED
    except (ValidationError, InfeasibleSparsityError, yaml.YAMLError, ValueError) as exc:
        log.error(f"Invalid configuration: {exc}")
        return EXIT_USAGE
    except SparseLmError as exc:
        log.exception(f"{args.command} failed: {exc}")
        return EXIT_USAGE
