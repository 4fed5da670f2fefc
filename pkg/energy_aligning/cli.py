"""Command-line entry point: run experiments and correct externally produced logits."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Any, Sequence

import numpy as np

from energy_aligning import __version__
from energy_aligning.aligning import (
    MODE_PER_CLASS,
    MODE_PER_CLUSTER,
    ShiftVector,
    apply_shifts,
    cluster_by_counts,
    cluster_shifts,
    fewest_shot_class,
    per_class_shifts,
    select_num_clusters,
)
from energy_aligning.config import DEFAULT_CANDIDATE_CLUSTERS, DEFAULT_LOG_LEVEL, LOG_FORMAT, LOG_LEVEL_KEY
from energy_aligning.data import load_counts, load_labels, load_logit_file
from energy_aligning.errors import (
    ConfigurationError,
    ContractViolation,
    EnergyAligningError,
    ParseError,
    TrainingDivergedError,
)
from energy_aligning.metrics import energy_bias_diagnostic, evaluate_logits
from energy_aligning.numerics import LogitMatrix, neg_free_energies
from energy_aligning.services import RunStore, run_cil, run_lt
from energy_aligning.services.run_store import write_json
from energy_aligning.settings import MODE_CIL, MODE_LT, RunSettings

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_USAGE = 2


def configure_logging(level: str | None = None) -> None:
    """Set up root logging from ``--log-level``, else ``EA_LOG_LEVEL``, else WARNING."""
    name = (level or os.getenv(LOG_LEVEL_KEY) or DEFAULT_LOG_LEVEL).upper()
    logging.basicConfig(level=getattr(logging, name, logging.WARNING), format=LOG_FORMAT, force=True)


def _anchor_arg(value: str) -> str | int:
    if value == "few":
        return value
    try:
        return int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("anchor must be 'few' or a class index") from None


def _clusters_arg(value: str) -> str | int:
    if value == "auto":
        return value
    try:
        return int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("clusters must be 'auto' or an integer") from None


def _int_list(value: str) -> list[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ea-run", description="Energy aligning experiments and post-hoc correction.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_training_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON file of flat run settings")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--optimizer", choices=["sgd-momentum", "sgd", "adam"])
        p.add_argument("--head", choices=["linear", "cosine"])
        p.add_argument("--hidden-dims", dest="hidden_dims", type=_int_list)
        p.add_argument("--no-ea", dest="energy_aligning", action="store_const", const=False,
                       help="skip energy aligning (ablation)")
        p.add_argument("--train-csv", dest="train_csv", help="f0,...,f{D-1},label training split")
        p.add_argument("--test-csv", dest="test_csv", help="test split, required with --train-csv")
        p.add_argument("--validation-csv", dest="validation_csv")

    lt = sub.add_parser("train-lt", help="long-tailed training followed by energy aligning")
    add_training_flags(lt)
    lt.add_argument("--imbalance-ratio", dest="imbalance_ratio", type=float)
    lt.add_argument("--shift-mode", dest="shift_mode", choices=[MODE_PER_CLUSTER, MODE_PER_CLASS])
    lt.add_argument("--clusters", type=_clusters_arg, help="cluster count or 'auto'")
    lt.add_argument("--source", dest="ea_source", choices=["train", "validation"])

    cil = sub.add_parser("train-cil", help="class-incremental learning with energy aligning")
    add_training_flags(cil)
    cil.add_argument("--steps", type=int)
    cil.add_argument("--memory", type=int, help="rehearsal budget K")

    align = sub.add_parser("align", help="shift scalars for external sampling-set logits")
    align.add_argument("--logits", required=True, help="EALG logit file of the sampling set")
    align.add_argument("--counts", required=True, help="CSV with a 'count' column")
    align.add_argument("--clusters", type=_clusters_arg, default="auto")
    align.add_argument("--candidates", type=_int_list, default=list(DEFAULT_CANDIDATE_CLUSTERS))
    align.add_argument("--anchor", type=_anchor_arg, default="few")
    align.add_argument("--per-class", dest="per_class", action="store_true")
    align.add_argument("--out", required=True, help="shifts.json to write")

    ev = sub.add_parser("eval", help="accuracy of (optionally shifted) logits")
    ev.add_argument("--logits", required=True)
    ev.add_argument("--labels", help="CSV with a 'label' column; defaults to labels stored in the logit file")
    ev.add_argument("--shifts")
    ev.add_argument("--counts", help="training counts for Many/Medium/Few splits")
    ev.add_argument("--k", type=int, default=5)
    ev.add_argument("--out", required=True)

    diag = sub.add_parser("diagnose", help="per-class negative free energies against training counts")
    diag.add_argument("--logits", required=True)
    diag.add_argument("--counts", required=True)
    diag.add_argument("--shifts")
    diag.add_argument("--out", required=True)
    return parser


def _settings(mode: str, args: argparse.Namespace) -> RunSettings:
    settings = RunSettings(mode)
    if args.config:
        settings.load(args.config)
    flags = ("seed", "epochs", "lr", "batch_size", "optimizer", "head", "hidden_dims", "energy_aligning",
             "imbalance_ratio", "shift_mode", "ea_source", "steps", "memory", "train_csv", "test_csv",
             "validation_csv")
    overrides: dict[str, Any] = {k: getattr(args, k) for k in flags if getattr(args, k, None) is not None}
    clusters = getattr(args, "clusters", None)
    if clusters is not None and clusters != "auto":
        overrides["num_clusters"] = clusters
    settings.update(overrides)
    if clusters == "auto":
        settings.settings["num_clusters"] = None
    return settings


def cmd_train_lt(args: argparse.Namespace) -> int:
    settings = _settings(MODE_LT, args)
    logger.debug("Resolved settings: %s", settings.describe())
    store = RunStore(args.out)
    store.write_config(settings.resolved())
    splits = settings.benchmark()
    result = run_lt(splits.train, splits.test, settings.lt_config(), settings.sgd_config(),
                    settings.ea_config(), settings.model_config(), splits.validation)
    store.write_step(1, result.model, result.shifts)
    store.write_metrics(result.report.to_dict())
    store.write_traces(result.trace)
    store.write_energy(result.report.energy)
    store.write_confusion(result.report.corrected.confusion)
    print(f"top-1 {result.report.uncorrected.top1:.2f}% -> {result.report.corrected.top1:.2f}%")
    return EXIT_OK


def cmd_train_cil(args: argparse.Namespace) -> int:
    settings = _settings(MODE_CIL, args)
    logger.debug("Resolved settings: %s", settings.describe())
    store = RunStore(args.out)
    store.write_config(settings.resolved())
    splits = settings.benchmark()
    result = run_cil(splits.train, splits.test, settings.cil_config(), settings.sgd_config(),
                     settings.ea_config(), settings.model_config())
    for step in result.steps:
        store.write_step(step.step, step.model, step.shifts)
    metrics = result.report.to_dict()
    store.write_metrics(metrics)
    store.write_traces(result.trace)
    store.write_confusion(result.report.corrected.confusion)
    print(f"avg incremental top-1 {metrics['avg_incremental_uncorrected']} -> "
          f"{metrics['avg_incremental_corrected']}")
    return EXIT_OK


def _counts_for(path: str, logits: LogitMatrix) -> np.ndarray:
    counts = load_counts(path)
    if counts.size != logits.class_count:
        raise ConfigurationError(f"{path}: {counts.size} counts for {logits.class_count} classes")
    return counts


def cmd_align(args: argparse.Namespace) -> int:
    logits, labels = load_logit_file(args.logits)
    counts = _counts_for(args.counts, logits)
    if args.per_class:
        anchor = fewest_shot_class(counts) if args.anchor == "few" else args.anchor
        shifts = per_class_shifts(logits, anchor)
    else:
        m = args.clusters
        if m == "auto":
            if labels is None:
                raise ConfigurationError("--clusters auto needs sampling-set labels in the logit file")
            m = select_num_clusters(args.candidates, logits, labels, counts)
        clusters = cluster_by_counts(counts, m)
        if args.anchor != "few":
            if not 0 <= args.anchor < counts.size:
                raise ContractViolation(f"anchor class {args.anchor} outside [0, {counts.size})")
            clusters = clusters.with_anchor(int(clusters.cluster_of[args.anchor]))
        shifts = cluster_shifts(logits, clusters)
    shifts.save(args.out)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    logits, stored = load_logit_file(args.logits)
    labels = load_labels(args.labels) if args.labels else stored
    if labels is None:
        raise ConfigurationError("no labels: pass --labels or use a logit file that stores them")
    if labels.size != logits.sample_count:
        raise ConfigurationError(f"{labels.size} labels for {logits.sample_count} logit rows")
    if labels.max() >= logits.class_count:
        raise ParseError(f"label {int(labels.max())} outside [0, {logits.class_count})")
    values = logits.values
    if args.shifts:
        values = apply_shifts(values, ShiftVector.load(args.shifts))
    counts = _counts_for(args.counts, logits) if args.counts else None
    report = evaluate_logits(values, labels, args.k, counts)
    write_json(args.out, report.to_dict())
    return EXIT_OK


def cmd_diagnose(args: argparse.Namespace) -> int:
    logits, _ = load_logit_file(args.logits)
    counts = _counts_for(args.counts, logits)
    if args.shifts:
        shifts = ShiftVector.load(args.shifts)
    else:
        shifts = per_class_shifts(logits, fewest_shot_class(counts))
    before = neg_free_energies(logits)
    after = neg_free_energies(LogitMatrix(apply_shifts(logits.values, shifts)))
    diagnostic = energy_bias_diagnostic(counts, before, after)
    diagnostic.to_frame().to_csv(args.out, index=False)
    print(f"spearman before {diagnostic.rho_before:.3f}, after {diagnostic.rho_after:.3f}")
    return EXIT_OK


COMMANDS = {
    "train-lt": cmd_train_lt,
    "train-cil": cmd_train_cil,
    "align": cmd_align,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
}


def run(argv: Sequence[str] | None = None) -> int:
    """Parse ``argv`` and run one subcommand.

    Returns:
        0 on success, 2 for usage, configuration or parse errors, 1 for contract
        violations and diverged training. Failures print one line to stderr.
    """
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, ParseError) as e:
        print(f"ea-run: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractViolation, TrainingDivergedError) as e:
        print(f"ea-run: error: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except EnergyAligningError as e:
        print(f"ea-run: error: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as e:
        logger.error("I/O failure: %s", e)
        print(f"ea-run: error: {e}", file=sys.stderr)
        return EXIT_USAGE
