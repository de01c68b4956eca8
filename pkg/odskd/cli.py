#!/usr/bin/env python3
"""
The ``odskd`` command line tool.

Every subcommand has its own parser; ``odskd <command> --help`` lists its options.
Options can also be read from a JSON config file (``--config``) in which nested objects
name dotted options, so ``{"loss": {"alpha": 0.9}}`` sets ``--loss.alpha``.
Flags given on the command line override the config file.
"""
import json
import logging
import sys
import time
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import configargparse
import numpy as np
import pandas as pd
from humanfriendly import format_timespan

from odskd.artifacts import dump_json, tool_version, write_csv, write_json
from odskd.config import CONFIG_KEYS, PRESETS, DistillConfig, RunConfig
from odskd.data import Split, gen_blobs, gen_ood_shift, gen_spirals, read_bundle, write_bundle
from odskd.diversity import (
    DEFAULT_SNR_ETAS,
    DEFAULT_SNR_SAMPLES,
    diversity_plot,
    jacobian_cosine,
    roc_auroc,
    snr_table,
)
from odskd.exceptions import MemberIndexError, OdskdException, UsageError, ValidationError
from odskd.metrics import build_report, nll_curve
from odskd.models import (
    FACTOR_INITS,
    BatchEnsembleStudent,
    Classifier,
    ensemble_members,
    load_ensemble,
    load_model,
    member_probs,
    save_checkpoint,
)
from odskd.perturb import Perturber, Strategy
from odskd.train import (
    distill,
    sweep_kd_hyperparameters,
    train_student_scratch,
    train_teachers,
    write_training_log,
)

logger = logging.getLogger(__name__)

# Every random stream of a command derives from --seed by a fixed offset.
OOD_SEED_OFFSET = 1000
STUDENT_INIT_SEED_OFFSET = 2000
DISTILL_SEED_OFFSET = 3000
ANALYSIS_SEED_OFFSET = 4000

DEFAULT_HIDDEN = [32, 32]
DEFAULT_SNR_EXAMPLES = 32

PATH_KEYS = (
    "config",
    "data.dir",
    "out",
    "log",
    "teachers",
    "model",
    "models",
    "dee_teachers",
    "perturb_source",
    "teacher",
    "students",
)

_DEFAULTS = DistillConfig()
_STDERR_HANDLER_NAME = "odskd-stderr"


# CONFIG FILES


def _flatten(content: dict, prefix: str = "") -> "OrderedDict[str, object]":
    items: "OrderedDict[str, object]" = OrderedDict()
    for key, value in content.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            items.update(_flatten(value, f"{name}."))
        elif isinstance(value, bool):
            items[name] = "true" if value else "false"
        elif isinstance(value, list):
            items[name] = [str(item) for item in value]
        elif value is not None:
            items[name] = str(value)
    return items


class JsonConfigFileParser(configargparse.ConfigFileParser):
    """Reads JSON objects; nested objects become dotted keys."""

    def get_syntax_description(self):
        return (
            "Config files are JSON objects. Nested objects name dotted options, "
            'e.g. {"loss": {"alpha": 0.9}} sets --loss.alpha.'
        )

    def parse(self, stream):
        try:
            content = json.load(stream)
        except json.JSONDecodeError as e:
            raise configargparse.ConfigFileParserException(
                f"Config file {getattr(stream, 'name', '')} is not valid JSON: {e}"
            ) from e
        if not isinstance(content, dict):
            raise configargparse.ConfigFileParserException("A config file must hold a JSON object")
        return _flatten(content)

    def serialize(self, items):
        return json.dumps(dict(items), sort_keys=True, indent=4)


# PARSERS


def _base_parser(command: str, description: str) -> configargparse.ArgumentParser:
    parser = configargparse.ArgumentParser(
        prog=f"odskd {command}",
        description=description,
        config_file_parser_class=JsonConfigFileParser,
        allow_abbrev=False,
    )
    parser.add_argument(
        "--config",
        "-c",
        is_config_file=True,
        help="JSON config file path",
    )
    parser.add_argument(
        "--preset",
        choices=sorted(PRESETS),
        default=None,
        help="Start from a published setting. Other options override it.",
    )
    parser.add_argument(
        "--seed",
        type=int,
        default=None,
        env_var="ODSKD_SEED",
        help=f"Base seed all random streams derive from (default: {_DEFAULTS.seed})",
    )
    parser.add_argument(
        "--verbosity",
        type=int,
        choices=range(4),
        default=None,
        env_var="ODSKD_VERBOSITY",
        help="Verbosity from 0 (= error) to 3 (= debug), default 2",
    )
    parser.add_argument(
        "--quiet",
        "-q",
        default=False,
        action="store_true",
        help="Enable quiet mode. Only warnings and errors are logged.",
    )
    parser.add_argument(
        "--verbose",
        "-v",
        action="store_true",
        dest="verbose",
        help="Enable verbose mode. This will also print debug messages.",
    )
    return parser


def _add_data_dir(parser):
    parser.add_argument(
        "--data.dir",
        "--data",
        dest="data.dir",
        required=True,
        help="Dataset directory written by gen-data",
    )


def _add_hidden(parser, default: Optional[List[int]] = None):
    parser.add_argument(
        "--model.hidden",
        "--hidden",
        dest="model.hidden",
        type=int,
        nargs="+",
        default=default,
        help=f"Hidden layer widths (default: {DEFAULT_HIDDEN})",
    )


def _add_ensemble_size(parser):
    parser.add_argument(
        "--model.m",
        "--m",
        dest="model.m",
        type=int,
        default=None,
        help=f"Number of teachers / student subnetworks (default: {_DEFAULTS.ensemble_size})",
    )


def _add_student(parser):
    group = parser.add_argument_group("student")
    group.add_argument(
        "--model.student_hidden",
        "--student-hidden",
        dest="model.student_hidden",
        type=int,
        nargs="+",
        default=None,
        help="Hidden widths of the student (default: those of the teachers)",
    )
    group.add_argument(
        "--model.factor_init",
        dest="model.factor_init",
        choices=FACTOR_INITS,
        default=FACTOR_INITS[0],
        help="Initialization of the rank-one factors",
    )


def _add_training(parser):
    group = parser.add_argument_group("training")
    group.add_argument(
        "--sched.base_lr",
        "--lr",
        dest="sched.base_lr",
        type=float,
        default=None,
        help=f"Base learning rate (default: {_DEFAULTS.base_lr})",
    )
    group.add_argument(
        "--sched.epochs",
        "--epochs",
        dest="sched.epochs",
        type=int,
        default=None,
        help=f"Number of epochs (default: {_DEFAULTS.total_epochs})",
    )
    group.add_argument(
        "--sched.warmup",
        "--warmup",
        dest="sched.warmup",
        type=int,
        default=None,
        help=f"Linear warmup epochs (default: {_DEFAULTS.warmup_epochs})",
    )
    group.add_argument(
        "--optim.momentum",
        dest="optim.momentum",
        type=float,
        default=None,
        help=f"SGD momentum (default: {_DEFAULTS.momentum})",
    )
    group.add_argument(
        "--optim.weight_decay",
        dest="optim.weight_decay",
        type=float,
        default=None,
        help=f"Weight decay (default: {_DEFAULTS.weight_decay})",
    )
    group.add_argument(
        "--optim.batch_size",
        "--batch-size",
        dest="optim.batch_size",
        type=int,
        default=None,
        help=f"Minibatch size (default: {_DEFAULTS.batch_size})",
    )


def _add_loss(parser):
    group = parser.add_argument_group("distillation loss")
    group.add_argument(
        "--loss.alpha",
        "--alpha",
        dest="loss.alpha",
        type=float,
        default=None,
        help=f"Weight of the distillation term (default: {_DEFAULTS.alpha})",
    )
    group.add_argument(
        "--loss.tau",
        "--tau",
        dest="loss.tau",
        type=float,
        default=None,
        help=f"Distillation temperature (default: {_DEFAULTS.tau})",
    )


def _add_perturbation(parser):
    group = parser.add_argument_group("input perturbation")
    group.add_argument(
        "--perturb.strategy",
        "--perturb",
        dest="perturb.strategy",
        choices=[strategy.value for strategy in Strategy],
        default=None,
        help=f"Perturbation strategy (default: {_DEFAULTS.strategy.value})",
    )
    group.add_argument(
        "--perturb.eta",
        "--eta",
        dest="perturb.eta",
        type=float,
        default=None,
        help=f"Step size (default: {_DEFAULTS.eta:.5g})",
    )
    group.add_argument(
        "--perturb.tau",
        dest="perturb.tau",
        type=float,
        default=None,
        help="Temperature the directions are computed at (default: the distillation temperature)",
    )
    group.add_argument(
        "--perturb.sigma",
        "--sigma",
        dest="perturb.sigma",
        type=float,
        default=None,
        help="Standard deviation of Gaussian noise (default: the step size)",
    )
    group.add_argument(
        "--perturb.gaussian_normalize",
        dest="perturb.gaussian_normalize",
        action="store_true",
        default=None,
        help="Rescale Gaussian noise to the norm of the step size",
    )
    group.add_argument(
        "--perturb.share_across_batch",
        dest="perturb.share_across_batch",
        action="store_true",
        default=None,
        help="Draw one teacher and guide per minibatch instead of per example",
    )


def _add_gen_data_arguments(parser):
    group = parser.add_argument_group("data")
    group.add_argument(
        "--data.kind", "--kind", dest="data.kind", choices=["blobs", "spirals"], default="spirals"
    )
    group.add_argument("--data.k", "--k", dest="data.k", type=int, default=4, help="Number of classes")
    group.add_argument(
        "--data.d", "--d", dest="data.d", type=int, default=2, help="Input dimension (blobs only)"
    )
    group.add_argument("--data.n", "--n", dest="data.n", type=int, default=500, help="Samples per class")
    group.add_argument("--data.spread", dest="data.spread", type=float, default=0.5, help="Blob std")
    group.add_argument("--data.noise", dest="data.noise", type=float, default=0.2, help="Spiral noise std")
    group.add_argument("--data.turns", dest="data.turns", type=float, default=1.0, help="Spiral turns")
    group.add_argument(
        "--data.ood_shift",
        "--ood-shift",
        dest="data.ood_shift",
        type=float,
        default=None,
        help="Also write an out-of-distribution split shifted by this distance",
    )
    parser.add_argument("--out", required=True, help="Output directory")


def _add_train_teachers_arguments(parser):
    _add_data_dir(parser)
    _add_hidden(parser, default=DEFAULT_HIDDEN)
    _add_ensemble_size(parser)
    _add_training(parser)
    parser.add_argument("--out", required=True, help="Output directory of member_<i>.json")


def _add_distill_arguments(parser):
    _add_data_dir(parser)
    parser.add_argument("--teachers", default=None, help="Directory of teacher checkpoints")
    parser.add_argument(
        "--scratch",
        default=False,
        action="store_true",
        help="Train the student from scratch, without teachers",
    )
    _add_hidden(parser)
    _add_ensemble_size(parser)
    _add_student(parser)
    _add_training(parser)
    _add_loss(parser)
    _add_perturbation(parser)
    parser.add_argument("--out", required=True, help="Student checkpoint path")
    parser.add_argument("--log", default=None, help="Training log CSV (default: next to --out)")


def _add_evaluate_arguments(parser):
    _add_data_dir(parser)
    parser.add_argument(
        "--model", required=True, help="Checkpoint file, or a directory of teacher checkpoints"
    )
    parser.add_argument(
        "--dee-teachers",
        dest="dee_teachers",
        default=None,
        help="Teacher directory to compute the deep ensemble equivalent against",
    )
    parser.add_argument(
        "--ood",
        default=False,
        action="store_true",
        help="Add entropy statistics on the out-of-distribution split",
    )
    parser.add_argument(
        "--metrics.ece_bins",
        "--ece-bins",
        dest="metrics.ece_bins",
        type=int,
        default=None,
        help=f"Number of calibration bins (default: {_DEFAULTS.ece_bins})",
    )
    parser.add_argument("--out", required=True, help="Report path (JSON)")


def _add_split(parser, default: Split):
    parser.add_argument(
        "--split",
        choices=[split.value for split in Split],
        default=default.value,
        help="Data split to analyse",
    )


def _add_diversity_arguments(parser):
    _add_data_dir(parser)
    parser.add_argument(
        "--models", required=True, help="Teacher directory or student checkpoint to analyse"
    )
    _add_split(parser, Split.TRAIN)
    parser.add_argument(
        "--perturb-source",
        dest="perturb_source",
        default=None,
        help="Models the perturbation directions are computed from (default: --models)",
    )
    parser.add_argument(
        "--diversity.bins",
        "--bins",
        dest="diversity.bins",
        type=int,
        default=None,
        help=f"Number of confidence bins (default: {_DEFAULTS.diversity_bins})",
    )
    _add_loss(parser)
    _add_perturbation(parser)
    parser.add_argument("--out", required=True, help="Output directory")


def _add_jacobian_arguments(parser):
    _add_data_dir(parser)
    parser.add_argument("--teacher", required=True, help="Teacher checkpoint or teacher directory")
    parser.add_argument(
        "--students",
        required=True,
        nargs="+",
        help="Student checkpoints. With two, the cosine similarities of the first are compared to the second.",
    )
    parser.add_argument(
        "--member", type=int, default=0, help="Teacher and subnetwork index to compare"
    )
    parser.add_argument("--of", choices=["probs", "logits"], default="probs", help="Jacobian of what")
    _add_split(parser, Split.VAL)
    parser.add_argument(
        "--snr",
        default=False,
        action="store_true",
        help="Also compute the signal to noise ratio of the Jacobian matching gradient",
    )
    parser.add_argument(
        "--samples", type=int, default=DEFAULT_SNR_SAMPLES, help="Perturbation draws per SNR value"
    )
    parser.add_argument(
        "--etas", type=float, nargs="+", default=list(DEFAULT_SNR_ETAS), help="SNR step sizes"
    )
    parser.add_argument(
        "--snr-examples",
        dest="snr_examples",
        type=int,
        default=DEFAULT_SNR_EXAMPLES,
        help="Number of examples of the split the SNR is computed on",
    )
    _add_loss(parser)
    parser.add_argument("--out", required=True, help="Output directory")


def _add_sweep_arguments(parser):
    _add_data_dir(parser)
    parser.add_argument("--teachers", required=True, help="Directory of teacher checkpoints")
    parser.add_argument("--alphas", type=float, nargs="+", default=None, help="Values of alpha")
    parser.add_argument("--taus", type=float, nargs="+", default=None, help="Values of tau")
    _add_student(parser)
    _add_training(parser)
    _add_loss(parser)
    _add_perturbation(parser)
    parser.add_argument("--out", required=True, help="Result table path (CSV)")


# COMMANDS


def _widths(input_dim: int, hidden: Sequence[int], num_classes: int) -> List[int]:
    return [input_dim, *hidden, num_classes]


def _pick_member(path, index: int) -> Classifier:
    members = ensemble_members(load_model(path))
    if len(members) == 1:
        return members[0]
    if not 0 <= index < len(members):
        raise MemberIndexError(f"{path} has {len(members)} members, no member {index}")
    return members[index]


def _summary(content: dict, run_config: RunConfig) -> dict:
    return {**content, "config_echo": run_config.echo(), "version": tool_version()}


def cmd_gen_data(args, config: DistillConfig, run_config: RunConfig):
    kind = getattr(args, "data.kind")
    num_classes, n_per_class = getattr(args, "data.k"), getattr(args, "data.n")
    if kind == "blobs":
        bundle = gen_blobs(
            num_classes, getattr(args, "data.d"), n_per_class, getattr(args, "data.spread"), config.seed
        )
    else:
        if getattr(args, "data.d") != 2:
            raise ValidationError(f"Spirals are two dimensional, got D={getattr(args, 'data.d')}")
        bundle = gen_spirals(
            num_classes,
            n_per_class,
            getattr(args, "data.noise"),
            config.seed,
            turns=getattr(args, "data.turns"),
        )
    shift = getattr(args, "data.ood_shift")
    if shift is not None:
        bundle.ood = gen_ood_shift(bundle, shift, config.seed + OOD_SEED_OFFSET)
    write_bundle(bundle, args.out, config_echo=run_config.echo())


def cmd_train_teachers(args, config: DistillConfig, run_config: RunConfig):
    data = read_bundle(getattr(args, "data.dir"))
    widths = _widths(data.train.input_dim, getattr(args, "model.hidden"), data.train.num_classes)
    seeds = [config.seed + index for index in range(config.ensemble_size)]
    logger.info("Teacher seeds: %s", seeds)
    out = Path(args.out)
    echo = run_config.echo()

    def on_member(index, result):
        save_checkpoint(result.model, out / f"member_{index}.json", config_echo=echo)
        write_training_log(result.log, out / f"member_{index}_log.csv")

    train_teachers(
        data,
        widths,
        config.ensemble_size,
        config.schedule_config(),
        config.optim_config(),
        seeds,
        on_member=on_member,
    )


def cmd_distill(args, config: DistillConfig, run_config: RunConfig):
    data = read_bundle(getattr(args, "data.dir"))
    teachers = None
    if not args.scratch:
        if args.teachers is None:
            raise UsageError("distill needs --teachers, or --scratch for the baseline without teachers")
        teachers = list(load_ensemble(args.teachers))

    ensemble_size = config.ensemble_size
    if teachers is not None and getattr(args, "model.m") is None:
        ensemble_size = len(teachers)
    hidden = getattr(args, "model.student_hidden")
    if hidden is None:
        if teachers is not None:
            hidden = teachers[0].widths[1:-1]
        else:
            hidden = getattr(args, "model.hidden") or DEFAULT_HIDDEN
    widths = _widths(data.train.input_dim, hidden, data.train.num_classes)

    init_seed = config.seed + STUDENT_INIT_SEED_OFFSET
    train_seed = config.seed + DISTILL_SEED_OFFSET
    logger.info("Student widths %s, M=%d, init seed %d, training seed %d", widths, ensemble_size, init_seed, train_seed)
    student = BatchEnsembleStudent.initialize(
        widths, ensemble_size, init_seed, factor_init=getattr(args, "model.factor_init")
    )
    if teachers is None:
        result = train_student_scratch(
            student, data, config.schedule_config(), config.optim_config(), train_seed
        )
    else:
        result = distill(
            teachers,
            student,
            data,
            config.loss_config(),
            config.perturbation_config(),
            config.schedule_config(),
            config.optim_config(),
            np.random.default_rng(train_seed),
        )

    out = Path(args.out)
    save_checkpoint(student, out, config_echo=run_config.echo())
    log_path = Path(args.log) if args.log is not None else out.with_name(f"{out.stem}_log.csv")
    write_training_log(result.log, log_path)


def cmd_evaluate(args, config: DistillConfig, run_config: RunConfig):
    members = ensemble_members(load_model(args.model))
    data = read_bundle(getattr(args, "data.dir"))
    ood_probs = None
    if args.ood:
        ood_probs = member_probs(members, data.split(Split.OOD).features)
    report = build_report(
        member_probs(members, data.val.features),
        data.val.labels,
        member_probs(members, data.test.features),
        data.test.labels,
        num_bins=config.ece_bins,
        ood_member_probs=ood_probs,
        config_echo=run_config.echo(),
    )
    if args.dee_teachers is not None:
        teachers = list(load_ensemble(args.dee_teachers))
        rng = np.random.default_rng(config.seed + ANALYSIS_SEED_OFFSET)
        test_probs = member_probs(teachers, data.test.features)
        standard_curve = nll_curve(test_probs, data.test.labels, rng)
        calibrated_curve = nll_curve(
            test_probs,
            data.test.labels,
            rng,
            val_member_probs=member_probs(teachers, data.val.features),
            val_labels=data.val.labels,
        )
        report.add_dee(standard_curve, calibrated_curve)

    out = Path(args.out)
    report.save(out)
    write_csv(pd.DataFrame(report.reliability), out.with_name(f"{out.stem}_reliability.csv"))
    logger.info(
        "acc=%.4f nll=%.4f ece=%.4f (tau*=%.3f)",
        report.calibrated["acc"],
        report.calibrated["nll"],
        report.calibrated["ece"],
        report.tau_star,
    )


def cmd_diversity(args, config: DistillConfig, run_config: RunConfig):
    members = ensemble_members(load_model(args.models))
    dataset = read_bundle(getattr(args, "data.dir")).split(args.split)
    sources = members
    if args.perturb_source is not None:
        sources = ensemble_members(load_model(args.perturb_source))

    perturb_cfg = config.perturbation_config()
    perturber = Perturber(perturb_cfg, sources, np.random.default_rng(config.seed + ANALYSIS_SEED_OFFSET))
    features = perturber.perturb(dataset.features, dataset.labels)
    plot = diversity_plot(members, features, config.diversity_bins)

    out = Path(args.out)
    write_csv(plot.to_frame(), out / "diversity.csv")
    summary = {
        "mean_kld": plot.mean_kld,
        "split": args.split,
        "strategy": perturb_cfg.strategy.value,
        "eta": perturb_cfg.eta,
        "num_examples": dataset.num_examples,
        "degenerate_count": perturber.stats.degenerate,
    }
    write_json(out / "diversity.json", _summary(summary, run_config))
    logger.info("mean KLD on %s (%s): %.6g", args.split, perturb_cfg.strategy.value, plot.mean_kld)


def cmd_jacobian(args, config: DistillConfig, run_config: RunConfig):
    if len(args.students) > 2:
        raise UsageError(f"jacobian compares at most two students, got {len(args.students)}")
    if len(args.students) < 2 and not args.snr:
        raise UsageError("jacobian needs two --students for the ROC comparison, or --snr")
    teacher = _pick_member(args.teacher, args.member)
    students = [_pick_member(path, args.member) for path in args.students]
    features = read_bundle(getattr(args, "data.dir")).split(args.split).features
    out = Path(args.out)
    summary: Dict[str, object] = {"split": args.split, "member": args.member, "of": args.of}

    if len(students) == 2:
        positives = jacobian_cosine(teacher, students[0], features, of=args.of)
        negatives = jacobian_cosine(teacher, students[1], features, of=args.of)
        roc = roc_auroc(positives, negatives)
        cosines = pd.DataFrame(
            {
                "student": np.repeat([0, 1], [len(positives), len(negatives)]),
                "cosine": np.concatenate([positives, negatives]),
            }
        )
        write_csv(cosines, out / "jacobian_cosines.csv")
        write_csv(roc.to_frame(), out / "jacobian_roc.csv")
        summary.update(roc.summary())
        logger.info("Jacobian cosine AUROC: %.4f", roc.auroc)

    if args.snr:
        table = snr_table(
            teacher,
            students[0],
            features[: args.snr_examples],
            etas=args.etas,
            n_samples=args.samples,
            rng=np.random.default_rng(config.seed + ANALYSIS_SEED_OFFSET),
            tau=config.tau,
        )
        write_csv(table, out / "snr.csv")
        summary["snr"] = table.to_dict(orient="records")

    write_json(out / "jacobian.json", _summary(summary, run_config))


def cmd_sweep(args, config: DistillConfig, run_config: RunConfig):
    teachers = list(load_ensemble(args.teachers))
    data = read_bundle(getattr(args, "data.dir"))
    hidden = getattr(args, "model.student_hidden") or teachers[0].widths[1:-1]
    widths = _widths(data.train.input_dim, hidden, data.train.num_classes)
    init_seed = config.seed + STUDENT_INIT_SEED_OFFSET

    def student_factory():
        return BatchEnsembleStudent.initialize(
            widths, len(teachers), init_seed, factor_init=getattr(args, "model.factor_init")
        )

    table = sweep_kd_hyperparameters(
        teachers,
        student_factory,
        data,
        args.alphas if args.alphas is not None else [config.alpha],
        args.taus if args.taus is not None else [config.tau],
        config.perturbation_config(),
        config.schedule_config(),
        config.optim_config(),
        config.seed + DISTILL_SEED_OFFSET,
    )
    out = Path(args.out)
    write_csv(table, out)
    best = table.loc[table["val_nll_calibrated"].idxmin()].to_dict()
    write_json(out.with_suffix(".json"), _summary({"cells": len(table), "best": best}, run_config))
    logger.info("Best cell: alpha=%.3g tau=%.3g", best["alpha"], best["tau"])


@dataclass
class Command:
    description: str
    add_arguments: Callable[[configargparse.ArgumentParser], None]
    run: Callable[..., None]


COMMANDS: Dict[str, Command] = {
    "gen-data": Command("Generate a synthetic dataset", _add_gen_data_arguments, cmd_gen_data),
    "train-teachers": Command(
        "Train a deep ensemble of MLP teachers", _add_train_teachers_arguments, cmd_train_teachers
    ),
    "distill": Command(
        "Distill teachers into a BatchEnsemble student", _add_distill_arguments, cmd_distill
    ),
    "evaluate": Command("Write the metrics report of a model", _add_evaluate_arguments, cmd_evaluate),
    "diversity": Command(
        "Diversity plot of an ensemble on (perturbed) inputs", _add_diversity_arguments, cmd_diversity
    ),
    "jacobian": Command(
        "Jacobian similarity and Jacobian matching diagnostics", _add_jacobian_arguments, cmd_jacobian
    ),
    "sweep": Command(
        "Grid search over the distillation weight and temperature", _add_sweep_arguments, cmd_sweep
    ),
}


def get_arg_parser(command: str) -> configargparse.ArgumentParser:
    parser = _base_parser(command, COMMANDS[command].description)
    COMMANDS[command].add_arguments(parser)
    return parser


def get_command_parser() -> configargparse.ArgumentParser:
    parser = configargparse.ArgumentParser(
        prog="odskd",
        description="Ensemble distillation with output diversified input perturbations",
        epilog="commands: "
        + "; ".join(f"{name}: {command.description}" for name, command in COMMANDS.items()),
    )
    parser.add_argument("command", choices=list(COMMANDS), help="Run 'odskd <command> --help' for details")
    return parser


def _setup_logging(args, config: DistillConfig):
    verbosity = args.verbosity if args.verbosity is not None else 2  # info
    # quiet has precedence over verbose
    if args.quiet:
        verbosity = 1  # warn
    elif args.verbose:
        verbosity = 3  # debug
    config.set_verbosity(verbosity, set_global=True)

    # Log to stderr
    root = logging.getLogger()
    if not any(handler.get_name() == _STDERR_HANDLER_NAME for handler in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.set_name(_STDERR_HANDLER_NAME)
        root.addHandler(handler)


def _config_values(args) -> dict:
    values = vars(args)
    return {key: values[key] for key in CONFIG_KEYS if values.get(key) is not None}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Runs one command and returns the exit status: 0 on success, 2 on usage errors, 3 otherwise."""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        command = get_command_parser().parse_args(argv[:1]).command
        parser = get_arg_parser(command)
        args = parser.parse_args(argv[1:])

        config = DistillConfig()
        _setup_logging(args, config)
        logger.debug("Option sources:\n%s", parser.format_values())
        if args.preset is not None:
            config.apply_preset(args.preset)
        config.update(_config_values(args))
        run_config = RunConfig.resolve(command, vars(args), config, PATH_KEYS)

        start = time.monotonic()
        COMMANDS[command].run(args, config, run_config)
        logger.info("%s finished in %s", command, format_timespan(time.monotonic() - start))
    except SystemExit as e:
        if e.code is None or isinstance(e.code, int):
            return e.code or 0
        return 2
    except OdskdException as e:
        report = e.render()
        logger.error("Error: %s", report["error_description"])
        if "error_details" in report:
            logger.error("Details: %s", report["error_details"])
        logger.debug("Error report:\n%s", dump_json(report))
        return e.exit_code
    except Exception as e:  # pylint: disable=broad-except
        logger.error("Error: %s", e)
        return 3
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
