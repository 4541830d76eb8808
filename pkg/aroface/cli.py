"""
Command-line entry point.

    aroface [--config FILE] [--log-level LEVEL] [--workers N] <command> [options] [--section.key value ...]

Any trailing `--section.key value` pairs override the config file. Exit codes:
0 success, 1 validation failure (bad config, contract, dataset or a failed
gradient check), 2 numerical abort.
"""

import argparse
import logging
import pathlib
import sys
from typing import List, Optional

import pydantic

from aroface import data as data_io
from aroface import harness
from aroface.errors import ConfigError, ContractViolation, DatasetError, NumericalAbort
from aroface.harness import experiments, reports
from aroface.harness.config import RunConfig
from aroface.harness.evaluation import format_evaluation
from aroface.harness.gradcheck import format_gradcheck
from aroface.harness.training import TrainMode
from aroface.recognizer import Recognizer, load_checkpoint
from aroface.utils import console

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERICAL = 2

EVAL_CONFIG_NAME = "resolved_config.eval.txt"
GRADCHECK_CONFIG_NAME = "resolved_config.gradcheck.txt"


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aroface", description="Alignment-robust face recognition training")
    parser.add_argument("--config", type=pathlib.Path, help="key = value run configuration file")
    parser.add_argument("--log-level", help="logging level (default: AROFACE_LOG_LEVEL or INFO)")
    parser.add_argument("--workers", type=int, help="worker threads for per-sample work")
    parser.add_argument("--env-file", type=pathlib.Path, help="dotenv file with AROFACE_* settings")
    parser.add_argument("--no-banner", action="store_true", help="skip the banner")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic train/test datasets to disk")
    p.add_argument("--out", type=pathlib.Path, help="target directory (default: <output_dir>/data)")
    p.add_argument("--preview", action="store_true", help="also write a PNG contact sheet of the first samples")

    p = sub.add_parser("train", help="train a recognizer")
    p.add_argument("--mode", choices=[m.value for m in TrainMode], default=TrainMode.AROFACE.value)
    p.add_argument("--evaluate", action="store_true", help="evaluate on the test set after training")

    p = sub.add_parser("eval", help="aligned and perturbed evaluation of a checkpoint")
    p.add_argument("--checkpoint", type=pathlib.Path, help="model file (default: <output_dir>/model.bin)")
    p.add_argument("--out", type=pathlib.Path, help="report directory (default: the checkpoint's directory)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    p.add_argument("--trials", type=int, default=100, help="trials per component")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", choices=["phi", "du", "dv", "scale"], help="falsify one Jacobian slot")

    p = sub.add_parser("ablate", help="train+evaluate per attacked component subset")
    p.add_argument("--components", nargs="+", default=["none", "scale", "rotation", "translation", "all"],
                   help="subsets such as none, scale, scale+rotation, all")

    sub.add_parser("alpha-study", help="fixed versus random step size")

    p = sub.add_parser("sweep", help="train+evaluate per value of one budget component or of k")
    p.add_argument("--parameter", required=True, choices=list(experiments.SWEEP_PARAMETERS))
    p.add_argument("--values", required=True, help="comma-separated values")

    p = sub.add_parser("report", help="print the reports found in run directories")
    p.add_argument("dirs", nargs="*", type=pathlib.Path, help="run directories (default: <output_dir>)")
    p.add_argument("--preview", type=pathlib.Path, help="write benign/adversarial pairs of a checkpoint to this PNG")
    p.add_argument("--checkpoint", type=pathlib.Path, help="model for --preview (default: <output_dir>/model.bin)")
    p.add_argument("--count", type=int, default=8)
    return parser


def _resolve(args: argparse.Namespace, extra: List[str]) -> tuple:
    settings = harness.load_settings(args.env_file)
    logging.basicConfig(
        level=(args.log_level or settings.log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    overrides = harness.parse_overrides(extra)
    workers = args.workers or settings.workers
    if workers is not None:
        overrides["workers"] = workers
    cfg = harness.load_config(args.config, overrides)
    if settings.output_root is not None and not cfg.output_dir.is_absolute():
        cfg = cfg.model_copy(update={"output_dir": settings.output_root / cfg.output_dir})
    return cfg, settings


def _gen_data(cfg: RunConfig, args: argparse.Namespace) -> int:
    out = args.out or cfg.output_dir / "data"
    train_set, test_set, _ = harness.prepare_data(cfg.model_copy(update={"dataset": None, "test_dataset": None}))
    data_io.save_dataset(train_set, out / "train")
    data_io.save_dataset(test_set, out / "test")
    harness.write_config(cfg, out)
    if args.preview:
        data_io.save_preview(train_set.images()[:16], out / "preview.png")
    console.success(f"wrote {len(train_set)} train and {len(test_set)} test samples to {out}")
    return EXIT_OK


def _train(cfg: RunConfig, args: argparse.Namespace) -> int:
    if args.evaluate:
        outcome = harness.run_and_evaluate(cfg, args.mode, output_dir=cfg.output_dir)
        print(format_evaluation(outcome.evaluation))
        report = outcome.result.report
    else:
        report = harness.train(cfg, args.mode, output_dir=cfg.output_dir).report
    console.success(f"{report.mode.value} training finished after {report.iterations} iterations; "
                    f"outputs in {cfg.output_dir}")
    return EXIT_OK


def _eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    checkpoint = args.checkpoint or cfg.output_dir / "model.bin"
    console.info(f"evaluating {checkpoint}")
    params = load_checkpoint(checkpoint)
    _, test_set, _ = harness.prepare_data(cfg)
    report = harness.evaluate(Recognizer(params, cfg.margin), test_set, cfg.eval.perturb, cfg.eval.far_list,
                              cfg.eval.seed, workers=cfg.workers, gallery_fraction=cfg.eval.gallery_fraction)
    text = format_evaluation(report)
    out_dir = args.out or checkpoint.parent
    reports.write_report(report, out_dir, experiments.EVALUATION_NAME, text)
    harness.write_config(cfg, out_dir, EVAL_CONFIG_NAME)
    print(text)
    return EXIT_OK


def _gradcheck(cfg: RunConfig, args: argparse.Namespace) -> int:
    report = harness.run_gradcheck(cfg, n_trials=args.trials, seed=args.seed, corrupt=args.corrupt)
    text = format_gradcheck(report)
    reports.write_report(report, cfg.output_dir, "gradcheck", text)
    harness.write_config(cfg, cfg.output_dir, GRADCHECK_CONFIG_NAME)
    print(text)
    if report.passed:
        console.success("all gradients agree with finite differences")
        return EXIT_OK
    console.failure("gradient check failed: " + ", ".join(report.failures()))
    return EXIT_INVALID


def _ablate(cfg: RunConfig, args: argparse.Namespace) -> int:
    table = harness.ablate(cfg, args.components, output_dir=cfg.output_dir)
    harness.write_config(cfg, cfg.output_dir)
    print(experiments.format_experiment(table))
    return EXIT_OK


def _alpha_study(cfg: RunConfig, args: argparse.Namespace) -> int:
    report = harness.alpha_study(cfg, output_dir=cfg.output_dir)
    harness.write_config(cfg, cfg.output_dir)
    print(experiments.format_alpha_study(report))
    return EXIT_OK


def _sweep(cfg: RunConfig, args: argparse.Namespace) -> int:
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"sweep values must be numbers, got {args.values!r}") from e
    table = harness.sweep(cfg, args.parameter, values, output_dir=cfg.output_dir)
    harness.write_config(cfg, cfg.output_dir)
    print(experiments.format_experiment(table))
    return EXIT_OK


def _report(cfg: RunConfig, args: argparse.Namespace) -> int:
    for directory in args.dirs or [cfg.output_dir]:
        found = reports.render_directory(directory)
        if not found:
            console.failure(f"no reports in {directory}")
            continue
        console.section(str(directory))
        for text in found:
            print(text)
    if args.preview is not None:
        params = load_checkpoint(args.checkpoint or cfg.output_dir / "model.bin")
        _, test_set, template = harness.prepare_data(cfg)
        path = experiments.preview_pairs(cfg, Recognizer(params, cfg.margin), test_set, template,
                                         args.preview, args.count)
        console.success(f"wrote preview {path}")
    return EXIT_OK


COMMANDS = {
    "gen-data": _gen_data,
    "train": _train,
    "eval": _eval,
    "gradcheck": _gradcheck,
    "ablate": _ablate,
    "alpha-study": _alpha_study,
    "sweep": _sweep,
    "report": _report,
}


def main(argv: Optional[List[str]] = None) -> int:
    args, extra = _parser().parse_known_args(argv)
    try:
        cfg, _ = _resolve(args, extra)
        if not args.no_banner:
            console.print_banner(f"{args.command} -> {cfg.output_dir}")
        return COMMANDS[args.command](cfg, args)
    except NumericalAbort as e:
        logger.error("numerical abort: %s", e)
        console.failure(str(e))
        return EXIT_NUMERICAL
    except (ConfigError, ContractViolation, DatasetError, pydantic.ValidationError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        console.failure(str(e))
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
