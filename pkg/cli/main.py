#!/usr/bin/env python3
"""`transpro` command: one subcommand per pipeline step, each writing under its output directory."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, NoReturn, Sequence

from core.config import ExperimentConfig, default_output_root, load_config
from core.errors import TransProError, UsageError
from core.evaluation import (
    evaluate_testset,
    g3d_checkpoint_dir,
    load_predictions,
    translate_samples,
    write_gamma_sweep,
)
from core.inference import translate
from core.metrics import gamma_sweep
from core.phantom import PhantomDataset, generate_dataset
from core.volumes import load_volume, project_mean, save_volume
from training import pretrain_hcg, pretrain_vseg, run_ablation, sweep_weights, train_transpro
from training.common import write_run_manifest

from .report import merge_reports

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
ERRORS_FILE = "errors.jsonl"


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="TOML experiment config (defaults when omitted).")
    parser.add_argument("--out", type=Path, default=None, help="Output root (phantom: the dataset directory).")
    parser.add_argument("--seed", type=int, default=None, help="Override run.seed.")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")


def _add_dataset(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dataset", type=Path, default=None, help="Dataset directory (overrides dataset.path).")


def _add_resume(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--resume", action="store_true", help="Continue from the stage's state_last.pt.")
    parser.add_argument("--stop-after", type=int, default=None, help="Stop this invocation after the given epoch.")


def _add_predictions(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--run-dir", type=Path, default=None, help="Run directory holding checkpoints/g3d.")
    parser.add_argument("--pred-dir", type=Path, default=None, help="Score <pred-dir>/<sample>/octa.raw instead of translating.")
    parser.add_argument("--report-dir", type=Path, default=None, help="Where to write the artifacts.")


class _Parser(argparse.ArgumentParser):
    """Turns argparse usage failures into ``UsageError`` so they get an error record."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="transpro", description="OCT to OCTA volumetric translation desk.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="Generate a paired phantom dataset.")
    _add_common(p)

    for name, help_text in (
        ("pretrain-vpg", "Pretrain the vessel segmenter used for VPG."),
        ("pretrain-hcg", "Pretrain the 2D projection translator used for HCG."),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        _add_dataset(p)
        _add_resume(p)

    p = sub.add_parser("train", help="Train the 3D generator with frozen guidance.")
    _add_common(p)
    _add_dataset(p)
    _add_resume(p)
    p.add_argument("--vseg-ckpt", type=Path, default=None)
    p.add_argument("--gpre-ckpt", type=Path, default=None)

    p = sub.add_parser("translate", help="Translate one OCT volume with a G3d checkpoint.")
    _add_common(p)
    p.add_argument("--ckpt", type=Path, default=None, help="G3d checkpoint directory (default <run>/checkpoints/g3d).")
    p.add_argument("--input", type=Path, required=True, help="OCT volume (.raw with .json sidecar).")
    p.add_argument("--output", type=Path, required=True, help="Destination .raw path.")

    p = sub.add_parser("evaluate", help="Score the test split and write the metrics report.")
    _add_common(p)
    _add_dataset(p)
    _add_predictions(p)

    p = sub.add_parser("ablate", help="Run the four-variant guidance ablation.")
    _add_common(p)
    _add_dataset(p)
    p.add_argument("--seeds", type=int, nargs="+", default=None)

    p = sub.add_parser("sweep-gamma", help="Vessel-weighted metrics for gamma = 1.0 ... 0.1.")
    _add_common(p)
    _add_dataset(p)
    _add_predictions(p)
    p.add_argument("--gammas", type=float, nargs="+", default=None)

    p = sub.add_parser("sweep-weights", help="Train the full model with alpha = beta over a value list.")
    _add_common(p)
    _add_dataset(p)
    p.add_argument("--values", type=float, nargs="+", default=None)

    p = sub.add_parser("report", help="Merge metrics reports of several runs.")
    _add_common(p)
    p.add_argument("runs", type=Path, nargs="+", help="Run or report directories, in row order.")
    p.add_argument("--labels", nargs="+", default=None)
    p.add_argument("--report-dir", type=Path, default=None)
    return parser


def _load(args: argparse.Namespace) -> ExperimentConfig:
    return load_config(
        args.config,
        seed=args.seed,
        output_root=None if args.command == "phantom" else args.out,
        dataset=getattr(args, "dataset", None),
    )


def _dataset_out(args: argparse.Namespace, config: ExperimentConfig) -> Path:
    return args.out if args.out is not None else config.dataset.path


def cmd_phantom(args: argparse.Namespace, config: ExperimentConfig) -> None:
    out = _dataset_out(args, config)
    generate_dataset(
        config.dataset.n_train,
        config.dataset.n_val,
        config.dataset.n_test,
        config.run.seed,
        config.dataset.phantom,
        out,
        workers=config.run.num_workers,
        progress=config.run.progress,
    )
    write_run_manifest(config.run_dir(), "phantom", config, {"dataset": out.as_posix()})


def cmd_pretrain_vpg(args: argparse.Namespace, config: ExperimentConfig) -> None:
    pretrain_vseg(config, resume=args.resume, stop_after=args.stop_after)


def cmd_pretrain_hcg(args: argparse.Namespace, config: ExperimentConfig) -> None:
    pretrain_hcg(config, resume=args.resume, stop_after=args.stop_after)


def cmd_train(args: argparse.Namespace, config: ExperimentConfig) -> None:
    result = train_transpro(config, args.vseg_ckpt, args.gpre_ckpt, resume=args.resume, stop_after=args.stop_after)
    print(f"Best epoch {result.best_epoch} (val MAE {result.best_score:.4f}); checkpoint {result.checkpoint_dir}")


def cmd_translate(args: argparse.Namespace, config: ExperimentConfig) -> None:
    ckpt = args.ckpt if args.ckpt is not None else g3d_checkpoint_dir(config.run_dir())
    save_volume(translate(ckpt, load_volume(args.input)), args.output)
    write_run_manifest(config.run_dir(), "translate", config, {"checkpoint": Path(ckpt).as_posix()})
    logger.info(f"Translated {args.input} -> {args.output}")


def cmd_evaluate(args: argparse.Namespace, config: ExperimentConfig) -> None:
    run_dir = args.run_dir if args.run_dir is not None else config.run_dir()
    report = evaluate_testset(
        run_dir,
        config.dataset.path,
        evaluation=config.evaluation,
        out_dir=args.report_dir,
        pred_dir=args.pred_dir,
        config_hash=config.config_hash(),
        workers=config.run.num_workers,
    )
    write_run_manifest(config.run_dir(), "evaluate", config)
    print(json.dumps({k: round(v, 6) for k, v in report.aggregate.items()}, indent=2))


def cmd_ablate(args: argparse.Namespace, config: ExperimentConfig) -> None:
    result = run_ablation(config, seeds=args.seeds)
    print(f"VDC full >= baseline in {result.vdc_wins}/{result.n_seeds} seeds; VDE full <= baseline in {result.vde_wins}/{result.n_seeds}")


def cmd_sweep_gamma(args: argparse.Namespace, config: ExperimentConfig) -> None:
    run_dir = args.run_dir if args.run_dir is not None else config.run_dir()
    out_dir = args.report_dir if args.report_dir is not None else run_dir / "gamma_sweep"
    samples = PhantomDataset(config.dataset.path).require("test")
    if args.pred_dir is not None:
        predictions = load_predictions(args.pred_dir, samples)
    else:
        predictions, _ = translate_samples(g3d_checkpoint_dir(run_dir), samples)
    gammas = tuple(args.gammas) if args.gammas else config.evaluation.gammas
    sweep = gamma_sweep(
        [project_mean(s.octa) for s in samples],
        [project_mean(predictions[s.name]) for s in samples],
        [s.vessel_mask for s in samples],
        gammas,
    )
    write_gamma_sweep(sweep, out_dir)
    write_run_manifest(config.run_dir(), "sweep-gamma", config, {"gammas": list(gammas)})


def cmd_sweep_weights(args: argparse.Namespace, config: ExperimentConfig) -> None:
    sweep_weights(config, values=args.values)


def cmd_report(args: argparse.Namespace, config: ExperimentConfig) -> None:
    out_dir = args.report_dir if args.report_dir is not None else config.run_dir() / "comparison"
    merged = merge_reports(args.runs, out_dir, args.labels)
    write_run_manifest(config.run_dir(), "report", config, {"runs": [Path(r).as_posix() for r in args.runs]})
    print(merged.table, end="")


HANDLERS: dict[str, Callable[[argparse.Namespace, ExperimentConfig], None]] = {
    "phantom": cmd_phantom,
    "pretrain-vpg": cmd_pretrain_vpg,
    "pretrain-hcg": cmd_pretrain_hcg,
    "train": cmd_train,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep-gamma": cmd_sweep_gamma,
    "sweep-weights": cmd_sweep_weights,
    "report": cmd_report,
}


def setup_logging(log_dir: Path | None, command: str, verbose: bool) -> logging.FileHandler | None:
    """Console logging always; a per-command log file once the output directory is known."""
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    file_handler = None
    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_dir / f"{command}.log")
        handlers.insert(0, file_handler)
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, handlers=handlers, force=True)
    return file_handler


def write_error(out_dir: Path, command: str, exc: BaseException, status: int = 1) -> dict:
    """Emit one machine-readable error record on stderr and append it to ``<out>/errors.jsonl``."""
    record = {"command": command, "error": type(exc).__name__, "message": str(exc), "status": status}
    line = json.dumps(record, sort_keys=True)
    print(line, file=sys.stderr)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with (out_dir / ERRORS_FILE).open("a", encoding="utf-8") as handle:
            handle.write(line + "\n")
    except OSError as io_exc:
        logger.error(f"Could not write error record to {out_dir}: {io_exc}")
    return record


def _usage_target(argv: Sequence[str]) -> tuple[str, Path]:
    """Best-effort command name and ``--out`` for an argv that argparse rejected."""
    command = next((a for a in argv if not a.startswith("-")), "transpro")
    out = default_output_root()
    if "--out" in argv:
        index = list(argv).index("--out")
        if index + 1 < len(argv):
            out = Path(argv[index + 1])
    return command, out


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        command, out = _usage_target(argv)
        write_error(out, command, exc, status=2)
        return 2
    error_dir = args.out if args.out is not None else default_output_root()
    file_handler = setup_logging(None, args.command, args.verbose)
    try:
        config = _load(args)
        error_dir = config.run_dir()
        file_handler = setup_logging(error_dir / "logs", args.command, args.verbose)
        logger.info(f"transpro {args.command} (config {config.config_hash()[:12]}, seed {config.run.seed})")
        HANDLERS[args.command](args, config)
    except (TransProError, OSError, ValueError) as exc:
        logger.error(f"{args.command} failed: {exc}")
        write_error(error_dir, args.command, exc)
        return 1
    finally:
        if file_handler is not None:
            logging.getLogger().removeHandler(file_handler)
            file_handler.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
