"""Test-set evaluation: translate, score every sample, and write the report artifacts."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Mapping, Sequence

from .checkpoints import LoaderRegistry
from .config import EvaluationConfig
from .inference import Translator
from .metrics import (
    METRIC_NAMES,
    TABLE_COLUMNS,
    GammaSweep,
    MetricsReport,
    ReportFlags,
    SampleMetrics,
    WeightingConfig,
    aggregate,
    gamma_sweep,
    score_sample,
)
from .phantom import PhantomDataset, StoredSample
from .plots import plot_gamma_sweep, plot_metric_bars, plot_triptych
from .utils import sha256_hex, write_canonical_json
from .volumes import Volume, load_volume, project_mean, save_projection_image, save_volume

logger = logging.getLogger(__name__)

REPORT_JSON = "metrics.json"
REPORT_CSV = "metrics.csv"
SWEEP_JSON = "gamma_sweep.json"
SWEEP_CSV = "gamma_sweep.csv"
SWEEP_PNG = "gamma_sweep.png"

_SAMPLE_COLUMNS = [*METRIC_NAMES, "mae_proj", "psnr_proj", "ssim_proj", "vd_gt", "vd_pred"]


def g3d_checkpoint_dir(run_dir: Path) -> Path:
    return Path(run_dir) / "checkpoints" / "g3d"


def dataset_hash(dataset_dir: Path) -> str:
    manifest = Path(dataset_dir) / "manifest.json"
    if not manifest.exists():
        raise FileNotFoundError(f"Dataset manifest not found: {manifest}")
    return sha256_hex(manifest.read_bytes())


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[object]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in row])


def write_report(report: MetricsReport, out_dir: Path) -> None:
    write_canonical_json(out_dir / REPORT_JSON, report.model_dump(mode="json"))
    rows = [[s.name, *[getattr(s, c) for c in _SAMPLE_COLUMNS]] for s in report.samples]
    rows.append(["mean", *[report.aggregate.get(c, float("nan")) for c in _SAMPLE_COLUMNS]])
    write_csv(out_dir / REPORT_CSV, ["sample", *_SAMPLE_COLUMNS], rows)


def write_gamma_sweep(sweep: GammaSweep, out_dir: Path, label: str = "test") -> None:
    write_canonical_json(out_dir / SWEEP_JSON, sweep.as_dict())
    write_csv(
        out_dir / SWEEP_CSV,
        ["gamma", "mae_v", "psnr_v", "ssim_v"],
        list(zip(sweep.gammas, sweep.mae_v, sweep.psnr_v, sweep.ssim_v)),
    )
    plot_gamma_sweep({label: sweep}, out_dir / SWEEP_PNG)


def load_predictions(pred_dir: Path, samples: Sequence[StoredSample]) -> dict[str, Volume]:
    """Read ``<pred_dir>/<sample>/octa.raw`` for every test sample."""
    pred_dir = Path(pred_dir)
    if not pred_dir.exists():
        raise FileNotFoundError(f"Prediction directory not found: {pred_dir}")
    return {s.name: load_volume(pred_dir / s.name / "octa.raw") for s in samples}


def translate_samples(
    g3d_ckpt: Path, samples: Sequence[StoredSample], out_dir: Path | None = None
) -> tuple[dict[str, Volume], LoaderRegistry]:
    translator = Translator(g3d_ckpt)
    predictions: dict[str, Volume] = {}
    for sample in samples:
        predictions[sample.name] = translator(sample.oct)
        if out_dir is not None:
            save_volume(predictions[sample.name], Path(out_dir) / sample.name / "octa.raw")
    return predictions, translator.registry


def evaluate_predictions(
    samples: Sequence[StoredSample],
    predictions: Mapping[str, Volume],
    evaluation: EvaluationConfig,
    *,
    workers: int = 1,
) -> tuple[list[SampleMetrics], ReportFlags]:
    weighting = WeightingConfig(gamma=evaluation.gamma)

    def _score(sample: StoredSample) -> SampleMetrics:
        return score_sample(
            sample.name,
            sample.octa,
            predictions[sample.name],
            sample.vessel_mask,
            weighting,
            evaluation.patch_size,
            evaluation.psnr_cap,
        )

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        scored = sorted(pool.map(_score, samples), key=lambda s: s.name)

    L, W = samples[0].octa.shape[:2]
    flags = ReportFlags(
        degenerate_vdc_pairs=sum(int(s.vdc_degenerate) for s in scored),
        psnr_capped_bscans=sum(s.psnr_capped_bscans for s in scored),
        density_cropped=bool(L % evaluation.patch_size or W % evaluation.patch_size),
    )
    if flags.psnr_capped_bscans:
        logger.warning(f"{flags.psnr_capped_bscans} B-scan(s) had zero MSE; PSNR capped at {evaluation.psnr_cap} dB")
    if flags.density_cropped:
        logger.warning(f"Map size {L}x{W} is not divisible by patch {evaluation.patch_size}; densities use a center crop")
    return scored, flags


def evaluate_testset(
    run_dir: Path | None,
    dataset_dir: Path,
    *,
    evaluation: EvaluationConfig | None = None,
    out_dir: Path | None = None,
    pred_dir: Path | None = None,
    config_hash: str = "",
    workers: int = 1,
) -> MetricsReport:
    """
    Score the test split of a dataset and write metrics JSON/CSV, the gamma sweep and triptych PNGs.

    Predictions come from ``pred_dir`` when given (no model is loaded), otherwise from the
    run's best G3d checkpoint.

    Raises:
        FileNotFoundError: dataset or prediction directory missing
        CheckpointError: no usable G3d checkpoint in the run directory
        EmptySetError: the test split is empty
    """
    evaluation = evaluation or EvaluationConfig()
    if out_dir is None:
        if run_dir is None:
            raise ValueError("evaluate_testset needs an out_dir when no run_dir is given")
        out_dir = Path(run_dir) / "report"
    out_dir = Path(out_dir)

    dataset = PhantomDataset(dataset_dir)
    samples = dataset.require("test")

    if pred_dir is not None:
        predictions = load_predictions(pred_dir, samples)
        source = "predictions"
    else:
        if run_dir is None:
            raise ValueError("evaluate_testset needs a run_dir or a pred_dir")
        predictions, registry = translate_samples(g3d_checkpoint_dir(run_dir), samples, out_dir / "predictions")
        logger.debug(f"Models loaded for evaluation: {registry.loaded}")
        source = "g3d"

    scored, flags = evaluate_predictions(samples, predictions, evaluation, workers=workers)
    report = MetricsReport(
        n=len(scored),
        gamma=evaluation.gamma,
        patch_size=evaluation.patch_size,
        samples=scored,
        aggregate=aggregate(scored),
        flags=flags,
        config_hash=config_hash,
        dataset_hash=dataset_hash(dataset_dir),
        source=source,
    )
    write_report(report, out_dir)

    gt_maps = [project_mean(s.octa) for s in samples]
    pred_maps = [project_mean(predictions[s.name]) for s in samples]
    sweep = gamma_sweep(gt_maps, pred_maps, [s.vessel_mask for s in samples], evaluation.gammas)
    write_gamma_sweep(sweep, out_dir)

    for sample, pred_map in zip(samples, pred_maps):
        save_projection_image(pred_map, out_dir / "projections" / f"{sample.name}.png")
    if evaluation.triptychs:
        for sample, gt_map, pred_map in zip(samples, gt_maps, pred_maps):
            plot_triptych(project_mean(sample.oct), pred_map, gt_map, out_dir / "triptychs" / f"{sample.name}.png", sample.name)

    logger.info(
        f"Evaluated {report.n} test samples: MAE {report.aggregate['mae']:.4f}, "
        f"VDE {report.aggregate['vde']:.4f}, VDC {report.aggregate['vdc']:.4f}"
    )
    return report


def load_report(path: Path) -> MetricsReport:
    path = Path(path)
    if path.is_dir():
        path = path / REPORT_JSON
    if not path.exists():
        raise FileNotFoundError(f"Metrics report not found: {path}")
    return MetricsReport.model_validate_json(path.read_text(encoding="utf-8"))


def format_table(rows: Sequence[tuple[str, Mapping[str, float]]], columns: Sequence[str]) -> str:
    """Plain-text table; rows keep the given order, missing values print as '-'."""
    width = max([len("run"), *(len(label) for label, _ in rows)])
    header = f"{'run':<{width}}  " + "  ".join(f"{c.upper():>10}" for c in columns)
    lines = [header, "-" * len(header)]
    for label, values in rows:
        cells = []
        for c in columns:
            value = values.get(c)
            cells.append(f"{'-':>10}" if value is None else f"{value:>10.4f}")
        lines.append(f"{label:<{width}}  " + "  ".join(cells))
    return "\n".join(lines) + "\n"


def write_comparison(
    rows: Sequence[tuple[str, Mapping[str, float]]], out_dir: Path, stem: str, notes: Sequence[str] = ()
) -> str:
    """JSON and CSV over every metric, the five-column text table (plus notes), and a bar chart."""
    out_dir = Path(out_dir)
    write_canonical_json(
        out_dir / f"{stem}.json",
        {"rows": [{"run": label, **values} for label, values in rows], "notes": list(notes)},
    )
    write_csv(
        out_dir / f"{stem}.csv",
        ["run", *METRIC_NAMES],
        [[label, *(values.get(m, float("nan")) for m in METRIC_NAMES)] for label, values in rows],
    )
    table = format_table(rows, TABLE_COLUMNS) + "".join(f"! {note}\n" for note in notes)
    (out_dir / f"{stem}.txt").write_text(table, encoding="utf-8")
    plot_metric_bars(rows, TABLE_COLUMNS, out_dir / f"{stem}.png")
    return table
