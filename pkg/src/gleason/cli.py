"""
Command-line interface for the Gleason grading pipeline.
"""

import json
import logging
import sys
from collections.abc import Callable
from pathlib import Path
from typing import Any

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from .annotation import MODEL_CLASSES
from .cancellation import managed_resources
from .config import SPLITS, BackendSpec, PipelineConfig, load_config_file, resolve_config
from .core import (
    DatasetPreparer,
    OverlayRenderer,
    PredictionEvaluator,
    SlidePredictor,
    fit_stain_file,
)
from .errors import ConfigError, GleasonError
from .progress import ProgressEmitter
from .timing import MetricsCollector, format_prometheus_metrics

console = Console()
logger = logging.getLogger(__name__)

BINARY_MODES = {"exclude-artefacts": "exclude", "benign-artefacts": "benign"}


def setup_logging(verbose: bool = False) -> None:
    """Set up logging configuration."""
    level = logging.DEBUG if verbose else logging.INFO

    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True)],
        force=True,
    )


def parse_ratios(ctx, param, value: str | None) -> tuple[float, float, float] | None:
    """``62,15,23`` (percent) or ``0.62,0.15,0.23`` -> fractions."""
    if value is None:
        return None
    try:
        parts = tuple(float(part) for part in value.split(","))
    except ValueError as e:
        raise click.BadParameter(f"expected three comma-separated numbers, got {value!r}") from e
    if len(parts) != 3:
        raise click.BadParameter(f"expected train,val,test ratios, got {value!r}")
    if sum(parts) > 1.0 + 1e-9:
        parts = tuple(part / 100.0 for part in parts)
    return parts


def parse_balance(ctx, param, values: tuple[str, ...]) -> list[dict[str, Any]] | None:
    """``sponge=0.04`` entries -> BalanceSpec documents."""
    if not values:
        return None
    specs = []
    for value in values:
        name, sep, fraction = value.partition("=")
        if not sep:
            raise click.BadParameter(f"expected CLASS=FRACTION, got {value!r}")
        try:
            specs.append({"target": name.strip(), "target_fraction": float(fraction)})
        except ValueError as e:
            raise click.BadParameter(f"fraction must be a number, got {fraction!r}") from e
    return specs


def parse_backend(ctx, param, value: str | None) -> BackendSpec | None:
    if value is None:
        return None
    try:
        return BackendSpec.parse(value)
    except ConfigError as e:
        raise click.BadParameter(str(e)) from e


def load_pipeline_config(ctx: click.Context, overrides: dict[str, Any]) -> PipelineConfig:
    """Resolve flag > config file > default for one command."""
    config_path = ctx.obj.get("config_path")
    file_values = load_config_file(config_path) if config_path else {}
    return resolve_config(file_values, overrides)


def write_run_metrics(path: Path, collector: MetricsCollector) -> None:
    """JSON for ``.json`` paths, Prometheus text exposition otherwise."""
    metrics = collector.finish()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        if path.suffix.lower() == ".json":
            json.dump(metrics.to_json_metrics(), f, indent=2)
            f.write("\n")
        else:
            f.write(format_prometheus_metrics(metrics))
    console.print(f"  • Metrics: {path}")
    logger.info(f"Run metrics exported to {path}")


def run_workflow(
    ctx: click.Context,
    command: str,
    overrides: dict[str, Any],
    body: Callable[[PipelineConfig, ProgressEmitter, MetricsCollector, Any], None],
    metrics_path: Path | None = None,
    progress_events: bool = False,
) -> None:
    """Shared error handling, resources, progress and metrics for every command."""
    try:
        config = load_pipeline_config(ctx, overrides)
        progress = ProgressEmitter(enabled=progress_events)
        collector = MetricsCollector(command)
        with managed_resources(ram_limit=config.ram_limit) as resources:
            body(config, progress, collector, resources)
        collector.finish()
        if metrics_path:
            write_run_metrics(metrics_path, collector)
    except KeyboardInterrupt:
        console.print(f"\n[yellow]{command} interrupted; partial outputs removed[/yellow]")
        sys.exit(1)
    except GleasonError as e:
        logger.error(f"{command} failed: {e}")
        logger.debug("Traceback", exc_info=True)
        sys.exit(1)
    except Exception as e:
        logger.error(f"{command} failed: {e}", exc_info=True)
        sys.exit(1)


def metrics_option(fn):
    fn = click.option(
        "--metrics",
        "metrics_path",
        type=click.Path(path_type=Path),
        help="Write run metrics (Prometheus text, or JSON for .json)",
    )(fn)
    return click.option(
        "--progress-events", is_flag=True, help="Emit JSON progress events on stdout"
    )(fn)


@click.group()
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="TOML or JSON configuration file",
)
@click.option("--verbose", "-v", is_flag=True, help="Enable verbose logging")
@click.version_option(package_name="gleason")
@click.pass_context
def main(ctx: click.Context, config_path: Path | None, verbose: bool) -> None:
    """
    Gleason grading of prostate whole-slide images, tile by tile.

    \b
    prepare    slides + annotations -> labeled tile dataset
    predict    slide -> predictions CSV + heatmap overlay
    evaluate   predictions + manifest -> metrics report
    render     slide + predictions CSV -> heatmap overlay
    fit-stain  reference image -> Reinhard target statistics
    """
    setup_logging(verbose)
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path


@main.command()
@click.option(
    "--slides",
    "slides_dir",
    required=True,
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    help="Directory of slide files",
)
@click.option(
    "--annotations",
    "annotations_dir",
    required=True,
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    help="Directory of GeoJSON annotations named after the slides",
)
@click.option(
    "--out", "out_dir", required=True, type=click.Path(path_type=Path), help="Output directory"
)
@click.option("--seed", type=int, help="Split/balance seed (default: 42)")
@click.option(
    "--ratios", callback=parse_ratios, help="Train,val,test ratios (default: 62,15,23)"
)
@click.option(
    "--balance",
    multiple=True,
    callback=parse_balance,
    help="CLASS=FRACTION downsampling, repeatable (default: sponge=0.04)",
)
@click.option(
    "--group-by-slide/--no-group-by-slide",
    default=None,
    help="Keep all tiles of a slide in one split",
)
@click.option("--tile-size", type=int, help="Tile side in pixels (default: 1024)")
@click.option("--workers", type=int, help="Worker threads (default: 1)")
@metrics_option
@click.pass_context
def prepare(
    ctx: click.Context,
    slides_dir: Path,
    annotations_dir: Path,
    out_dir: Path,
    seed: int | None,
    ratios: tuple[float, float, float] | None,
    balance: list[dict[str, Any]] | None,
    group_by_slide: bool | None,
    tile_size: int | None,
    workers: int | None,
    metrics_path: Path | None,
    progress_events: bool,
) -> None:
    """Build a labeled, split and balanced tile dataset."""
    overrides = {
        "split.seed": seed,
        "split.ratios": ratios,
        "split.group_by_slide": group_by_slide,
        "balance": balance,
        "tile_size_px": tile_size,
        "workers": workers,
    }

    def body(config, progress, collector, resources):
        console.print(f"[bold green]Preparing dataset from {slides_dir}[/bold green]")
        console.print(f"  • Tile size: {config.tile_size_px}px")
        console.print(f"  • Ratios: {', '.join(f'{r:.2%}' for r in config.split.ratios)}")
        console.print(f"  • Seed: {config.split.seed}")
        preparer = DatasetPreparer(config, progress, collector, resources)
        result = preparer.prepare(slides_dir, annotations_dir, out_dir)
        console.print(distribution_table(result.distribution))
        console.print("[bold green]✓ Dataset prepared[/bold green]")
        console.print(f"  • Manifest: {result.manifest_path}")
        console.print(f"  • Tiles kept: {len(result.tiles)} of {result.tiles_seen}")

    run_workflow(ctx, "prepare", overrides, body, metrics_path, progress_events)


def distribution_table(distribution) -> Table:
    """Per-class counts and percentages for each split."""
    table = Table(title="Class distribution")
    table.add_column("Class")
    for split in (*SPLITS, "all"):
        table.add_column(split, justify="right")
    for cls in MODEL_CLASSES:
        cells = []
        for split in (*SPLITS, "all"):
            counts = distribution.get(split, {})
            total = sum(counts.values())
            n = counts.get(cls, 0)
            cells.append(f"{n} ({n / total:.1%})" if total else "0")
        table.add_row(cls.label, *cells)
    table.add_row(
        "Total", *(str(sum(distribution.get(s, {}).values())) for s in (*SPLITS, "all"))
    )
    return table


@main.command()
@click.option(
    "--slide",
    "slide_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Slide to classify",
)
@click.option(
    "--backend",
    callback=parse_backend,
    help="lookup:FILE, model:FILE or remote:URL",
)
@click.option(
    "--out", "out_overlay", required=True, type=click.Path(path_type=Path), help="Overlay TIFF"
)
@click.option(
    "--csv", "out_csv", required=True, type=click.Path(path_type=Path), help="Predictions CSV"
)
@click.option("--workers", type=int, help="Worker threads (default: 1)")
@click.option("--alpha", type=float, help="Overlay opacity (default: 0.35)")
@click.option("--threshold", type=float, help="Minimum confidence to tint (default: 0)")
@click.option("--batch-size", type=int, help="Tiles per classify call (default: 28)")
@click.option("--tile-size", type=int, help="Tile side in pixels (default: 1024)")
@click.option(
    "--stain-target",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Reinhard target statistics from fit-stain",
)
@metrics_option
@click.pass_context
def predict(
    ctx: click.Context,
    slide_path: Path,
    backend: BackendSpec | None,
    out_overlay: Path,
    out_csv: Path,
    workers: int | None,
    alpha: float | None,
    threshold: float | None,
    batch_size: int | None,
    tile_size: int | None,
    stain_target: Path | None,
    metrics_path: Path | None,
    progress_events: bool,
) -> None:
    """Classify every tile of a slide and render the heatmap overlay."""
    overrides = {
        "backend.kind": backend.kind if backend else None,
        "backend.locator": backend.locator if backend else None,
        "backend.batch_size": batch_size,
        "workers": workers,
        "color_map.alpha": alpha,
        "color_map.threshold": threshold,
        "tile_size_px": tile_size,
        "stain_target": stain_target,
    }

    def body(config, progress, collector, resources):
        if not config.backend.locator:
            raise ConfigError("No backend configured; pass --backend or set [backend]")
        console.print(f"[bold green]Predicting {slide_path}[/bold green]")
        console.print(f"  • Backend: {config.backend.kind} ({config.backend.locator})")
        console.print(f"  • Workers: {config.workers}")
        with SlidePredictor(config, progress, collector, resources) as predictor:
            result = predictor.predict(slide_path, out_overlay, out_csv)

        table = Table(title=f"Predicted classes of {result.slide_id}")
        table.add_column("Class")
        table.add_column("Tiles", justify="right")
        for cls in MODEL_CLASSES:
            table.add_row(cls.label, str(result.label_counts.get(cls, 0)))
        console.print(table)
        console.print("[bold green]✓ Prediction completed[/bold green]")
        console.print(f"  • CSV: {result.csv_path}")
        console.print(f"  • Overlay: {result.overlay_path}")

    run_workflow(ctx, "predict", overrides, body, metrics_path, progress_events)


@main.command()
@click.option(
    "--pred",
    "pred_csv",
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Predictions CSV",
)
@click.option(
    "--truth",
    "truth_manifest",
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Manifest CSV with ground-truth labels",
)
@click.option(
    "--report", "report_path", required=True, type=click.Path(path_type=Path), help="JSON report"
)
@click.option(
    "--binary-mode",
    type=click.Choice(list(BINARY_MODES)),
    help="Artefact handling in benign vs malignant (default: exclude-artefacts)",
)
@click.option(
    "--fine-scope",
    type=click.Choice(["malignant", "all"]),
    help="Tiles in Gleason 3 vs 4&5 (default: malignant)",
)
@click.option("--split", type=click.Choice(list(SPLITS)), help="Only evaluate one split")
@click.option(
    "--embed-metrics", is_flag=True, help="Include run timings and counters in the JSON report"
)
@metrics_option
@click.pass_context
def evaluate(
    ctx: click.Context,
    pred_csv: Path,
    truth_manifest: Path,
    report_path: Path,
    binary_mode: str | None,
    fine_scope: str | None,
    split: str | None,
    embed_metrics: bool,
    metrics_path: Path | None,
    progress_events: bool,
) -> None:
    """Compute the metrics report of a prediction set."""
    overrides = {
        "artefact_mode": BINARY_MODES.get(binary_mode) if binary_mode else None,
        "fine_scope": fine_scope,
    }

    def body(config, progress, collector, resources):
        evaluator = PredictionEvaluator(config, progress, collector, resources)
        report = evaluator.evaluate(
            pred_csv, truth_manifest, report_path, split, embed_metrics=embed_metrics
        )
        console.print(report_table(report))
        console.print("[bold green]✓ Evaluation completed[/bold green]")
        console.print(f"  • Report: {report_path}")

    run_workflow(ctx, "evaluate", overrides, body, metrics_path, progress_events)


def report_table(report) -> Table:
    def fmt(value):
        return "n/a" if value is None else f"{value:.3f}"

    table = Table(title=f"Tile-level metrics ({report.confusion.total} tiles)")
    for name in ("Class", "Acc", "F1", "AUC", "Sens", "Spec", "N"):
        table.add_column(name, justify="left" if name == "Class" else "right")
    for cls, m in report.per_class.items():
        table.add_row(
            cls.label,
            fmt(m.accuracy),
            fmt(m.f1),
            fmt(m.auc),
            fmt(m.sensitivity),
            fmt(m.specificity),
            str(m.support),
        )
    macro = report.macro
    table.add_row(
        "[bold]Macro[/bold]",
        fmt(macro["accuracy"]),
        fmt(macro["f1"]),
        fmt(macro["auc"]),
        fmt(macro["sensitivity"]),
        fmt(macro["specificity"]),
        str(report.confusion.total),
    )
    for name, m in report.binary_tasks.items():
        if m is None:
            table.add_row(name, "n/a", "", "", "n/a", "n/a", "0")
        else:
            table.add_row(
                name,
                fmt(m.accuracy),
                "",
                "",
                fmt(m.sensitivity),
                fmt(m.specificity),
                str(m.n_tiles),
            )
    return table


@main.command()
@click.option(
    "--slide",
    "slide_path",
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Slide the predictions belong to",
)
@click.option(
    "--pred",
    "pred_csv",
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Predictions CSV",
)
@click.option(
    "--out", "out_overlay", required=True, type=click.Path(path_type=Path), help="Overlay TIFF"
)
@click.option("--alpha", type=float, help="Overlay opacity (default: 0.35)")
@click.option("--threshold", type=float, help="Minimum confidence to tint (default: 0)")
@click.option(
    "--graded-alpha/--flat-alpha",
    default=None,
    help="Scale opacity by the predicted probability",
)
@click.option(
    "--tint-artefacts/--no-tint-artefacts",
    default=None,
    help="Tint tiles predicted as artefacts",
)
@click.option("--tile-size", type=int, help="Tile side in pixels (default: 1024)")
@click.option("--workers", type=int, help="Worker threads (default: 1)")
@metrics_option
@click.pass_context
def render(
    ctx: click.Context,
    slide_path: Path,
    pred_csv: Path,
    out_overlay: Path,
    alpha: float | None,
    threshold: float | None,
    graded_alpha: bool | None,
    tint_artefacts: bool | None,
    tile_size: int | None,
    workers: int | None,
    metrics_path: Path | None,
    progress_events: bool,
) -> None:
    """Re-render an overlay from stored predictions."""
    overrides = {
        "color_map.alpha": alpha,
        "color_map.threshold": threshold,
        "color_map.graded_alpha": graded_alpha,
        "color_map.tint_artefacts": tint_artefacts,
        "tile_size_px": tile_size,
        "workers": workers,
    }

    def body(config, progress, collector, resources):
        renderer = OverlayRenderer(config, progress, collector, resources)
        path = renderer.render(slide_path, pred_csv, out_overlay)
        console.print(f"[bold green]✓ Overlay written to {path}[/bold green]")

    run_workflow(ctx, "render", overrides, body, metrics_path, progress_events)


@main.command("fit-stain")
@click.option(
    "--reference",
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    help="Reference image (PNG or TIFF tile)",
)
@click.option("--out", required=True, type=click.Path(path_type=Path), help="Stats JSON")
@click.pass_context
def fit_stain(ctx: click.Context, reference: Path, out: Path) -> None:
    """Fit Reinhard target statistics on a reference image."""

    def body(config, progress, collector, resources):
        resources.register_output(out)
        stats = fit_stain_file(reference, out)
        console.print(f"[bold green]✓ Stain target written to {out}[/bold green]")
        console.print(f"  • mean: {', '.join(f'{v:.4f}' for v in stats['mean'])}")
        console.print(f"  • std: {', '.join(f'{v:.4f}' for v in stats['std'])}")

    run_workflow(ctx, "fit-stain", {}, body)


if __name__ == "__main__":
    main()
