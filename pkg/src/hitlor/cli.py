"""Command-line entry points: experiment bench, dataset profiler, and
summary recomputation."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .bench import (
    BenchConfig,
    profile_csv,
    profile_dataset,
    recompute_summary,
    run_bench,
    write_outputs,
)
from .classifier import TrainConfig
from .errors import HitlorError
from .store import load_dataset


@click.group()
def main() -> None:
    """Interactive object-retrieval toolkit."""


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--annotations", required=True, type=click.Path(exists=True))
@click.option("--features", required=True, help="comma-separated descriptor files")
@click.option("--strategies", default="go", show_default=True, help="comma-separated strategies")
@click.option("--grids", default="2x2", show_default=True, help="comma-separated grids (RxC)")
@click.option("--classes", default=None, help="comma-separated class labels (default: all)")
@click.option("--Q", "queries_per_class", default=10, show_default=True)
@click.option("--Np", "n_positive", default=1, show_default=True)
@click.option("--Nn", "n_negative", default=5, show_default=True)
@click.option("--T", "max_iterations", default=25, show_default=True)
@click.option("--budget", "-b", default=10, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--parallelism", default=1, show_default=True)
@click.option("--selection", default="uncertainty", show_default=True,
              type=click.Choice(["uncertainty", "random"]))
@click.option("--C", "regularization", default=1.0, show_default=True)
@click.option("--min-overlap-fraction", default=0.0, show_default=True)
@click.option("--gl-pool-keep-negative-patches", is_flag=True, default=False)
@click.option("--map-exclude-labeled", is_flag=True, default=False)
@click.option("--coverage-exclude-query", is_flag=True, default=False)
@click.option("--coverage-k", default=32, show_default=True)
@click.option("--coverage-clusterings", default=10, show_default=True)
@click.option("--out", required=True, type=click.Path())
def bench(
    manifest,
    annotations,
    features,
    strategies,
    grids,
    classes,
    queries_per_class,
    n_positive,
    n_negative,
    max_iterations,
    budget,
    seed,
    parallelism,
    selection,
    regularization,
    min_overlap_fraction,
    gl_pool_keep_negative_patches,
    map_exclude_labeled,
    coverage_exclude_query,
    coverage_k,
    coverage_clusterings,
    out,
):
    """Run the full experiment grid and write report.json / series.csv /
    summary.csv into --out."""
    try:
        config = BenchConfig(
            manifest_path=manifest,
            annotation_path=annotations,
            descriptor_paths=tuple(p.strip() for p in features.split(",") if p.strip()),
            strategies=tuple(s.strip() for s in strategies.split(",") if s.strip()),
            grids=tuple(g.strip() for g in grids.split(",") if g.strip()),
            classes=tuple(c.strip() for c in classes.split(",")) if classes else None,
            queries_per_class=queries_per_class,
            n_positive=n_positive,
            n_negative=n_negative,
            max_iterations=max_iterations,
            budget=budget,
            seed=seed,
            parallelism=parallelism,
            selection=selection,
            min_overlap_fraction=min_overlap_fraction,
            gl_pool_keep_negative_patches=gl_pool_keep_negative_patches,
            map_exclude_labeled=map_exclude_labeled,
            coverage_exclude_query=coverage_exclude_query,
            coverage_k=coverage_k,
            coverage_clusterings=coverage_clusterings,
            train=TrainConfig(C=regularization),
        )
        report = run_bench(config)
        paths = write_outputs(report, out)
    except HitlorError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    for row in report.aggregates:
        deltas = (
            f"  map {row.map_delta_pct:+.3f}%  coverage {row.coverage_delta_pct:+.3f}%"
            f"  sum {row.sum_delta_pct:+.3f}%"
            if row.map_delta_pct is not None
            else ""
        )
        click.echo(
            f"{row.strategy}@{row.grid}: map-auc {row.map_auc:.3f} "
            f"coverage-auc {row.coverage_auc:.3f}{deltas}"
        )
    if report.errors:
        click.echo(f"{len(report.errors)} session(s) failed; see report.json", err=True)
        sys.exit(2)
    click.echo(f"wrote {', '.join(str(p) for p in paths.values())}")


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--annotations", required=True, type=click.Path(exists=True))
@click.option("--out", default=None, type=click.Path(), help="optional CSV output path")
def profile(manifest, annotations, out):
    """Summarize object sizes per class and recommend a patch grid."""
    try:
        dataset = load_dataset(manifest, annotations, [])
        result = profile_dataset(dataset)
    except HitlorError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    csv_text = profile_csv(result)
    click.echo(csv_text, nl=False)
    click.echo(f"recommended grid: {result.grid_recommendation}")
    if out:
        Path(out).write_text(csv_text)


@main.command("eval")
@click.option("--report", "report_path", required=True, type=click.Path(exists=True))
@click.option("--out", default=None, type=click.Path(), help="optional summary.csv path")
def eval_report(report_path, out):
    """Recompute aggregate summaries from an existing report.json."""
    try:
        doc = json.loads(Path(report_path).read_text())
        rows = recompute_summary(doc)
    except (HitlorError, KeyError, json.JSONDecodeError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    for row in rows:
        click.echo(
            f"{row.strategy}@{row.grid}: map-auc {row.map_auc:.3f} "
            f"coverage-auc {row.coverage_auc:.3f} ({row.runs} runs)"
        )
    if out:
        from .bench import BenchReport, summary_csv

        Path(out).write_text(
            summary_csv(BenchReport(config={}, runs=[], aggregates=rows, errors=[]))
        )


@main.command()
@click.option("--out", required=True, type=click.Path())
@click.option("--images", "n_images", default=2000, show_default=True)
@click.option("--seed", default=0, show_default=True)
def synth(out, n_images, seed):
    """Generate a planted synthetic dataset for demos and smoke tests."""
    from .synth import PlantedSpec, write_planted_dataset

    paths = write_planted_dataset(out, PlantedSpec(n_images=n_images), seed=seed)
    click.echo("\n".join(str(p) for p in paths.values()))


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--annotations", default=None, type=click.Path(exists=True))
@click.option("--features", required=True, help="comma-separated descriptor files")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--state-dir", default=None, type=click.Path(), help="session checkpoint directory")
def serve(manifest, annotations, features, host, port, state_dir):
    """Serve the HTTP session API for live annotation."""
    import uvicorn

    from .service import create_app

    dataset = load_dataset(
        manifest, annotations, [p.strip() for p in features.split(",") if p.strip()]
    )
    app = create_app(dataset, state_dir=state_dir)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
