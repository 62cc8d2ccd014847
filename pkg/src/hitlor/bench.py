"""Batch experiment runner: simulated-feedback sessions over every
(class, query, strategy, grid) combination, with deterministic seeding,
optional thread parallelism, and plot-ready CSV/JSON outputs."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .classifier import TrainConfig
from .errors import ConfigError
from .evaluation import (
    CoverageConfig,
    CoverageEvaluator,
    IterationMetrics,
    RunReport,
    SizeProfile,
    average_precision,
    size_profile,
)
from .loop import (
    QuerySpec,
    SessionConfig,
    init_session,
    run_iteration,
    simulated_oracle,
)
from .representation import Strategy
from .store import Dataset, GridSpec, load_dataset

logger = logging.getLogger(__name__)


def stable_seed(*parts) -> int:
    """Platform-independent 63-bit seed derived from the given parts."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


@dataclass
class BenchConfig:
    manifest_path: str | None = None
    annotation_path: str | None = None
    descriptor_paths: tuple[str, ...] = ()
    strategies: tuple[str, ...] = ("go",)
    grids: tuple[str, ...] = ("2x2",)
    classes: tuple[str, ...] | None = None  # None means every annotated class
    queries_per_class: int = 10
    n_positive: int = 1
    n_negative: int = 5
    max_iterations: int = 25
    budget: int = 10
    seed: int = 0
    parallelism: int = 1
    selection: str = "uncertainty"
    min_overlap_fraction: float = 0.0
    gl_pool_keep_negative_patches: bool = False
    map_exclude_labeled: bool = False
    coverage_exclude_query: bool = False
    coverage_k: int = 32
    coverage_clusterings: int = 10
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        if self.n_positive != 1:
            raise ConfigError("queries carry exactly one positive image (n_positive must be 1)")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be at least 1")

    def to_json(self) -> dict:
        doc = {
            k: v
            for k, v in self.__dict__.items()
            if k not in ("train",) and not k.endswith("_path") and k != "descriptor_paths"
        }
        doc["train"] = {
            "C": self.train.C,
            "class_weighting": self.train.class_weighting,
            "optimality_tolerance": self.train.optimality_tolerance,
            "l2_normalize_inputs": self.train.l2_normalize_inputs,
        }
        for key in ("classes", "strategies", "grids"):
            if doc.get(key) is not None:
                doc[key] = list(doc[key])
        return doc


def generate_queries(
    dataset: Dataset,
    class_label: str,
    queries: int,
    n_positive: int,
    n_negative: int,
    rng: np.random.Generator,
) -> list[QuerySpec]:
    """Seeded query specs for one class; empty (with a warning) if the class
    population cannot support them.

    Positives are drawn without replacement while the pool lasts, then with
    replacement; the query bbox is the image's largest instance, matching what
    the simulated annotator would outline.
    """
    if n_positive != 1:
        raise ConfigError("queries carry exactly one positive image")
    annotations = dataset.require_annotations()
    positives = annotations.positives(class_label)
    negative_pool = [
        i for i in dataset.image_ids if not annotations.is_positive(i, class_label)
    ]
    if len(positives) < n_positive or len(negative_pool) < n_negative:
        logger.warning(
            "skipping class %r: %d positives / %d negatives available",
            class_label,
            len(positives),
            len(negative_pool),
        )
        return []
    if len(positives) >= queries:
        chosen = rng.choice(len(positives), size=queries, replace=False)
    else:
        chosen = rng.choice(len(positives), size=queries, replace=True)
    specs = []
    for idx in chosen:
        positive_id = positives[int(idx)]
        bbox = annotations.largest_instance(positive_id, class_label).bbox
        neg_idx = rng.choice(len(negative_pool), size=n_negative, replace=False)
        specs.append(
            QuerySpec(
                positive_id=positive_id,
                positive_bbox=bbox,
                class_label=class_label,
                negatives=tuple(negative_pool[int(j)] for j in neg_idx),
            )
        )
    return specs


def run_session(
    dataset: Dataset,
    query: QuerySpec,
    session_config: SessionConfig,
    coverage_evaluator: CoverageEvaluator,
    *,
    map_exclude_labeled: bool = False,
    coverage_exclude_query: bool = False,
    query_id: str = "q0",
) -> RunReport:
    """Drive one simulated session to completion and collect its metric series.

    The MAP at iteration t reflects the model trained on feedback through
    t - 1; coverage and positives_found count everything the oracle has
    confirmed through iteration t, the initial query included.
    """
    annotations = dataset.require_annotations()
    class_label = query.class_label
    oracle = simulated_oracle(annotations, class_label)
    relevant = set(annotations.positives(class_label))
    session = init_session(query, session_config, dataset)
    report = RunReport(
        query_id=query_id,
        class_label=class_label,
        strategy=session_config.strategy.name,
        grid=session_config.strategy.grid.name,
        seed=session_config.seed,
    )
    while not session.finished:
        result = run_iteration(session, dataset, oracle)
        if map_exclude_labeled:
            before = {
                i
                for i, e in session.labeled.items()
                if e.iteration_added < result.iteration
            }
            remaining = relevant - before
            if remaining:
                scores = {i: s for i, s in result.scores.items() if i not in before}
                ap = average_precision(scores, remaining)
            else:
                ap = 1.0  # every positive already confirmed
        else:
            ap = average_precision(result.scores, relevant)
        confirmed = set(session.labeled_positive_ids)
        returned = confirmed - {query.positive_id} if coverage_exclude_query else confirmed
        cov = coverage_evaluator.coverage_of(returned)
        report.series.append(
            IterationMetrics(
                iteration=result.iteration,
                map=ap,
                coverage=cov,
                positives_found=len(confirmed),
            )
        )
    report.finalize()
    return report


@dataclass
class AggregateRow:
    strategy: str
    grid: str
    runs: int
    map_auc: float
    coverage_auc: float
    map_delta_pct: float | None = None
    coverage_delta_pct: float | None = None
    sum_delta_pct: float | None = None

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class BenchReport:
    config: dict
    runs: list[RunReport]
    aggregates: list[AggregateRow]
    errors: list[dict]

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "runs": [r.to_json() for r in self.runs],
            "aggregates": [a.to_json() for a in self.aggregates],
            "errors": self.errors,
        }


def expand_strategy_pairs(
    strategies: Sequence[str], grids: Sequence[str]
) -> list[tuple[str, str]]:
    """(strategy, grid) pairs to run; the global-only strategy runs once."""
    pairs = []
    for name in strategies:
        if name == "go":
            pairs.append(("go", "1x1"))
        else:
            for grid in grids:
                pairs.append((name, grid))
    return pairs


def aggregate_runs(runs: Sequence[RunReport], pair_order: Sequence[tuple[str, str]]) -> list[AggregateRow]:
    by_pair: dict[tuple[str, str], list[RunReport]] = {}
    for run in runs:
        by_pair.setdefault((run.strategy, run.grid), []).append(run)
    rows = []
    for strategy, grid in pair_order:
        group = by_pair.get((strategy, grid), [])
        group = [r for r in group if r.auc_map is not None]
        if not group:
            continue
        rows.append(
            AggregateRow(
                strategy=strategy,
                grid=grid,
                runs=len(group),
                map_auc=float(np.mean([r.auc_map for r in group])),
                coverage_auc=float(np.mean([r.auc_coverage for r in group])),
            )
        )
    baseline = next((r for r in rows if r.strategy == "go"), None)
    if baseline is not None and baseline.map_auc > 0 and baseline.coverage_auc > 0:
        for row in rows:
            row.map_delta_pct = 100.0 * (row.map_auc - baseline.map_auc) / baseline.map_auc
            row.coverage_delta_pct = (
                100.0 * (row.coverage_auc - baseline.coverage_auc) / baseline.coverage_auc
            )
            row.sum_delta_pct = row.map_delta_pct + row.coverage_delta_pct
    return rows


def run_bench(config: BenchConfig, dataset: Dataset | None = None) -> BenchReport:
    """Execute the full experiment grid; per-session failures are recorded and
    do not abort the bench.

    Session seeds derive from (seed, class, query index) only, so results for
    one strategy never change when other strategies are added, and parallel
    execution returns exactly the serial report.
    """
    if dataset is None:
        dataset = load_dataset(
            config.manifest_path, config.annotation_path, config.descriptor_paths
        )
    annotations = dataset.require_annotations()
    classes = list(config.classes) if config.classes else list(annotations.classes)

    jobs = []
    coverage_evaluators: dict[tuple[str, int], CoverageEvaluator] = {}
    for class_label in classes:
        rng = np.random.default_rng(stable_seed(config.seed, "queries", class_label))
        queries = generate_queries(
            dataset,
            class_label,
            config.queries_per_class,
            config.n_positive,
            config.n_negative,
            rng,
        )
        for q_index, query in enumerate(queries):
            session_seed = stable_seed(config.seed, class_label, q_index)
            for strategy_name, grid_name in expand_strategy_pairs(
                config.strategies, config.grids
            ):
                jobs.append((class_label, q_index, query, session_seed, strategy_name, grid_name))

    def evaluator_for(class_label: str, session_seed: int) -> CoverageEvaluator:
        key = (class_label, session_seed)
        if key not in coverage_evaluators:
            global_grid = GridSpec(1, 1)
            features = {
                i: dataset.patch_matrix(i, global_grid)[0]
                for i in annotations.positives(class_label)
            }
            coverage_evaluators[key] = CoverageEvaluator(
                features,
                CoverageConfig(
                    k=config.coverage_k,
                    clusterings=config.coverage_clusterings,
                    seed=session_seed,
                ),
            )
        return coverage_evaluators[key]

    # Coverage clusterings are shared by every strategy of the same query, so
    # build them up front (also keeps the worker threads read-only).
    for class_label, q_index, _query, session_seed, _s, _g in jobs:
        evaluator_for(class_label, session_seed)

    def execute(job) -> tuple[RunReport | None, dict | None]:
        class_label, q_index, query, session_seed, strategy_name, grid_name = job
        try:
            strategy = Strategy.parse(strategy_name, grid_name)
            session_config = SessionConfig(
                strategy=strategy,
                budget=config.budget,
                max_iterations=config.max_iterations,
                seed=session_seed,
                selection=config.selection,
                min_overlap_fraction=config.min_overlap_fraction,
                gl_pool_keep_negative_patches=config.gl_pool_keep_negative_patches,
                train=config.train,
            )
            report = run_session(
                dataset,
                query,
                session_config,
                evaluator_for(class_label, session_seed),
                map_exclude_labeled=config.map_exclude_labeled,
                coverage_exclude_query=config.coverage_exclude_query,
                query_id=f"{class_label}-q{q_index}",
            )
            return report, None
        except Exception as exc:  # noqa: BLE001 - bench must survive bad runs
            logger.exception("session failed: %s", job[:2] + job[4:])
            return None, {
                "class": class_label,
                "query_id": f"{class_label}-q{q_index}",
                "strategy": strategy_name,
                "grid": grid_name,
                "error": f"{type(exc).__name__}: {exc}",
            }

    if config.parallelism == 1:
        outcomes = [execute(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            outcomes = list(pool.map(execute, jobs))

    runs = [report for report, _ in outcomes if report is not None]
    errors = [err for _, err in outcomes if err is not None]
    aggregates = aggregate_runs(runs, expand_strategy_pairs(config.strategies, config.grids))
    return BenchReport(config=config.to_json(), runs=runs, aggregates=aggregates, errors=errors)


# ---------------------------------------------------------------------------
# output files


def series_csv(report: BenchReport) -> str:
    lines = ["query_id,class,strategy,grid,iteration,map,coverage,positives_found"]
    for run in report.runs:
        for row in run.series:
            lines.append(
                f"{run.query_id},{run.class_label},{run.strategy},{run.grid},"
                f"{row.iteration},{row.map!r},{row.coverage!r},{row.positives_found}"
            )
    return "\n".join(lines) + "\n"


def summary_csv(report: BenchReport) -> str:
    lines = ["strategy,grid,runs,map_auc,coverage_auc,map_delta_pct,coverage_delta_pct,sum_delta_pct"]
    for row in report.aggregates:
        deltas = (
            f"{row.map_delta_pct:.3f},{row.coverage_delta_pct:.3f},{row.sum_delta_pct:.3f}"
            if row.map_delta_pct is not None
            else ",,"
        )
        lines.append(
            f"{row.strategy},{row.grid},{row.runs},"
            f"{row.map_auc:.3f},{row.coverage_auc:.3f},{deltas}"
        )
    return "\n".join(lines) + "\n"


def write_outputs(report: BenchReport, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out / "report.json",
        "series": out / "series.csv",
        "summary": out / "summary.csv",
    }
    paths["report"].write_text(json.dumps(report.to_json(), indent=1))
    paths["series"].write_text(series_csv(report))
    paths["summary"].write_text(summary_csv(report))
    return paths


def recompute_summary(report_doc: Mapping) -> list[AggregateRow]:
    """Rebuild aggregate rows from a report.json document."""
    runs = [RunReport.from_json(doc) for doc in report_doc.get("runs", [])]
    pair_order: list[tuple[str, str]] = []
    for run in runs:
        key = (run.strategy, run.grid)
        if key not in pair_order:
            pair_order.append(key)
    return aggregate_runs(runs, pair_order)


def profile_dataset(dataset: Dataset) -> SizeProfile:
    return size_profile(dataset.require_annotations(), dataset.manifest)


def profile_csv(profile: SizeProfile) -> str:
    lines = ["class,small,medium,large,instances"]
    for label, shares in profile.per_class.items():
        lines.append(
            f"{label},{shares.small:.3f},{shares.medium:.3f},{shares.large:.3f},{shares.count}"
        )
    o = profile.overall
    lines.append(f"ALL,{o.small:.3f},{o.medium:.3f},{o.large:.3f},{o.count}")
    return "\n".join(lines) + "\n"
