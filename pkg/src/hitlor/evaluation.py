"""Retrieval quality metrics: average precision, cluster coverage, curve AUC,
and object-size profiling of annotated datasets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence, Set

import numpy as np

from .errors import ValidationError
from .store import AnnotationStore, ImageManifest


def ranked_ids(scores: Mapping[str, float]) -> list[str]:
    """Ids by descending score; ties break by ascending id so rankings are
    deterministic and shared by every consumer (AP, service ranking)."""
    return sorted(scores, key=lambda i: (-scores[i], i))


def average_precision(scores: Mapping[str, float], relevant: Set[str]) -> float:
    """AP of the ranking induced by the scores against a relevant set."""
    if not relevant:
        raise ValidationError("average_precision needs a nonempty relevant set")
    missing = set(relevant) - scores.keys()
    if missing:
        raise ValidationError(f"relevant ids missing from scores: {sorted(missing)[:5]}")
    hits = 0
    total = 0.0
    for rank, image_id in enumerate(ranked_ids(scores), start=1):
        if image_id in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def normalized_auc(values: Sequence[float]) -> float:
    """Trapezoidal area under an iteration curve divided by the interval
    count, so a constant curve maps to itself."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] < 2:
        raise ValidationError("normalized_auc needs at least two values")
    return float((0.5 * (v[:-1] + v[1:])).sum() / (v.shape[0] - 1))


# ---------------------------------------------------------------------------
# k-means coverage


def _kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]), dtype=np.float64)
    centers[0] = X[rng.integers(n)]
    dist_sq = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = dist_sq.sum()
        if total <= 0:
            idx = int(rng.integers(n))  # all points coincide with a center
        else:
            idx = int(rng.choice(n, p=dist_sq / total))
        centers[j] = X[idx]
        dist_sq = np.minimum(dist_sq, ((X - centers[j]) ** 2).sum(axis=1))
    return centers


def kmeans(
    X: np.ndarray,
    k: int,
    rng: np.random.Generator,
    max_iterations: int = 100,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd's algorithm with k-means++ seeding and Euclidean distance.

    Runs until the assignment reaches a fixpoint or the iteration cap; empty
    clusters are re-seeded to the point farthest from its current center.
    Returns (labels, centers, objective trace); the objective (sum of squared
    distances to assigned centers) is non-increasing across iterations.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k < 1 or k > n:
        raise ValidationError(f"k must be in [1, {n}], got {k}")
    centers = _kmeans_pp_init(X, k, rng)
    labels = np.full(n, -1, dtype=np.int64)
    trace: list[float] = []
    for _ in range(max_iterations):
        dists = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = dists.argmin(axis=1)
        trace.append(float(dists[np.arange(n), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        assigned = dists[np.arange(n), labels]
        reseed_order = np.argsort(-assigned)  # worst-served points first
        next_reseed = 0
        for j in range(k):
            mask = labels == j
            if mask.any():
                centers[j] = X[mask].mean(axis=0)
            else:
                centers[j] = X[int(reseed_order[next_reseed])]
                next_reseed += 1
    return labels, centers, trace


@dataclass(frozen=True)
class CoverageConfig:
    k: int = 32
    clusterings: int = 10
    max_kmeans_iterations: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 1 or self.clusterings < 1 or self.max_kmeans_iterations < 1:
            raise ValidationError("coverage config values must be positive")


class CoverageEvaluator:
    """Repeated clusterings of a class's positives, reusable across iterations.

    The clusterings depend only on the positive feature vectors and the seed,
    so a session computes them once and scores each iteration's returned set
    against the fixed cluster assignments.
    """

    def __init__(self, class_positive_features: Mapping[str, np.ndarray], config: CoverageConfig):
        if not class_positive_features:
            raise ValidationError("coverage needs at least one positive image")
        self.config = config
        self._ids = sorted(class_positive_features)
        X = np.stack([np.asarray(class_positive_features[i], dtype=np.float64) for i in self._ids])
        self.effective_k = min(config.k, len(self._ids))
        self._assignments: list[dict[str, int]] = []
        for j in range(config.clusterings):
            rng = np.random.default_rng(config.seed + j)
            labels, _, _ = kmeans(X, self.effective_k, rng, config.max_kmeans_iterations)
            self._assignments.append(
                {image_id: int(labels[row]) for row, image_id in enumerate(self._ids)}
            )

    def coverage_of(self, returned_positives: Set[str]) -> float:
        unknown = set(returned_positives) - set(self._ids)
        if unknown:
            raise ValidationError(
                f"returned ids are not class positives: {sorted(unknown)[:5]}"
            )
        total = 0.0
        for assignment in self._assignments:
            hit = {assignment[i] for i in returned_positives}
            total += len(hit) / self.effective_k
        return total / len(self._assignments)


def coverage(
    returned_positives: Set[str],
    class_positive_features: Mapping[str, np.ndarray],
    config: CoverageConfig,
) -> float:
    """Mean fraction of class clusters containing a returned positive image."""
    return CoverageEvaluator(class_positive_features, config).coverage_of(returned_positives)


# ---------------------------------------------------------------------------
# object size profile

SMALL_THRESHOLD = 1.0 / 16.0  # 6.25% of the image area
LARGE_THRESHOLD = 1.0 / 4.0  # 25%


@dataclass(frozen=True)
class SizeShares:
    small: float
    medium: float
    large: float
    count: int


@dataclass(frozen=True)
class SizeProfile:
    per_class: Mapping[str, SizeShares]
    overall: SizeShares
    grid_recommendation: str


def categorize_instance_area(area_fraction: float) -> str:
    """small < 6.25% <= medium <= 25% < large (boundaries are medium)."""
    if area_fraction < SMALL_THRESHOLD:
        return "small"
    if area_fraction <= LARGE_THRESHOLD:
        return "medium"
    return "large"


def _shares(counts: Mapping[str, int]) -> SizeShares:
    total = sum(counts.values())
    if total == 0:
        return SizeShares(0.0, 0.0, 0.0, 0)
    return SizeShares(
        small=counts.get("small", 0) / total,
        medium=counts.get("medium", 0) / total,
        large=counts.get("large", 0) / total,
        count=total,
    )


def recommend_grid(overall: SizeShares) -> str:
    """Coarse grids suit large objects, fine grids small ones; mixed datasets
    are best swept with both."""
    if overall.small > 0.5:
        return "4x4"
    if overall.large > 0.5:
        return "2x2"
    return "2x2 and 4x4"


def size_profile(annotations: AnnotationStore, manifest: ImageManifest) -> SizeProfile:
    """Categorize every instance by its bbox share of the image area."""
    per_class: dict[str, dict[str, int]] = {}
    overall: dict[str, int] = {}
    for image_id, inst in annotations.all_instances():
        entry = manifest.entry(image_id)
        fraction = inst.area / (entry.width * entry.height)
        category = categorize_instance_area(fraction)
        per_class.setdefault(inst.class_label, {})
        per_class[inst.class_label][category] = per_class[inst.class_label].get(category, 0) + 1
        overall[category] = overall.get(category, 0) + 1
    overall_shares = _shares(overall)
    return SizeProfile(
        per_class={label: _shares(counts) for label, counts in sorted(per_class.items())},
        overall=overall_shares,
        grid_recommendation=recommend_grid(overall_shares),
    )


# ---------------------------------------------------------------------------
# per-run report


@dataclass(frozen=True)
class IterationMetrics:
    iteration: int
    map: float
    coverage: float
    positives_found: int


@dataclass
class RunReport:
    """Metric series of one retrieval session plus its normalized AUCs."""

    query_id: str
    class_label: str
    strategy: str
    grid: str
    seed: int
    series: list[IterationMetrics] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    auc_map: float | None = None
    auc_coverage: float | None = None

    def finalize(self) -> None:
        if len(self.series) >= 2:
            self.auc_map = normalized_auc([m.map for m in self.series])
            self.auc_coverage = normalized_auc([m.coverage for m in self.series])

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "class": self.class_label,
            "strategy": self.strategy,
            "grid": self.grid,
            "seed": self.seed,
            "config": self.config,
            "series": [
                {
                    "iteration": m.iteration,
                    "map": m.map,
                    "coverage": m.coverage,
                    "positives_found": m.positives_found,
                }
                for m in self.series
            ],
            "auc_map": self.auc_map,
            "auc_coverage": self.auc_coverage,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "RunReport":
        report = cls(
            query_id=doc["query_id"],
            class_label=doc["class"],
            strategy=doc["strategy"],
            grid=doc["grid"],
            seed=doc["seed"],
            config=dict(doc.get("config", {})),
            series=[
                IterationMetrics(
                    iteration=row["iteration"],
                    map=row["map"],
                    coverage=row["coverage"],
                    positives_found=row["positives_found"],
                )
                for row in doc.get("series", [])
            ],
        )
        report.auc_map = doc.get("auc_map")
        report.auc_coverage = doc.get("auc_coverage")
        return report
