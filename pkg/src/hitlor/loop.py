"""Interactive retrieval session: retrain, score, select, ingest feedback.

Each iteration rebuilds the training set from every labeled image, retrains
the classifier from scratch, scores the whole collection, ranks the unlabeled
images by uncertainty, and hands the top-b batch to an oracle (simulated from
ground truth, or a human behind the HTTP service).  Sessions are fully
deterministic given (seed, query, config, oracle) and can be checkpointed to
JSON between iterations and resumed exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .classifier import LinearModel, TrainConfig, train, score_dataset
from .errors import (
    ConfigError,
    OracleError,
    QueryError,
    SamplingError,
    SessionStateError,
    ValidationError,
)
from .representation import LabeledImage, Strategy, build_training_samples
from .store import AnnotationStore, Dataset


@dataclass(frozen=True)
class QuerySpec:
    """Initial query: one positive image with its region of interest, plus
    either an explicit negative list or a count to sample."""

    positive_id: str
    positive_bbox: tuple[float, float, float, float]
    class_label: str | None = None  # ground-truth class in benchmark mode
    negatives: tuple[str, ...] | None = None
    negative_count: int | None = None

    def __post_init__(self) -> None:
        if (self.negatives is None) == (self.negative_count is None):
            raise ValidationError("provide either explicit negatives or a negative_count")
        if self.negatives is not None and self.positive_id in self.negatives:
            raise ValidationError("negatives must be disjoint from the positive image")


@dataclass
class SessionConfig:
    strategy: Strategy
    budget: int = 10
    max_iterations: int = 25
    seed: int = 0
    selection: str = "uncertainty"  # or "random" (baseline for comparisons)
    min_overlap_fraction: float = 0.0
    gl_pool_keep_negative_patches: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise ConfigError(f"budget must be at least 1, got {self.budget}")
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be at least 1, got {self.max_iterations}")
        if self.selection not in ("uncertainty", "random"):
            raise ConfigError(f"unknown selection mode {self.selection!r}")


@dataclass
class LabeledEntry:
    label: int
    bbox: tuple[float, float, float, float] | None
    iteration_added: int
    negative_cell: int | None = None


@dataclass(frozen=True)
class Feedback:
    relevant: bool
    bbox: tuple[float, float, float, float] | None = None


class Oracle(Protocol):
    def __call__(self, image_ids: Sequence[str]) -> list[Feedback]: ...


@dataclass(frozen=True)
class PendingBatch:
    iteration: int  # 1-based index of the iteration this batch belongs to
    image_ids: tuple[str, ...]
    scores: Mapping[str, float]
    nonce: str


@dataclass(frozen=True)
class IterationResult:
    iteration: int
    batch: tuple[str, ...]
    feedback: tuple[tuple[str, Feedback], ...]
    scores: Mapping[str, float]


@dataclass
class Session:
    config: SessionConfig
    query: QuerySpec
    labeled: dict[str, LabeledEntry]
    rng: np.random.Generator
    iteration: int = 0
    model: LinearModel | None = None
    status: str = "active"  # active | finished | exhausted
    history: list[dict] = field(default_factory=list)
    pending: PendingBatch | None = None

    @property
    def finished(self) -> bool:
        return self.status in ("finished", "exhausted")

    @property
    def labeled_positive_ids(self) -> tuple[str, ...]:
        return tuple(i for i, e in self.labeled.items() if e.label == 1)


def al_score(s: float) -> float:
    """Uncertainty of a relevance score: peaks at 0.5, falls off linearly."""
    if not 0.0 <= s <= 1.0:
        raise ValidationError(f"score must lie in [0, 1], got {s}")
    return 1.0 - abs(0.5 - s)


def select_batch(scores: Mapping[str, float], labeled: set[str], b: int) -> list[str]:
    """The b unlabeled ids with the highest uncertainty, most uncertain first;
    ties break by ascending id.  Returns fewer iff fewer remain unlabeled."""
    if b < 1:
        raise ValidationError(f"batch size must be at least 1, got {b}")
    candidates = [i for i in scores if i not in labeled]
    candidates.sort(key=lambda i: (-al_score(scores[i]), i))
    return candidates[:b]


def _needs_negative_cell(strategy: Strategy) -> bool:
    return strategy.base == "rand"


def init_session(
    query: QuerySpec,
    config: SessionConfig,
    dataset: Dataset,
    rng: np.random.Generator | None = None,
    benchmark: bool | None = None,
) -> Session:
    """Seed the labeled set with the query positive and sampled negatives.

    In benchmark mode the class label is ground truth: the positive is checked
    to contain the class and sampled negatives are verified not to.  In live
    mode the label is free-form, negatives are drawn uniformly and assumed
    negative.  ``benchmark=None`` infers the mode from whether a class label
    and annotations are both present.
    """
    config.strategy.validate_against(dataset)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if query.positive_id not in dataset.manifest:
        raise QueryError(f"unknown positive image {query.positive_id!r}")
    if benchmark is None:
        benchmark = query.class_label is not None and dataset.annotations is not None
    if benchmark and (query.class_label is None or dataset.annotations is None):
        raise ConfigError("benchmark mode needs a class label and annotations")
    if benchmark and not dataset.annotations.is_positive(query.positive_id, query.class_label):
        raise QueryError(
            f"image {query.positive_id!r} contains no instance of {query.class_label!r}"
        )

    if query.negatives is not None:
        negatives = list(query.negatives)
        unknown = [i for i in negatives if i not in dataset.manifest]
        if unknown:
            raise QueryError(f"unknown negative image ids: {unknown[:5]}")
    else:
        count = query.negative_count
        if count < 1:
            raise ConfigError("training needs at least one negative; negative_count must be >= 1")
        if benchmark:
            pool = [
                i
                for i in dataset.image_ids
                if i != query.positive_id
                and not dataset.annotations.is_positive(i, query.class_label)
            ]
        else:
            pool = [i for i in dataset.image_ids if i != query.positive_id]
        if count > len(pool):
            raise SamplingError(f"cannot sample {count} negatives from a pool of {len(pool)}")
        negatives = [pool[j] for j in rng.choice(len(pool), size=count, replace=False)]

    labeled: dict[str, LabeledEntry] = {}
    labeled[query.positive_id] = LabeledEntry(
        label=1, bbox=tuple(query.positive_bbox), iteration_added=0
    )
    for image_id in negatives:
        entry = LabeledEntry(label=0, bbox=None, iteration_added=0)
        if _needs_negative_cell(config.strategy):
            entry.negative_cell = int(rng.integers(config.strategy.grid.cells))
        labeled[image_id] = entry
    return Session(config=config, query=query, labeled=labeled, rng=rng)


def rebuild_training_samples(session: Session, dataset: Dataset) -> list:
    """Expand every labeled image under the session strategy, insertion order."""
    samples = []
    for image_id, entry in session.labeled.items():
        samples.extend(
            build_training_samples(
                session.config.strategy,
                LabeledImage(
                    image_id=image_id,
                    label=entry.label,
                    bbox=entry.bbox,
                    negative_cell=entry.negative_cell,
                ),
                dataset,
                min_overlap_fraction=session.config.min_overlap_fraction,
                gl_pool_keep_negative_patches=session.config.gl_pool_keep_negative_patches,
            )
        )
    return samples


def _train_config_for(session: Session, dataset: Dataset) -> TrainConfig:
    cfg = session.config.train
    split = session.config.strategy.split_at(
        dataset.descriptor_set(session.config.strategy.required_grids[0]).dim
    )
    if cfg.concat_split != split:
        cfg = replace(cfg, concat_split=split)
    return cfg


def propose_batch(session: Session, dataset: Dataset) -> PendingBatch:
    """Retrain on the current labels, score everything, pick the next batch.

    Scores are kept over the full collection (labeled included) so evaluation
    sees the complete ranking; uncertainty selection itself only considers
    unlabeled images.
    """
    if session.finished:
        raise SessionStateError(f"session is {session.status}")
    if session.pending is not None:
        return session.pending
    samples = rebuild_training_samples(session, dataset)
    session.model = train(samples, _train_config_for(session, dataset))
    scores = score_dataset(session.model, session.config.strategy, dataset)
    labeled_ids = set(session.labeled)
    if session.config.selection == "random":
        pool = sorted(i for i in scores if i not in labeled_ids)
        take = min(session.config.budget, len(pool))
        chosen = sorted(session.rng.choice(len(pool), size=take, replace=False)) if take else []
        batch = [pool[j] for j in chosen]
    else:
        batch = select_batch(scores, labeled_ids, session.config.budget)
    if not batch:
        session.status = "exhausted"
        raise SessionStateError("unlabeled pool exhausted")
    iteration = session.iteration + 1
    session.pending = PendingBatch(
        iteration=iteration,
        image_ids=tuple(batch),
        scores=scores,
        nonce=f"iter-{iteration}",
    )
    return session.pending


def full_image_bbox(dataset: Dataset, image_id: str) -> tuple[float, float, float, float]:
    entry = dataset.manifest.entry(image_id)
    return (0.0, 0.0, float(entry.width), float(entry.height))


def ingest_feedback(
    session: Session,
    feedback: Mapping[str, Feedback],
    dataset: Dataset,
) -> IterationResult:
    """Merge one batch worth of relevance judgments and advance the iteration.

    Feedback must cover exactly the outstanding batch.  Relevant images without
    a box get the full-image box so the loop can continue.
    """
    if session.pending is None:
        raise SessionStateError("no outstanding batch")
    pending = session.pending
    if set(feedback) != set(pending.image_ids):
        raise ValidationError(
            f"feedback ids do not match the outstanding batch "
            f"(expected {len(pending.image_ids)}, got {len(feedback)})"
        )
    merged: list[tuple[str, Feedback]] = []
    for image_id in pending.image_ids:  # batch order keeps replays identical
        fb = feedback[image_id]
        if image_id in session.labeled:
            raise ValidationError(f"image {image_id!r} is already labeled")
        if fb.relevant:
            bbox = fb.bbox if fb.bbox is not None else full_image_bbox(dataset, image_id)
            entry = LabeledEntry(label=1, bbox=tuple(bbox), iteration_added=pending.iteration)
        else:
            entry = LabeledEntry(label=0, bbox=None, iteration_added=pending.iteration)
            if _needs_negative_cell(session.config.strategy):
                entry.negative_cell = int(session.rng.integers(session.config.strategy.grid.cells))
        session.labeled[image_id] = entry
        merged.append((image_id, replace(fb, bbox=entry.bbox)))
    session.iteration = pending.iteration
    session.pending = None
    result = IterationResult(
        iteration=pending.iteration,
        batch=pending.image_ids,
        feedback=tuple(merged),
        scores=pending.scores,
    )
    session.history.append(
        {
            "iteration": result.iteration,
            "batch": list(result.batch),
            "feedback": [
                {"image_id": i, "relevant": fb.relevant, "bbox": list(fb.bbox) if fb.bbox else None}
                for i, fb in result.feedback
            ],
        }
    )
    if session.iteration >= session.config.max_iterations:
        session.status = "finished"
    elif len(session.labeled) >= len(dataset):
        session.status = "exhausted"
    return result


def run_iteration(session: Session, dataset: Dataset, oracle: Oracle) -> IterationResult:
    """One full loop turn: propose a batch, query the oracle, merge feedback."""
    pending = propose_batch(session, dataset)
    answers = oracle(pending.image_ids)
    if len(answers) != len(pending.image_ids):
        raise OracleError(
            f"oracle returned {len(answers)} answers for {len(pending.image_ids)} images"
        )
    return ingest_feedback(session, dict(zip(pending.image_ids, answers)), dataset)


def simulated_oracle(annotations: AnnotationStore, class_label: str) -> Callable:
    """Ground-truth stand-in for the human annotator.

    Marks an image relevant iff it contains the class and returns the largest
    instance's box, mimicking a user who outlines the most salient object.
    """

    def oracle(image_ids: Sequence[str]) -> list[Feedback]:
        answers = []
        for image_id in image_ids:
            if image_id not in annotations.manifest:
                raise OracleError(f"unknown image id {image_id!r}")
            instance = annotations.largest_instance(image_id, class_label)
            if instance is None:
                answers.append(Feedback(relevant=False))
            else:
                answers.append(Feedback(relevant=True, bbox=instance.bbox))
        return answers

    return oracle


# ---------------------------------------------------------------------------
# checkpointing


def session_to_checkpoint(session: Session) -> dict:
    """JSON-able snapshot taken between iterations; resuming re-proposes any
    outstanding batch deterministically, so only durable state is stored."""
    cfg = session.config
    return {
        "version": 1,
        "config": {
            "strategy": cfg.strategy.name,
            "grid": cfg.strategy.grid.name,
            "budget": cfg.budget,
            "max_iterations": cfg.max_iterations,
            "seed": cfg.seed,
            "selection": cfg.selection,
            "min_overlap_fraction": cfg.min_overlap_fraction,
            "gl_pool_keep_negative_patches": cfg.gl_pool_keep_negative_patches,
            "train": {
                "C": cfg.train.C,
                "class_weighting": cfg.train.class_weighting,
                "max_epochs": cfg.train.max_epochs,
                "optimality_tolerance": cfg.train.optimality_tolerance,
                "l2_normalize_inputs": cfg.train.l2_normalize_inputs,
                "calibration": {
                    "scale": cfg.train.calibration.scale,
                    "offset": cfg.train.calibration.offset,
                },
            },
        },
        "query": {
            "positive_id": session.query.positive_id,
            "positive_bbox": list(session.query.positive_bbox),
            "class_label": session.query.class_label,
            "negatives": list(session.query.negatives) if session.query.negatives else None,
            "negative_count": session.query.negative_count,
        },
        "labeled": [
            {
                "image_id": image_id,
                "label": entry.label,
                "bbox": list(entry.bbox) if entry.bbox else None,
                "iteration_added": entry.iteration_added,
                "negative_cell": entry.negative_cell,
            }
            for image_id, entry in session.labeled.items()
        ],
        "iteration": session.iteration,
        "status": session.status,
        "rng_state": _encode_rng_state(session.rng),
        "history": session.history,
        "model": session.model.to_json() if session.model is not None else None,
    }


def session_from_checkpoint(doc: Mapping, dataset: Dataset) -> Session:
    from .classifier import Calibration

    cfg_doc = doc["config"]
    train_doc = dict(cfg_doc.get("train", {}))
    if "calibration" in train_doc:
        train_doc["calibration"] = Calibration(**train_doc["calibration"])
    config = SessionConfig(
        strategy=Strategy.parse(cfg_doc["strategy"], cfg_doc["grid"]),
        budget=cfg_doc["budget"],
        max_iterations=cfg_doc["max_iterations"],
        seed=cfg_doc["seed"],
        selection=cfg_doc.get("selection", "uncertainty"),
        min_overlap_fraction=cfg_doc.get("min_overlap_fraction", 0.0),
        gl_pool_keep_negative_patches=cfg_doc.get("gl_pool_keep_negative_patches", False),
        train=TrainConfig(**train_doc),
    )
    qdoc = doc["query"]
    query = QuerySpec(
        positive_id=qdoc["positive_id"],
        positive_bbox=tuple(qdoc["positive_bbox"]),
        class_label=qdoc.get("class_label"),
        negatives=tuple(qdoc["negatives"]) if qdoc.get("negatives") else None,
        negative_count=qdoc.get("negative_count"),
    )
    labeled = {
        row["image_id"]: LabeledEntry(
            label=row["label"],
            bbox=tuple(row["bbox"]) if row.get("bbox") else None,
            iteration_added=row["iteration_added"],
            negative_cell=row.get("negative_cell"),
        )
        for row in doc["labeled"]
    }
    rng = np.random.default_rng(config.seed)
    rng.bit_generator.state = _decode_rng_state(doc["rng_state"])
    session = Session(
        config=config,
        query=query,
        labeled=labeled,
        rng=rng,
        iteration=doc["iteration"],
        status=doc["status"],
        history=list(doc.get("history", [])),
    )
    if doc.get("model"):
        session.model = LinearModel.from_json(doc["model"])
    config.strategy.validate_against(dataset)
    return session


def _encode_rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    # PCG64 state integers exceed 64 bits; store them as strings for JSON.
    return {
        "bit_generator": state["bit_generator"],
        "state": {k: str(v) for k, v in state["state"].items()},
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }


def _decode_rng_state(doc: Mapping) -> dict:
    return {
        "bit_generator": doc["bit_generator"],
        "state": {k: int(v) for k, v in doc["state"].items()},
        "has_uint32": doc["has_uint32"],
        "uinteger": doc["uinteger"],
    }
