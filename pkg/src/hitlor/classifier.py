"""Few-shot binary linear SVM with calibrated scores in (0, 1).

The solver runs dual coordinate descent on the L2-regularized L1-hinge dual
with a deterministic cyclic coordinate order, so retraining on the same
samples always reproduces the same weights.  The bias is learned as an extra
always-one feature.  Scores are the logistic of the signed margin, which puts
the decision boundary exactly at 0.5.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import TrainingError, ValidationError
from .representation import Strategy, inference_views
from .store import Dataset

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn


@njit(cache=True, nogil=True)
def _dual_cd(X, y, upper, tol, max_epochs):  # pragma: no cover - jit-compiled
    """Cyclic dual coordinate descent for the L1-hinge SVM.

    Maintains w = sum_i alpha_i y_i x_i and sweeps coordinates in index order
    until the largest projected-gradient violation drops below ``tol``.
    Returns (w, alpha, achieved_violation, epochs_used).
    """
    n, d = X.shape
    w = np.zeros(d)
    alpha = np.zeros(n)
    qii = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += X[i, j] * X[i, j]
        qii[i] = s
    violation = np.inf
    epochs = 0
    for epoch in range(max_epochs):
        violation = 0.0
        for i in range(n):
            if qii[i] <= 0.0:
                continue
            margin = 0.0
            for j in range(d):
                margin += w[j] * X[i, j]
            grad = y[i] * margin - 1.0
            a = alpha[i]
            if a <= 0.0:
                pg = min(grad, 0.0)
            elif a >= upper[i]:
                pg = max(grad, 0.0)
            else:
                pg = grad
            if abs(pg) > violation:
                violation = abs(pg)
            if pg != 0.0:
                new_a = min(max(a - grad / qii[i], 0.0), upper[i])
                delta = (new_a - a) * y[i]
                if delta != 0.0:
                    alpha[i] = new_a
                    for j in range(d):
                        w[j] += delta * X[i, j]
        epochs = epoch + 1
        if violation <= tol:
            break
    return w, alpha, violation, epochs


@dataclass(frozen=True)
class Calibration:
    """Logistic mapping from signed margin to (0, 1)."""

    scale: float = 1.0
    offset: float = 0.0

    def __post_init__(self) -> None:
        if self.scale <= 0:
            raise ValidationError(f"calibration scale must be positive, got {self.scale}")


@dataclass
class TrainConfig:
    """Solver and preprocessing knobs; defaults suit few-shot sample sets."""

    C: float = 1.0
    class_weighting: str = "balanced"  # or "uniform"
    max_epochs: int = 1000
    optimality_tolerance: float = 1e-4
    l2_normalize_inputs: bool = True
    # Feature index splitting a concat-fused vector into independently
    # normalized halves; None normalizes the whole vector.
    concat_split: int | None = None
    calibration: Calibration = field(default_factory=Calibration)

    def __post_init__(self) -> None:
        if self.C <= 0:
            raise ValidationError(f"C must be positive, got {self.C}")
        if self.max_epochs < 1 or self.optimality_tolerance <= 0:
            raise ValidationError("max_epochs and optimality_tolerance must be positive")
        if self.class_weighting not in ("balanced", "uniform"):
            raise ValidationError(f"unknown class_weighting {self.class_weighting!r}")


def _normalize_rows(X: np.ndarray, split: int | None) -> np.ndarray:
    """Row-wise L2 normalization; concat vectors normalize each half alone.

    Zero rows are left untouched rather than divided by zero.
    """
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    out = X.copy()
    blocks = [(0, X.shape[1])] if split is None else [(0, split), (split, X.shape[1])]
    for lo, hi in blocks:
        block = out[:, lo:hi]
        # Explicit square/sum keeps the per-row reduction independent of the
        # batch size, so batched and one-at-a-time scoring agree bitwise.
        norms = np.sqrt((block * block).sum(axis=1, keepdims=True))
        np.divide(block, norms, out=block, where=norms > 0)
    return out[0] if single else out


@dataclass(frozen=True)
class LinearModel:
    """Trained separator plus the preprocessing needed to score new vectors."""

    weights: np.ndarray
    bias: float
    calibration: Calibration = field(default_factory=Calibration)
    l2_normalize: bool = True
    concat_split: int | None = None
    optimality: float = 0.0
    dual_coefficients: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def margin(self, vector: Sequence[float] | np.ndarray) -> float:
        v = np.asarray(vector, dtype=np.float64)
        if v.shape != self.weights.shape:
            raise ValidationError(f"expected vector of length {self.dim}, got {v.shape}")
        if self.l2_normalize:
            v = _normalize_rows(v, self.concat_split)
        return float((v * self.weights).sum() + self.bias)

    def margins(self, matrix: np.ndarray) -> np.ndarray:
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[1] != self.dim:
            raise ValidationError(f"expected (n, {self.dim}) matrix, got {m.shape}")
        if self.l2_normalize:
            m = _normalize_rows(m, self.concat_split)
        # multiply/sum rather than BLAS matmul: the result per row must not
        # depend on how many rows are scored together.
        return (m * self.weights).sum(axis=1) + self.bias

    def to_json(self) -> dict:
        return {
            "weights": [float(w) for w in self.weights],
            "bias": float(self.bias),
            "calibration": {"scale": self.calibration.scale, "offset": self.calibration.offset},
            "l2_normalize": self.l2_normalize,
            "concat_split": self.concat_split,
            "optimality": self.optimality,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "LinearModel":
        return cls(
            weights=np.asarray(doc["weights"], dtype=np.float64),
            bias=float(doc["bias"]),
            calibration=Calibration(**doc.get("calibration", {})),
            l2_normalize=bool(doc.get("l2_normalize", True)),
            concat_split=doc.get("concat_split"),
            optimality=float(doc.get("optimality", 0.0)),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @classmethod
    def loads(cls, text: str) -> "LinearModel":
        return cls.from_json(json.loads(text))


def train(samples: Sequence, config: TrainConfig | None = None) -> LinearModel:
    """Fit the linear separator on labeled samples.

    Requires at least one sample of each class and uniform vector length.
    The dual is solved until the maximum projected-gradient (KKT) violation
    falls below ``optimality_tolerance``; class 'balanced' weighting scales
    each sample's box constraint inversely to its class frequency.
    """
    config = config or TrainConfig()
    if not samples:
        raise TrainingError("no training samples")
    vectors = [np.asarray(s.vector, dtype=np.float64) for s in samples]
    labels = np.asarray([s.label for s in samples], dtype=np.int64)
    dims = {v.shape for v in vectors}
    if len(dims) != 1 or vectors[0].ndim != 1:
        raise ValidationError(f"samples disagree on vector shape: {sorted(dims)}")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise TrainingError(f"need both classes, got {n_pos} positive / {n_neg} negative")

    X = np.stack(vectors)
    if config.l2_normalize_inputs:
        X = _normalize_rows(X, config.concat_split)
    n, d = X.shape
    # Bias learned as an always-one feature (it is regularized like the rest).
    Xb = np.hstack([X, np.ones((n, 1))])
    y = np.where(labels == 1, 1.0, -1.0)

    if config.class_weighting == "balanced":
        upper = np.where(y > 0, config.C * n / (2.0 * n_pos), config.C * n / (2.0 * n_neg))
    else:
        upper = np.full(n, config.C)

    w, alpha, violation, _ = _dual_cd(
        np.ascontiguousarray(Xb),
        np.ascontiguousarray(y),
        np.ascontiguousarray(upper),
        config.optimality_tolerance,
        config.max_epochs,
    )
    return LinearModel(
        weights=w[:-1].copy(),
        bias=float(w[-1]),
        calibration=config.calibration,
        l2_normalize=config.l2_normalize_inputs,
        concat_split=config.concat_split,
        optimality=float(violation),
        dual_coefficients=alpha,
    )


def _logistic(margin, calibration: Calibration):
    z = calibration.scale * margin + calibration.offset
    # Split by sign for numerical stability at large |z|.
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))


def score(model: LinearModel, vector: Sequence[float] | np.ndarray) -> float:
    """Calibrated relevance score; exactly 0.5 on the decision boundary."""
    return float(_logistic(np.float64(model.margin(vector)), model.calibration))


@dataclass(frozen=True)
class ImageScore:
    image_score: float
    per_view: tuple[float, ...]
    view_tags: tuple[str, ...]


def score_image(
    model: LinearModel, strategy: Strategy, image_id: str, dataset: Dataset
) -> ImageScore:
    """Score one image: the maximum over its per-view scores.

    A high score on any patch signals the object's presence somewhere in the
    image; per-view scores are kept for heatmap display.
    """
    views = inference_views(strategy, image_id, dataset)
    matrix = np.stack([v.vector for v in views])
    margins = model.margins(matrix)
    scores = _logistic(margins, model.calibration)
    return ImageScore(
        image_score=float(scores.max()),
        per_view=tuple(float(s) for s in scores),
        view_tags=tuple(v.tag for v in views),
    )


def _dataset_view_margins(model: LinearModel, strategy: Strategy, dataset: Dataset) -> np.ndarray:
    """(N, n_views) margin matrix over the whole dataset, vectorized.

    Builds exactly the vectors inference_views would and pushes them through
    ``LinearModel.margins`` in one batch per view so that batch scoring and
    per-image scoring agree bitwise.
    """
    n = len(dataset)
    if strategy.kind == "go":
        g = np.asarray(dataset.descriptor_set(strategy.grid).data, dtype=np.float64)
        return model.margins(g)[:, None]

    ds = dataset.descriptor_set(strategy.grid)
    d = ds.dim
    cells = strategy.grid.cells
    patches = np.asarray(ds.data, dtype=np.float64).reshape(n, cells, d)
    g = None
    if strategy.kind == "gl":
        g = np.asarray(dataset.descriptor_set(strategy.required_grids[0]).data, dtype=np.float64)
    columns = []
    for m in range(cells):
        vecs = patches[:, m, :]
        if strategy.kind == "gl":
            vecs = _fuse_batch(g, vecs, strategy.fusion)
        columns.append(model.margins(vecs))
    if strategy.base == "proto":
        proto = patches.mean(axis=1)
        if strategy.kind == "gl":
            proto = _fuse_batch(g, proto, strategy.fusion)
        columns.append(model.margins(proto))
    return np.stack(columns, axis=1)


def _fuse_batch(g: np.ndarray, local: np.ndarray, fusion: str) -> np.ndarray:
    if fusion == "concat":
        return np.hstack([g, local])
    return (g + local) / 2.0


def score_dataset(
    model: LinearModel,
    strategy: Strategy,
    dataset: Dataset,
    exclude: frozenset[str] | set[str] = frozenset(),
) -> dict[str, float]:
    """Image score for every image not excluded; pure read over the matrices."""
    margins = _dataset_view_margins(model, strategy, dataset)
    image_scores = _logistic(margins.max(axis=1), model.calibration)
    return {
        image_id: float(image_scores[row])
        for row, image_id in enumerate(dataset.image_ids)
        if image_id not in exclude
    }
