"""Representation strategies: how labeled images become training vectors.

Five families are supported, named by text identifiers:

* ``go``            — whole-image descriptor only.
* ``lo-one-proto``  — one local sample per image; negatives use the patch prototype.
* ``lo-one-rand``   — one local sample per image; negatives use a random patch.
* ``lo-all``        — every patch is a sample; positives contribute both labels.
* ``gl-<fusion>-<base>`` — any local base fused with the global descriptor,
  where fusion is ``concat`` (2d vector) or ``pool`` (elementwise mean).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ValidationError
from .store import Dataset, GridSpec, cell_rectangle

STRATEGY_NAMES = (
    "go",
    "lo-one-proto",
    "lo-one-rand",
    "lo-all",
    "gl-concat-one-proto",
    "gl-concat-one-rand",
    "gl-concat-all",
    "gl-pool-one-proto",
    "gl-pool-one-rand",
    "gl-pool-all",
)

_GLOBAL_GRID = GridSpec(1, 1)


@dataclass(frozen=True)
class Strategy:
    """A parsed strategy: family, local base, fusion mode, and patch grid."""

    kind: str  # "go" | "lo" | "gl"
    base: str | None  # "proto" | "rand" | "all" (None for go)
    fusion: str | None  # "concat" | "pool" (gl only)
    grid: GridSpec

    @classmethod
    def parse(cls, name: str, grid: GridSpec | str | None = None) -> "Strategy":
        if isinstance(grid, str):
            grid = GridSpec.parse(grid)
        name = name.strip().lower()
        if name == "go":
            return cls("go", None, None, _GLOBAL_GRID)
        if grid is None:
            raise ConfigError(f"strategy {name!r} requires a patch grid")
        if grid.is_global:
            raise ConfigError(f"strategy {name!r} needs a grid larger than 1x1")
        if name.startswith("lo-"):
            return cls("lo", _parse_base(name[3:], name), None, grid)
        if name.startswith("gl-"):
            rest = name[3:]
            for fusion in ("concat", "pool"):
                if rest.startswith(fusion + "-"):
                    return cls("gl", _parse_base(rest[len(fusion) + 1 :], name), fusion, grid)
        raise ConfigError(f"unknown strategy {name!r}; expected one of {STRATEGY_NAMES}")

    @property
    def name(self) -> str:
        if self.kind == "go":
            return "go"
        base = {"proto": "one-proto", "rand": "one-rand", "all": "all"}[self.base]
        return f"lo-{base}" if self.kind == "lo" else f"gl-{self.fusion}-{base}"

    @property
    def label(self) -> str:
        return "go" if self.kind == "go" else f"{self.name}@{self.grid.name}"

    def feature_dim(self, d: int) -> int:
        return 2 * d if self.fusion == "concat" else d

    @property
    def required_grids(self) -> tuple[GridSpec, ...]:
        if self.kind == "go":
            return (_GLOBAL_GRID,)
        if self.kind == "lo":
            return (self.grid,)
        return (_GLOBAL_GRID, self.grid)

    @property
    def uses_global(self) -> bool:
        return self.kind in ("go", "gl")

    def split_at(self, d: int) -> int | None:
        """Boundary between the global and local halves of a concat vector."""
        return d if self.fusion == "concat" else None

    def validate_against(self, dataset: Dataset) -> None:
        for grid in self.required_grids:
            if not dataset.has_grid(grid):
                raise ConfigError(
                    f"strategy {self.label} needs a {grid.name} descriptor set, "
                    f"dataset has: {', '.join(g.name for g in dataset.grids) or 'none'}"
                )
        dims = {dataset.descriptor_set(g).dim for g in self.required_grids}
        if len(dims) > 1:
            raise ConfigError(f"descriptor sets disagree on d: {sorted(dims)}")


def _parse_base(text: str, full_name: str) -> str:
    mapping = {"one-proto": "proto", "one-rand": "rand", "all": "all"}
    if text not in mapping:
        raise ConfigError(f"unknown strategy {full_name!r}; expected one of {STRATEGY_NAMES}")
    return mapping[text]


@dataclass(frozen=True)
class PatchOverlap:
    """Which grid cells a region of interest touches.

    ``positive_cells`` and ``negative_cells`` partition the grid; ``best_cell``
    is the cell with the largest intersection area (lowest index on ties).
    """

    positive_cells: tuple[int, ...]
    negative_cells: tuple[int, ...]
    best_cell: int
    areas: tuple[float, ...]


def compute_overlap(
    bbox: Sequence[float],
    grid: GridSpec,
    width: int,
    height: int,
    min_overlap_fraction: float = 0.0,
) -> PatchOverlap:
    """Intersect a bounding box with every grid cell.

    A cell is positive iff its intersection with the box has strictly positive
    area and covers at least ``min_overlap_fraction`` of the box.  The
    largest-overlap cell is always kept positive so the partition never loses
    the object entirely.  Geometry is continuous rectangle intersection, which
    coincides with pixel counting for integer-aligned boxes.
    """
    x0, y0, x1, y1 = (float(v) for v in bbox)
    if not (0 <= x0 <= width and 0 <= y0 <= height and x1 <= width and y1 <= height):
        raise ValidationError(f"bbox {bbox} outside image bounds {width}x{height}")
    if x1 <= x0 or y1 <= y0:
        raise ValidationError(f"degenerate bbox {bbox}")
    box_area = (x1 - x0) * (y1 - y0)
    areas = []
    for m in range(grid.cells):
        cx0, cy0, cx1, cy1 = cell_rectangle(grid, m, width, height)
        iw = min(x1, cx1) - max(x0, cx0)
        ih = min(y1, cy1) - max(y0, cy0)
        areas.append(iw * ih if iw > 0 and ih > 0 else 0.0)
    best = int(np.argmax(areas))  # argmax takes the lowest index on ties
    threshold = min_overlap_fraction * box_area
    positive = [m for m, a in enumerate(areas) if a > 0 and a >= threshold]
    if best not in positive:
        positive.append(best)
        positive.sort()
    negative = [m for m in range(grid.cells) if m not in positive]
    return PatchOverlap(tuple(positive), tuple(negative), best, tuple(areas))


def pooled_prototype(patches: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Elementwise mean of an image's patch descriptors."""
    arr = np.asarray(patches)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValidationError("pooled_prototype needs at least one patch vector")
    return arr.mean(axis=0)


def fuse(global_vec: np.ndarray, local_vec: np.ndarray, fusion: str) -> np.ndarray:
    """Combine a global and a local descriptor: concat (2d) or mean pool (d)."""
    g = np.asarray(global_vec)
    l = np.asarray(local_vec)
    if g.shape != l.shape:
        raise ValidationError(f"fuse length mismatch: {g.shape} vs {l.shape}")
    if fusion == "concat":
        return np.concatenate([g, l])
    if fusion == "pool":
        return (g + l) / 2.0
    raise ConfigError(f"unknown fusion {fusion!r}")


@dataclass(frozen=True)
class Provenance:
    image_id: str
    cell_index: int | None
    kind: str  # "global" | "patch" | "prototype" | "fused"


@dataclass(frozen=True)
class LabeledSample:
    vector: np.ndarray
    label: int
    provenance: Provenance


@dataclass(frozen=True)
class LabeledImage:
    """One relevance judgment: positives carry the region of interest box.

    ``negative_cell`` caches the random patch drawn for this image under the
    one-rand base, so rebuilding the training set never re-rolls it.
    """

    image_id: str
    label: int
    bbox: tuple[float, float, float, float] | None = None
    negative_cell: int | None = None


def build_training_samples(
    strategy: Strategy,
    labeled_image: LabeledImage,
    dataset: Dataset,
    rng: np.random.Generator | None = None,
    *,
    min_overlap_fraction: float = 0.0,
    gl_pool_keep_negative_patches: bool = False,
) -> list[LabeledSample]:
    """Expand one labeled image into training vectors for the given strategy.

    Positive images must carry a bbox.  Under local bases, positives emit the
    largest-overlap patch (one-proto / one-rand) or all overlapped patches
    (all); with ``all``, non-overlapped patches of positives become negative
    samples unless the strategy fuses by concatenation, where the shared global
    half would receive conflicting labels, so only the positive part is kept.
    Pool fusion follows the same rule unless explicitly told otherwise.
    """
    image_id = labeled_image.image_id
    label = labeled_image.label
    if label not in (0, 1):
        raise ValidationError(f"label must be 0 or 1, got {label!r}")
    strategy.validate_against(dataset)

    if strategy.kind == "go":
        vec = np.asarray(dataset.global_vector(image_id), dtype=np.float64)
        return [LabeledSample(vec, label, Provenance(image_id, None, "global"))]

    patches = np.asarray(dataset.patch_matrix(image_id, strategy.grid), dtype=np.float64)
    cells = strategy.grid.cells
    fused = strategy.kind == "gl"
    g = (
        np.asarray(dataset.global_vector(image_id), dtype=np.float64)
        if fused
        else None
    )

    def emit(vec: np.ndarray, lbl: int, cell: int | None, kind: str) -> LabeledSample:
        if fused:
            return LabeledSample(
                fuse(g, vec, strategy.fusion), lbl, Provenance(image_id, cell, "fused")
            )
        return LabeledSample(vec, lbl, Provenance(image_id, cell, kind))

    if label == 1:
        if labeled_image.bbox is None:
            raise ValidationError(f"positive image {image_id!r} has no bbox")
        entry = dataset.manifest.entry(image_id)
        overlap = compute_overlap(
            labeled_image.bbox,
            strategy.grid,
            entry.width,
            entry.height,
            min_overlap_fraction,
        )
        if strategy.base in ("proto", "rand"):
            return [emit(patches[overlap.best_cell], 1, overlap.best_cell, "patch")]
        # base == "all"
        samples = [emit(patches[m], 1, m, "patch") for m in overlap.positive_cells]
        keep_negatives = strategy.kind == "lo" or (
            strategy.fusion == "pool" and gl_pool_keep_negative_patches
        )
        if keep_negatives:
            samples.extend(emit(patches[m], 0, m, "patch") for m in overlap.negative_cells)
        return samples

    # negative image
    if strategy.base == "proto":
        return [emit(pooled_prototype(patches), 0, None, "prototype")]
    if strategy.base == "rand":
        cell = labeled_image.negative_cell
        if cell is None:
            if rng is None:
                raise ValidationError(
                    f"one-rand negative for {image_id!r} needs an rng or a cached cell"
                )
            cell = int(rng.integers(cells))
        if not 0 <= cell < cells:
            raise ValidationError(f"cached cell {cell} out of range for {strategy.grid.name}")
        return [emit(patches[cell], 0, cell, "patch")]
    # base == "all"
    return [emit(patches[m], 0, m, "patch") for m in range(cells)]


@dataclass(frozen=True)
class View:
    vector: np.ndarray
    tag: str
    cell_index: int | None


def inference_views(strategy: Strategy, image_id: str, dataset: Dataset) -> list[View]:
    """Per-image feature views whose maximum score becomes the image score.

    Patch strategies score every cell; prototype-based strategies additionally
    score the patch prototype, since negatives were trained in that space.
    """
    if strategy.kind == "go":
        vec = np.asarray(dataset.global_vector(image_id), dtype=np.float64)
        return [View(vec, "global", None)]
    patches = np.asarray(dataset.patch_matrix(image_id, strategy.grid), dtype=np.float64)
    fused = strategy.kind == "gl"
    g = np.asarray(dataset.global_vector(image_id), dtype=np.float64) if fused else None

    def wrap(vec: np.ndarray) -> np.ndarray:
        return fuse(g, vec, strategy.fusion) if fused else vec

    views = [
        View(wrap(patches[m]), f"cell:{m}", m) for m in range(strategy.grid.cells)
    ]
    if strategy.base == "proto":
        views.append(View(wrap(pooled_prototype(patches)), "prototype", None))
    return views
