"""Synthetic planted-object datasets for end-to-end validation and demos.

Descriptors are built directly in feature space, no images involved: every
cell of every grid is isotropic Gaussian noise, and each planted class adds a
fixed direction (norm = ``signal_ratio`` times the noise scale) to the cells
its bounding box overlaps.  The whole-image descriptor receives the same
direction scaled by the box's share of the image area, so small objects are
nearly invisible globally but stand out in the patch grids — the regime this
engine is built for.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .representation import compute_overlap
from .store import (
    AnnotationStore,
    Dataset,
    DescriptorSet,
    GridSpec,
    ImageEntry,
    ImageManifest,
    Instance,
    annotations_to_json,
    manifest_to_json,
    write_descriptors,
)


@dataclass(frozen=True)
class PlantedSpec:
    n_images: int = 2000
    dim: int = 16
    n_classes: int = 8
    positive_rate: float = 0.10
    noise_scale: float = 1.0
    signal_ratio: float = 4.0
    image_size: tuple[int, int] = (64, 64)
    grids: tuple[tuple[int, int], ...] = ((2, 2), (4, 4))
    # First half of the classes get boxes inside one cell of the finest grid,
    # second half get boxes spanning several cells.
    small_box_range: tuple[int, int] = (6, 14)
    large_box_range: tuple[int, int] = (24, 48)

    @property
    def class_labels(self) -> tuple[str, ...]:
        return tuple(f"class{i}" for i in range(self.n_classes))

    @property
    def small_classes(self) -> tuple[str, ...]:
        return self.class_labels[: self.n_classes // 2]

    @property
    def large_classes(self) -> tuple[str, ...]:
        return self.class_labels[self.n_classes // 2 :]


def _class_directions(spec: PlantedSpec, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal directions so classes do not interfere in feature space."""
    if spec.n_classes > spec.dim:
        raise ValueError(f"need dim >= n_classes, got {spec.dim} < {spec.n_classes}")
    basis, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.n_classes)))
    return basis.T  # (n_classes, dim) rows of unit norm


def _sample_bbox(
    spec: PlantedSpec, class_index: int, rng: np.random.Generator
) -> tuple[float, float, float, float]:
    width, height = spec.image_size
    small = class_index < spec.n_classes // 2
    if small:
        finest = max(r * c for r, c in spec.grids)
        side = int(round(np.sqrt(finest)))
        cell_w, cell_h = width // side, height // side
        lo, hi = spec.small_box_range
        bw = int(rng.integers(lo, min(hi, cell_w - 1) + 1))
        bh = int(rng.integers(lo, min(hi, cell_h - 1) + 1))
        cx = int(rng.integers(side))
        cy = int(rng.integers(side))
        x0 = cx * cell_w + int(rng.integers(cell_w - bw + 1))
        y0 = cy * cell_h + int(rng.integers(cell_h - bh + 1))
    else:
        lo, hi = spec.large_box_range
        bw = int(rng.integers(lo, hi + 1))
        bh = int(rng.integers(lo, hi + 1))
        x0 = int(rng.integers(width - bw + 1))
        y0 = int(rng.integers(height - bh + 1))
    return (float(x0), float(y0), float(x0 + bw), float(y0 + bh))


def make_planted_dataset(spec: PlantedSpec | None = None, seed: int = 0) -> Dataset:
    """Generate the full dataset in memory: manifest, annotations, and one
    descriptor set per grid (the 1x1 global set is always included)."""
    spec = spec or PlantedSpec()
    rng = np.random.default_rng(seed)
    width, height = spec.image_size
    n = spec.n_images
    dims = spec.dim

    manifest = ImageManifest(
        dataset_name=f"planted-{seed}",
        images=tuple(
            ImageEntry(image_id=f"img{i:05d}", width=width, height=height) for i in range(n)
        ),
    )
    directions = _class_directions(spec, rng)

    # Which images host which classes, and where the object sits.
    n_positive = int(round(spec.positive_rate * n))
    instances: dict[str, list[Instance]] = {}
    placements: list[list[tuple[int, tuple[float, float, float, float]]]] = [[] for _ in range(n)]
    for c, label in enumerate(spec.class_labels):
        rows = rng.choice(n, size=n_positive, replace=False)
        for row in sorted(rows):
            bbox = _sample_bbox(spec, c, rng)
            placements[row].append((c, bbox))
            image_id = manifest.images[row].image_id
            instances.setdefault(image_id, []).append(Instance(class_label=label, bbox=bbox))

    amplitude = spec.signal_ratio * spec.noise_scale
    area = float(width * height)
    descriptor_sets = []
    for grid_shape in ((1, 1), *spec.grids):
        grid = GridSpec(*grid_shape)
        cells = grid.cells
        data = rng.standard_normal((n, cells, dims)) * spec.noise_scale
        for row, placed in enumerate(placements):
            for c, bbox in placed:
                if grid.is_global:
                    x0, y0, x1, y1 = bbox
                    fraction = (x1 - x0) * (y1 - y0) / area
                    data[row, 0] += amplitude * fraction * directions[c]
                else:
                    overlap = compute_overlap(bbox, grid, width, height)
                    for m in overlap.positive_cells:
                        data[row, m] += amplitude * directions[c]
        descriptor_sets.append(
            DescriptorSet(
                grid=grid,
                dim=dims,
                data=data.reshape(n, cells * dims).astype(np.float32),
                source_tag=f"planted-seed{seed}",
            )
        )

    annotations = AnnotationStore(instances, manifest)
    return Dataset(manifest, descriptor_sets, annotations)


def write_planted_dataset(
    out_dir: str | Path, spec: PlantedSpec | None = None, seed: int = 0
) -> dict[str, Path]:
    """Generate and persist a planted dataset; returns the written paths."""
    import json

    dataset = make_planted_dataset(spec, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest_to_json(dataset.manifest), indent=1))
    paths["manifest"] = manifest_path

    annotation_path = out / "annotations.json"
    annotation_path.write_text(json.dumps(annotations_to_json(dataset.annotations), indent=1))
    paths["annotations"] = annotation_path

    for grid in dataset.grids:
        ds = dataset.descriptor_set(grid)
        path = out / f"descriptors_{grid.name}.bin"
        write_descriptors(path, ds)
        paths[f"descriptors_{grid.name}"] = path
    return paths
