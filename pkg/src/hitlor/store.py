"""Immutable datasets: image manifest, annotations, and binary descriptor files.

A dataset bundles one descriptor matrix per grid configuration.  The manifest
order defines the row index used by every descriptor file; a 1x1 grid holds
the global (whole-image) descriptors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, FormatError, LoadError, ValidationError

MAGIC = b"HITLORF1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIIHH32s")  # magic, version, N, d, rows, cols, source_tag


@dataclass(frozen=True)
class GridSpec:
    """Regular rows x cols tiling of an image; 1x1 denotes the global view."""

    rows: int
    cols: int

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValidationError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")

    @property
    def cells(self) -> int:
        return self.rows * self.cols

    @property
    def is_global(self) -> bool:
        return self.rows == 1 and self.cols == 1

    @property
    def name(self) -> str:
        return f"{self.rows}x{self.cols}"

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        parts = text.lower().split("x")
        if len(parts) != 2:
            raise ValidationError(f"grid must look like 'RxC', got {text!r}")
        try:
            return cls(int(parts[0]), int(parts[1]))
        except ValueError as exc:
            raise ValidationError(f"grid must look like 'RxC', got {text!r}") from exc


def cell_rectangle(grid: GridSpec, m: int, width: int, height: int) -> tuple[int, int, int, int]:
    """Half-open pixel rectangle (x0, y0, x1, y1) of cell ``m``.

    Cells are indexed row-major and tile the image exactly: boundaries fall at
    floor(k * size / count), so non-divisible sizes leave no gaps or overlaps.
    """
    if not 0 <= m < grid.cells:
        raise IndexError(f"cell {m} out of range for {grid.name} grid")
    gy, gx = divmod(m, grid.cols)
    x0 = gx * width // grid.cols
    x1 = (gx + 1) * width // grid.cols
    y0 = gy * height // grid.rows
    y1 = (gy + 1) * height // grid.rows
    return x0, y0, x1, y1


@dataclass(frozen=True)
class ImageEntry:
    image_id: str
    width: int
    height: int
    file_path: str | None = None


@dataclass(frozen=True)
class ImageManifest:
    dataset_name: str
    images: tuple[ImageEntry, ...]
    _index: Mapping[str, int] = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self) -> None:
        index: dict[str, int] = {}
        for row, entry in enumerate(self.images):
            if entry.image_id in index:
                raise ValidationError(f"duplicate image id {entry.image_id!r} in manifest")
            if entry.width <= 0 or entry.height <= 0:
                raise ValidationError(
                    f"image {entry.image_id!r} has non-positive size {entry.width}x{entry.height}"
                )
            index[entry.image_id] = row
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.images)

    def row_of(self, image_id: str) -> int:
        try:
            return self._index[image_id]
        except KeyError:
            raise KeyError(f"unknown image id {image_id!r}") from None

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._index

    def entry(self, image_id: str) -> ImageEntry:
        return self.images[self.row_of(image_id)]

    @property
    def image_ids(self) -> tuple[str, ...]:
        return tuple(e.image_id for e in self.images)


@dataclass(frozen=True)
class Instance:
    """One annotated object: class label plus pixel bounding box."""

    class_label: str
    bbox: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.bbox
        return (x1 - x0) * (y1 - y0)


class AnnotationStore:
    """Ground-truth class instances per image (oracle and evaluation only)."""

    def __init__(self, instances: Mapping[str, Sequence[Instance]], manifest: ImageManifest):
        self._by_image: dict[str, tuple[Instance, ...]] = {}
        for image_id, items in instances.items():
            if image_id not in manifest:
                raise LoadError(f"annotation references unknown image id {image_id!r}")
            entry = manifest.entry(image_id)
            for inst in items:
                x0, y0, x1, y1 = inst.bbox
                if not (0 <= x0 < x1 <= entry.width and 0 <= y0 < y1 <= entry.height):
                    raise ValidationError(
                        f"bbox {inst.bbox} of class {inst.class_label!r} out of bounds "
                        f"for image {image_id!r} ({entry.width}x{entry.height})"
                    )
            self._by_image[image_id] = tuple(items)
        self._manifest = manifest
        classes: set[str] = set()
        for items in self._by_image.values():
            classes.update(inst.class_label for inst in items)
        self._classes = tuple(sorted(classes))

    @property
    def manifest(self) -> ImageManifest:
        return self._manifest

    @property
    def classes(self) -> tuple[str, ...]:
        return self._classes

    def instances_of(self, image_id: str) -> tuple[Instance, ...]:
        return self._by_image.get(image_id, ())

    def is_positive(self, image_id: str, class_label: str) -> bool:
        """An image is positive for a class iff it has at least one instance."""
        return any(i.class_label == class_label for i in self.instances_of(image_id))

    def positives(self, class_label: str) -> tuple[str, ...]:
        """Positive image ids for a class, in manifest order."""
        return tuple(
            e.image_id for e in self._manifest.images if self.is_positive(e.image_id, class_label)
        )

    def largest_instance(self, image_id: str, class_label: str) -> Instance | None:
        """Largest-area instance of a class; ties break to the lexicographically
        smallest bbox tuple so the choice is deterministic."""
        candidates = [i for i in self.instances_of(image_id) if i.class_label == class_label]
        if not candidates:
            return None
        return max(candidates, key=lambda i: (i.area, tuple(-c for c in i.bbox)))

    def all_instances(self) -> Iterable[tuple[str, Instance]]:
        for image_id, items in self._by_image.items():
            for inst in items:
                yield image_id, inst


@dataclass(frozen=True)
class DescriptorSet:
    """N x (M*d) float32 matrix; cell m of image i occupies columns [m*d, (m+1)*d)."""

    grid: GridSpec
    dim: int
    data: np.ndarray
    source_tag: str = ""

    def __post_init__(self) -> None:
        if self.data.ndim != 2 or self.data.shape[1] != self.grid.cells * self.dim:
            raise ValidationError(
                f"descriptor matrix shape {self.data.shape} does not match "
                f"{self.grid.name} grid with d={self.dim}"
            )

    @property
    def count(self) -> int:
        return self.data.shape[0]

    def cells_of(self, row: int) -> np.ndarray:
        """(M, d) view of one image's cell descriptors."""
        return self.data[row].reshape(self.grid.cells, self.dim)

    def vector(self, row: int, m: int = 0) -> np.ndarray:
        return self.data[row, m * self.dim : (m + 1) * self.dim]


def write_descriptors(path: str | Path, descriptors: DescriptorSet) -> None:
    """Serialize a descriptor set to its little-endian binary form."""
    data = np.ascontiguousarray(descriptors.data, dtype=np.float32)
    if not np.isfinite(data).all():
        bad = int(np.argwhere(~np.isfinite(data).all(axis=1))[0][0])
        raise ValidationError(f"non-finite descriptor values at row {bad}")
    tag = descriptors.source_tag.encode("utf-8")
    if len(tag) > 32:
        raise ValidationError(f"source_tag longer than 32 bytes: {descriptors.source_tag!r}")
    header = _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        descriptors.count,
        descriptors.dim,
        descriptors.grid.rows,
        descriptors.grid.cols,
        tag.ljust(32, b"\x00"),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes(order="C"))


def read_descriptors(path: str | Path) -> DescriptorSet:
    """Load and validate a binary descriptor file."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, count, dim, rows, cols, tag = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dim < 1 or rows < 1 or cols < 1:
        raise FormatError(f"{path}: invalid header (d={dim}, grid={rows}x{cols})")
    expected = count * rows * cols * dim * 4
    payload = raw[_HEADER.size :]
    if len(payload) < expected:
        raise FormatError(f"{path}: payload truncated ({len(payload)} < {expected} bytes)")
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes")
    data = np.frombuffer(payload, dtype="<f4").reshape(count, rows * cols * dim)
    finite_rows = np.isfinite(data).all(axis=1)
    if not finite_rows.all():
        bad = int(np.argmin(finite_rows))
        raise ValidationError(f"{path}: non-finite descriptor values at row {bad}")
    data = data.copy()
    data.setflags(write=False)
    return DescriptorSet(
        grid=GridSpec(rows, cols),
        dim=dim,
        data=data,
        source_tag=tag.rstrip(b"\x00").decode("utf-8"),
    )


class Dataset:
    """Immutable bundle of manifest, optional annotations, and descriptor sets."""

    def __init__(
        self,
        manifest: ImageManifest,
        descriptors: Sequence[DescriptorSet],
        annotations: AnnotationStore | None = None,
    ):
        by_grid: dict[GridSpec, DescriptorSet] = {}
        for ds in descriptors:
            if ds.count != len(manifest):
                raise LoadError(
                    f"descriptor set for grid {ds.grid.name} has {ds.count} rows, "
                    f"manifest has {len(manifest)} images"
                )
            if ds.grid in by_grid:
                raise LoadError(f"duplicate descriptor set for grid {ds.grid.name}")
            ds.data.setflags(write=False)
            by_grid[ds.grid] = ds
        self.manifest = manifest
        self.annotations = annotations
        self._by_grid = by_grid

    @property
    def grids(self) -> tuple[GridSpec, ...]:
        return tuple(sorted(self._by_grid, key=lambda g: (g.rows, g.cols)))

    @property
    def image_ids(self) -> tuple[str, ...]:
        return self.manifest.image_ids

    def __len__(self) -> int:
        return len(self.manifest)

    def has_grid(self, grid: GridSpec) -> bool:
        return grid in self._by_grid

    def descriptor_set(self, grid: GridSpec) -> DescriptorSet:
        try:
            return self._by_grid[grid]
        except KeyError:
            raise ConfigError(
                f"no descriptor set for grid {grid.name}; available: "
                f"{', '.join(g.name for g in self.grids) or 'none'}"
            ) from None

    def global_vector(self, image_id: str) -> np.ndarray:
        ds = self.descriptor_set(GridSpec(1, 1))
        return ds.data[self.manifest.row_of(image_id)]

    def patch_matrix(self, image_id: str, grid: GridSpec) -> np.ndarray:
        """(M, d) cell descriptors of one image."""
        ds = self.descriptor_set(grid)
        return ds.cells_of(self.manifest.row_of(image_id))

    def require_annotations(self) -> AnnotationStore:
        if self.annotations is None:
            raise ConfigError("this operation requires ground-truth annotations")
        return self.annotations


def _parse_manifest(path: str | Path) -> ImageManifest:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        images = tuple(
            ImageEntry(
                image_id=item["id"],
                file_path=item.get("path"),
                width=int(item["width"]),
                height=int(item["height"]),
            )
            for item in doc["images"]
        )
        return ImageManifest(dataset_name=doc["dataset_name"], images=images)
    except (KeyError, TypeError) as exc:
        raise LoadError(f"{path}: malformed manifest ({exc})") from exc


def _parse_annotations(path: str | Path, manifest: ImageManifest) -> AnnotationStore:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        instances = {
            image_id: [
                Instance(class_label=item["class"], bbox=tuple(float(v) for v in item["bbox"]))
                for item in items
            ]
            for image_id, items in doc["annotations"].items()
        }
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"{path}: malformed annotations ({exc})") from exc
    return AnnotationStore(instances, manifest)


def load_dataset(
    manifest_path: str | Path,
    annotation_path: str | Path | None,
    descriptor_paths: Sequence[str | Path],
) -> Dataset:
    """Load a dataset from disk; deterministic and side-effect free."""
    manifest = _parse_manifest(manifest_path)
    annotations = _parse_annotations(annotation_path, manifest) if annotation_path else None
    descriptors = []
    for path in descriptor_paths:
        ds = read_descriptors(path)
        if ds.count != len(manifest):
            raise LoadError(
                f"{path}: descriptor count {ds.count} does not match manifest ({len(manifest)})"
            )
        descriptors.append(ds)
    return Dataset(manifest, descriptors, annotations)


def manifest_to_json(manifest: ImageManifest) -> dict:
    return {
        "dataset_name": manifest.dataset_name,
        "images": [
            {"id": e.image_id, "path": e.file_path, "width": e.width, "height": e.height}
            for e in manifest.images
        ],
    }


def annotations_to_json(store: AnnotationStore) -> dict:
    out: dict[str, list] = {}
    for image_id, inst in store.all_instances():
        out.setdefault(image_id, []).append({"class": inst.class_label, "bbox": list(inst.bbox)})
    return {"annotations": out}
