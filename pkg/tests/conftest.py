"""Shared fixtures: small in-memory datasets with known geometry."""

from __future__ import annotations

import numpy as np
import pytest

from hitlor.store import (
    AnnotationStore,
    Dataset,
    DescriptorSet,
    GridSpec,
    ImageEntry,
    ImageManifest,
    Instance,
)


def make_toy_dataset(
    n: int = 6,
    d: int = 4,
    grids: tuple[tuple[int, int], ...] = ((1, 1), (2, 2)),
    seed: int = 0,
    size: tuple[int, int] = (100, 100),
    annotations: dict[str, list[tuple[str, tuple[float, float, float, float]]]] | None = None,
) -> Dataset:
    rng = np.random.default_rng(seed)
    width, height = size
    manifest = ImageManifest(
        dataset_name="toy",
        images=tuple(
            ImageEntry(image_id=f"img{i}", width=width, height=height) for i in range(n)
        ),
    )
    sets = []
    for rows, cols in grids:
        grid = GridSpec(rows, cols)
        data = rng.standard_normal((n, grid.cells * d)).astype(np.float32)
        sets.append(DescriptorSet(grid=grid, dim=d, data=data, source_tag="toy"))
    store = None
    if annotations is not None:
        store = AnnotationStore(
            {
                image_id: [Instance(class_label=c, bbox=b) for c, b in items]
                for image_id, items in annotations.items()
            },
            manifest,
        )
    return Dataset(manifest, sets, store)


@pytest.fixture
def toy_dataset() -> Dataset:
    return make_toy_dataset()


@pytest.fixture(scope="session")
def planted_small():
    """400-image planted dataset shared by loop/bench tests."""
    from hitlor.synth import PlantedSpec, make_planted_dataset

    return make_planted_dataset(PlantedSpec(n_images=400), seed=11)


_ACCEPTANCE_RESULTS: list[tuple[str, bool]] = []


def record_acceptance(name: str, passed: bool) -> None:
    _ACCEPTANCE_RESULTS.append((name, passed))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, passed in _ACCEPTANCE_RESULTS:
        marker = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{marker}] {name}")
