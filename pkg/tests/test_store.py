"""Dataset loading, grid geometry, and the binary descriptor format."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hitlor.errors import FormatError, LoadError, ValidationError
from hitlor.store import (
    AnnotationStore,
    DescriptorSet,
    GridSpec,
    ImageEntry,
    ImageManifest,
    Instance,
    cell_rectangle,
    load_dataset,
    read_descriptors,
    write_descriptors,
)


class TestCellRectangle:
    def test_even_split_first_cell(self):
        assert cell_rectangle(GridSpec(2, 2), 0, 100, 100) == (0, 0, 50, 50)

    def test_even_split_last_cell(self):
        assert cell_rectangle(GridSpec(2, 2), 3, 100, 100) == (50, 50, 100, 100)

    def test_odd_split(self):
        # m=1 is the top-right cell; the wider right column absorbs the spare pixel
        assert cell_rectangle(GridSpec(2, 2), 1, 101, 101) == (50, 0, 101, 50)

    def test_odd_split_pixel_membership_oracle(self):
        # Brute force: every one of the 101*101 pixels falls in exactly one cell.
        grid = GridSpec(2, 2)
        rects = [cell_rectangle(grid, m, 101, 101) for m in range(4)]
        count = 0
        for x in range(101):
            for y in range(101):
                owners = [
                    m
                    for m, (x0, y0, x1, y1) in enumerate(rects)
                    if x0 <= x < x1 and y0 <= y < y1
                ]
                assert len(owners) == 1
                count += 1
        assert count == 101 * 101

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            cell_rectangle(GridSpec(2, 2), 4, 100, 100)

    @given(
        rows=st.integers(1, 5),
        cols=st.integers(1, 5),
        width=st.integers(1, 64),
        height=st.integers(1, 64),
    )
    @settings(max_examples=60, deadline=None)
    def test_cells_tile_exactly(self, rows, cols, width, height):
        grid = GridSpec(rows, cols)
        total = 0
        seen = np.zeros((height, width), dtype=np.int32)
        for m in range(grid.cells):
            x0, y0, x1, y1 = cell_rectangle(grid, m, width, height)
            total += (x1 - x0) * (y1 - y0)
            seen[y0:y1, x0:x1] += 1
        assert total == width * height
        assert (seen == 1).all()


class TestGridSpec:
    def test_parse(self):
        assert GridSpec.parse("2x2") == GridSpec(2, 2)
        assert GridSpec.parse("4X4") == GridSpec(4, 4)

    def test_parse_rejects_garbage(self):
        with pytest.raises(ValidationError):
            GridSpec.parse("four-by-four")

    def test_minimum_size(self):
        with pytest.raises(ValidationError):
            GridSpec(0, 2)


class TestManifest:
    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValidationError):
            ImageManifest(
                "d",
                (ImageEntry("a", 10, 10), ImageEntry("a", 10, 10)),
            )

    def test_nonpositive_size_rejected(self):
        with pytest.raises(ValidationError):
            ImageManifest("d", (ImageEntry("a", 0, 10),))

    def test_row_order(self):
        m = ImageManifest("d", (ImageEntry("b", 5, 5), ImageEntry("a", 5, 5)))
        assert m.row_of("b") == 0
        assert m.row_of("a") == 1


class TestAnnotations:
    def _manifest(self):
        return ImageManifest("d", (ImageEntry("a", 100, 80), ImageEntry("b", 100, 80)))

    def test_bbox_out_of_bounds(self):
        with pytest.raises(ValidationError):
            AnnotationStore({"a": [Instance("cat", (0, 0, 101, 10))]}, self._manifest())

    def test_unknown_image(self):
        with pytest.raises(LoadError):
            AnnotationStore({"zz": [Instance("cat", (0, 0, 10, 10))]}, self._manifest())

    def test_positive_means_at_least_one_instance(self):
        store = AnnotationStore(
            {"a": [Instance("cat", (0, 0, 10, 10)), Instance("dog", (5, 5, 20, 20))]},
            self._manifest(),
        )
        assert store.is_positive("a", "cat")
        assert not store.is_positive("b", "cat")
        assert store.positives("cat") == ("a",)

    def test_largest_instance_and_tie_rule(self):
        store = AnnotationStore(
            {
                "a": [
                    Instance("cat", (0, 0, 30, 40)),  # area 1200
                    Instance("cat", (10, 0, 90, 60)),  # area 4800
                ],
                "b": [
                    Instance("cat", (20, 0, 40, 20)),  # area 400
                    Instance("cat", (0, 0, 20, 20)),  # area 400, smaller tuple
                ],
            },
            self._manifest(),
        )
        assert store.largest_instance("a", "cat").bbox == (10, 0, 90, 60)
        assert store.largest_instance("b", "cat").bbox == (0, 0, 20, 20)
        assert store.largest_instance("b", "dog") is None


class TestDescriptorFormat:
    def _descriptor_set(self, n=3, d=4, grid=(1, 1), seed=0):
        rng = np.random.default_rng(seed)
        g = GridSpec(*grid)
        return DescriptorSet(
            grid=g,
            dim=d,
            data=rng.standard_normal((n, g.cells * d)).astype(np.float32),
            source_tag="cls-token",
        )

    def test_round_trip_bit_identical(self, tmp_path):
        ds = self._descriptor_set(grid=(2, 2))
        path = tmp_path / "x.bin"
        write_descriptors(path, ds)
        loaded = read_descriptors(path)
        assert loaded.grid == ds.grid
        assert loaded.dim == ds.dim
        assert loaded.source_tag == "cls-token"
        assert loaded.data.dtype == np.float32
        assert np.array_equal(
            loaded.data.view(np.uint32), ds.data.view(np.uint32)
        ), "payload must survive a write/read cycle bit for bit"

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "x.bin"
        write_descriptors(path, self._descriptor_set())
        with open(path, "ab") as fh:
            fh.write(b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            read_descriptors(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "x.bin"
        write_descriptors(path, self._descriptor_set())
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])
        with pytest.raises(FormatError, match="truncated"):
            read_descriptors(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.bin"
        write_descriptors(path, self._descriptor_set())
        raw = bytearray(path.read_bytes())
        raw[0] = ord("X")
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            read_descriptors(path)

    def test_nan_payload_names_row(self, tmp_path):
        ds = self._descriptor_set()
        data = ds.data.copy()
        data.setflags(write=True)
        data[2, 1] = np.nan
        bad = DescriptorSet(grid=ds.grid, dim=ds.dim, data=data, source_tag=ds.source_tag)
        path = tmp_path / "x.bin"
        header_ok = self._descriptor_set()
        write_descriptors(path, header_ok)
        # write_descriptors itself refuses NaN, so splice the payload by hand
        with pytest.raises(ValidationError):
            write_descriptors(path, bad)
        raw = bytearray(path.read_bytes())
        payload = np.frombuffer(bytes(raw[56:]), dtype="<f4").copy()
        payload[2 * 4 + 1] = np.nan
        path.write_bytes(bytes(raw[:56]) + payload.tobytes())
        with pytest.raises(ValidationError, match="row 2"):
            read_descriptors(path)


class TestLoadDataset:
    def _write_files(self, tmp_path, n=3, d=4, grids=((1, 1),), n_override=None):
        manifest = {
            "dataset_name": "toy",
            "images": [
                {"id": f"img{i}", "path": None, "width": 100, "height": 100} for i in range(n)
            ],
        }
        manifest_path = tmp_path / "manifest.json"
        manifest_path.write_text(json.dumps(manifest))
        rng = np.random.default_rng(0)
        descriptor_paths = []
        rows = n_override if n_override is not None else n
        for grid in grids:
            g = GridSpec(*grid)
            ds = DescriptorSet(
                grid=g,
                dim=d,
                data=rng.standard_normal((rows, g.cells * d)).astype(np.float32),
                source_tag="avg-patch-tokens",
            )
            path = tmp_path / f"desc_{g.name}.bin"
            write_descriptors(path, ds)
            descriptor_paths.append(path)
        return manifest_path, descriptor_paths

    def test_smallest_consistent_bundle(self, tmp_path):
        manifest_path, descriptor_paths = self._write_files(tmp_path)
        dataset = load_dataset(manifest_path, None, descriptor_paths)
        assert len(dataset) == 3
        assert dataset.grids == (GridSpec(1, 1),)
        assert dataset.descriptor_set(GridSpec(1, 1)).grid.cells == 1

    def test_count_mismatch_names_file(self, tmp_path):
        manifest_path, descriptor_paths = self._write_files(tmp_path, n=3, n_override=4)
        with pytest.raises(LoadError, match="desc_1x1"):
            load_dataset(manifest_path, None, descriptor_paths)

    def test_multi_grid_load(self, tmp_path):
        manifest_path, descriptor_paths = self._write_files(
            tmp_path, grids=((1, 1), (2, 2))
        )
        dataset = load_dataset(manifest_path, None, descriptor_paths)
        assert dataset.grids == (GridSpec(1, 1), GridSpec(2, 2))

    def test_duplicate_grid_rejected(self, tmp_path):
        manifest_path, descriptor_paths = self._write_files(
            tmp_path, grids=((2, 2), (2, 2))
        )
        with pytest.raises(LoadError, match="duplicate"):
            load_dataset(manifest_path, None, descriptor_paths)

    def test_deterministic(self, tmp_path):
        manifest_path, descriptor_paths = self._write_files(tmp_path)
        a = load_dataset(manifest_path, None, descriptor_paths)
        b = load_dataset(manifest_path, None, descriptor_paths)
        assert np.array_equal(
            a.descriptor_set(GridSpec(1, 1)).data, b.descriptor_set(GridSpec(1, 1)).data
        )

    def test_annotations_loaded(self, tmp_path):
        manifest_path, descriptor_paths = self._write_files(tmp_path)
        ann_path = tmp_path / "ann.json"
        ann_path.write_text(
            json.dumps(
                {"annotations": {"img0": [{"class": "cat", "bbox": [0, 0, 10, 10]}]}}
            )
        )
        dataset = load_dataset(manifest_path, ann_path, descriptor_paths)
        assert dataset.annotations.is_positive("img0", "cat")
