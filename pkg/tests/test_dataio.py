import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from petcascade.dataio import (BoundingBox, DatasetManifest, HeaderMismatchError,
                               MaskVolume, MissingCaseFileError, NonBinaryMaskError,
                               SliceAnnotation, ValidationError, Volume3D,
                               assemble_task_dataset, case_file_names, discover_case_ids,
                               read_case, split_counts, split_dataset, write_case)
from petcascade.phantom import PhantomCase, generate_cohort

from helpers import tiny_phantom_config


def handmade_case(case_id="A-000", depth=8, hw=(24, 24), fg_slices=(2, 3), boxes_per_slice=1):
    """A case with known foreground structure, independent of the generator."""
    h, w = hw
    rng = np.random.default_rng(hash(case_id) % 2**32)
    volume = rng.random((depth, h, w)).astype(np.float32)
    mask = np.zeros((depth, h, w), dtype=np.uint8)
    for z in fg_slices:
        for k in range(boxes_per_slice):
            y = 3 + 6 * k
            mask[z, y:y + 3, 4:4 + 3] = 1
    instances = [(1, int(mask.sum()))]
    return PhantomCase(case_id, "A", Volume3D(volume, (4.0, 3.6, 3.6)), MaskVolume(mask),
                       instances)


class TestTypes:
    def test_volume_rejects_nan(self):
        bad = np.zeros((2, 2, 2), dtype=np.float32)
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValidationError):
            Volume3D(bad, (1, 1, 1))

    def test_mask_rejects_nonbinary(self):
        with pytest.raises(NonBinaryMaskError):
            MaskVolume(np.full((2, 2, 2), 3, dtype=np.uint8))

    def test_box_invariants(self):
        with pytest.raises(ValidationError):
            BoundingBox(5, 0, 5, 2)
        with pytest.raises(ValidationError):
            BoundingBox(0.5, 0, 5, 2)

    def test_annotation_label_box_consistency(self):
        with pytest.raises(ValidationError):
            SliceAnnotation(0, "foreground", ())
        with pytest.raises(ValidationError):
            SliceAnnotation(0, "background", (BoundingBox(0, 0, 1, 1),))


class TestCaseRoundTrip:
    def test_bit_exact_round_trip(self, tmp_path):
        case = handmade_case()
        write_case(case, tmp_path)
        loaded = read_case(tmp_path, case.case_id)
        assert loaded.volume.voxels.tobytes() == case.volume.voxels.tobytes()
        assert loaded.gt_mask.voxels.tobytes() == case.gt_mask.voxels.tobytes()
        assert loaded.case_id == case.case_id
        assert loaded.cohort == case.cohort
        assert loaded.tumor_instances == case.tumor_instances
        assert loaded.volume.voxel_spacing_mm == case.volume.voxel_spacing_mm

    def test_generated_case_round_trip(self, tmp_path):
        case = generate_cohort(tiny_phantom_config(), 1, "B", 5)[0]
        write_case(case, tmp_path)
        loaded = read_case(tmp_path, case.case_id)
        assert loaded.volume.voxels.tobytes() == case.volume.voxels.tobytes()
        assert loaded.tumor_instances == case.tumor_instances

    def test_truncated_raster_is_dimension_mismatch(self, tmp_path):
        case = handmade_case()
        paths = write_case(case, tmp_path)
        raw = paths["volume_raster"].read_bytes()
        paths["volume_raster"].write_bytes(raw[:-8])
        with pytest.raises(HeaderMismatchError):
            read_case(tmp_path, case.case_id)

    def test_corrupted_mask_byte_is_nonbinary_error(self, tmp_path):
        case = handmade_case()
        paths = write_case(case, tmp_path)
        raw = bytearray(paths["mask_raster"].read_bytes())
        raw[0] = 2
        paths["mask_raster"].write_bytes(bytes(raw))
        with pytest.raises(NonBinaryMaskError):
            read_case(tmp_path, case.case_id)

    def test_missing_file_error(self, tmp_path):
        case = handmade_case()
        paths = write_case(case, tmp_path)
        paths["volume_raster"].unlink()
        with pytest.raises(MissingCaseFileError):
            read_case(tmp_path, case.case_id)

    def test_discover_case_ids(self, tmp_path):
        for cid in ("A-001", "A-000", "B-000"):
            write_case(handmade_case(cid), tmp_path)
        assert discover_case_ids(tmp_path) == ["A-000", "A-001", "B-000"]


class TestSplit:
    def test_ten_cases_default_ratios(self):
        manifest = split_dataset([f"A-{i:03d}" for i in range(10)], (0.6, 0.2, 0.2), 0)
        counts = [len(manifest.entries_for(s)) for s in ("train", "valid", "test")]
        assert counts == [6, 2, 2]

    def test_degenerate_all_train(self):
        manifest = split_dataset([f"A-{i}" for i in range(5)], (1.0, 0.0, 0.0), 3)
        assert len(manifest.entries_for("train")) == 5

    def test_126_cases_remainder_to_train(self):
        manifest = split_dataset([f"A-{i:03d}" for i in range(126)], (0.6, 0.2, 0.2), 1)
        counts = [len(manifest.entries_for(s)) for s in ("train", "valid", "test")]
        assert counts == [76, 25, 25]

    def test_no_case_leakage(self):
        manifest = split_dataset([f"A-{i:03d}" for i in range(20)], (0.6, 0.2, 0.2), 2)
        sets = [set(manifest.case_ids(s)) for s in ("train", "valid", "test")]
        assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
        assert sets[0] | sets[1] | sets[2] == set(manifest.case_ids())

    def test_deterministic_in_seed_and_order(self):
        ids = [f"A-{i:03d}" for i in range(15)]
        a = split_dataset(ids, (0.6, 0.2, 0.2), 4)
        b = split_dataset(ids, (0.6, 0.2, 0.2), 4)
        assert a.to_json_bytes() == b.to_json_bytes()
        c = split_dataset(ids, (0.6, 0.2, 0.2), 5)
        assert a.to_json_bytes() != c.to_json_bytes()

    def test_bad_ratios(self):
        with pytest.raises(ValidationError):
            split_dataset(["a", "b", "c"], (0.5, 0.2, 0.2), 0)
        with pytest.raises(ValidationError):
            split_dataset(["a"], (0.6, 0.2, 0.2), 0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(5, 500))
    def test_split_counts_sum_and_nonempty(self, n):
        counts = split_counts(n, (0.6, 0.2, 0.2))
        assert sum(counts) == n
        assert all(c >= 1 for c in counts)

    def test_manifest_round_trip(self, tmp_path):
        cases = [handmade_case(f"A-{i:03d}") for i in range(6)]
        for c in cases:
            write_case(c, tmp_path)
        manifest = split_dataset([c.case_id for c in cases], (0.6, 0.2, 0.2), 0, root=tmp_path)
        path = manifest.save(tmp_path / "manifest.json")
        loaded = DatasetManifest.load(path)
        assert loaded.to_json_bytes() == manifest.to_json_bytes()

    def test_manifest_missing_file_on_load(self, tmp_path):
        case = handmade_case("A-000")
        write_case(case, tmp_path)
        manifest = split_dataset(["A-000"], (1.0, 0.0, 0.0), 0, root=tmp_path)
        path = manifest.save(tmp_path / "manifest.json")
        (tmp_path / case_file_names("A-000")["annotations"]).unlink()
        with pytest.raises(MissingCaseFileError):
            DatasetManifest.load(path)


class TestAssemble:
    @pytest.fixture()
    def small_manifest(self, tmp_path):
        # one case, 64 slices, 6 foreground (one box each); a second with 3 boxes
        case1 = handmade_case("A-000", depth=64, fg_slices=(5, 6, 7, 20, 21, 40))
        case2 = handmade_case("A-001", depth=8, fg_slices=(4,), boxes_per_slice=3)
        for c in (case1, case2):
            write_case(c, tmp_path)
        manifest = split_dataset(["A-000", "A-001"], (1.0, 0.0, 0.0), 0, root=tmp_path)
        manifest.save(tmp_path / "manifest.json")
        return manifest

    def test_classification_counts(self, small_manifest):
        samples = assemble_task_dataset(small_manifest, "train", "classification")
        assert len(samples) == 64 + 8
        assert sum(s.label for s in samples) == 7

    def test_detection_counts(self, small_manifest):
        samples = assemble_task_dataset(small_manifest, "train", "detection")
        assert len(samples) == 7
        assert all(len(s.boxes) >= 1 for s in samples)

    def test_segmentation_one_roi_per_box(self, small_manifest):
        samples = assemble_task_dataset(small_manifest, "train", "segmentation")
        assert len(samples) == 6 + 3
        by_case = [s for s in samples if s.case_id == "A-001"]
        assert len(by_case) == 3
        for s in samples:
            assert s.image_patch.shape == s.mask_patch.shape
            assert s.mask_patch.any()

    def test_conservation_over_generated_cohort(self, tmp_path):
        cases = generate_cohort(tiny_phantom_config(), 6, "A", 3)
        for c in cases:
            write_case(c, tmp_path)
        manifest = split_dataset([c.case_id for c in cases], (0.6, 0.2, 0.2), 1, root=tmp_path)
        manifest.save(tmp_path / "manifest.json")
        total_slices = sum(c.volume.dims[0] for c in cases)
        got = sum(len(assemble_task_dataset(manifest, s, "classification"))
                  for s in ("train", "valid", "test"))
        assert got == total_slices
        fg_total = sum(int(c.gt_mask.voxels.reshape(c.gt_mask.dims[0], -1).any(1).sum())
                       for c in cases)
        got_det = sum(len(assemble_task_dataset(manifest, s, "detection"))
                      for s in ("train", "valid", "test"))
        assert got_det == fg_total

    def test_unknown_task_and_split(self, small_manifest):
        with pytest.raises(ValidationError):
            assemble_task_dataset(small_manifest, "train", "detection2")
        with pytest.raises(ValidationError):
            assemble_task_dataset(small_manifest, "all", "detection")

    def test_sample_order_deterministic(self, small_manifest):
        a = assemble_task_dataset(small_manifest, "train", "segmentation")
        b = assemble_task_dataset(small_manifest, "train", "segmentation")
        assert [(s.case_id, s.slice_index, s.box.as_tuple()) for s in a] == \
               [(s.case_id, s.slice_index, s.box.as_tuple()) for s in b]
