import numpy as np
import pytest

from petcascade.dataio import MaskVolume, ValidationError
from petcascade.phantom import (PhantomConfig, case_seed_for, derive_slice_annotations,
                                generate_case, generate_cohort)

from helpers import bfs_components_2d, bfs_components_3d, tiny_phantom_config


def fg_fraction(mask: MaskVolume) -> float:
    v = mask.voxels
    return float(v.reshape(v.shape[0], -1).any(axis=1).mean())


class TestConfigValidation:
    def test_defaults_valid(self):
        PhantomConfig()

    def test_grid_too_small(self):
        with pytest.raises(ValidationError):
            tiny_phantom_config(grid_dims=(8, 32, 32))

    def test_tumor_uptake_must_exceed_background(self):
        with pytest.raises(ValidationError):
            tiny_phantom_config(tumor_uptake_range=(0.5, 2.0), background_uptake=1.0)

    def test_radius_that_cannot_fit_rejected(self):
        with pytest.raises(ValidationError):
            tiny_phantom_config(grid_dims=(16, 32, 32),
                                tumor_radius_range_mm=(8.0, 40.0))

    def test_empty_range_rejected(self):
        with pytest.raises(ValidationError):
            tiny_phantom_config(tumor_count_range=(3, 1))


class TestGenerateCase:
    def test_deterministic_bit_identical(self):
        cfg = tiny_phantom_config()
        a = generate_case(cfg, 42, "A-000", "A")
        b = generate_case(cfg, 42, "A-000", "A")
        assert a.volume.voxels.tobytes() == b.volume.voxels.tobytes()
        assert a.gt_mask.voxels.tobytes() == b.gt_mask.voxels.tobytes()
        assert a.tumor_instances == b.tumor_instances

    def test_single_tumor_single_component(self):
        cfg = tiny_phantom_config(tumor_count_range=(1, 1), noise_sigma=0.0)
        for seed in range(5):
            case = generate_case(cfg, seed, "A-000", "A")
            assert len(case.tumor_instances) == 1

    def test_mask_nonempty_and_dims_match(self):
        case = generate_case(tiny_phantom_config(), 3, "B-000", "B")
        assert case.gt_mask.voxels.any()
        assert case.volume.dims == case.gt_mask.dims

    def test_instances_match_bfs_oracle(self):
        cfg = tiny_phantom_config(tumor_count_range=(2, 3))
        for seed in (0, 1, 2):
            case = generate_case(cfg, seed, "A-000", "A")
            oracle_counts = sorted(bfs_components_3d(case.gt_mask.voxels))
            assert sorted(n for _, n in case.tumor_instances) == oracle_counts

    def test_voxel_count_conservation(self):
        case = generate_case(tiny_phantom_config(), 11, "A-000", "A")
        assert sum(n for _, n in case.tumor_instances) == int(case.gt_mask.voxels.sum())

    def test_fg_slice_fraction_over_seeds(self):
        # empirical check over 200 generated cases with the default config
        cfg = PhantomConfig()
        fractions = [fg_fraction(generate_case(cfg, seed, "A-000", "A").gt_mask)
                     for seed in range(200)]
        assert 0.03 <= np.mean(fractions) <= 0.17


class TestGenerateCohort:
    def test_naming_contract(self):
        cases = generate_cohort(tiny_phantom_config(), 3, "A", master_seed=7)
        assert [c.case_id for c in cases] == ["A-000", "A-001", "A-002"]
        assert all(c.cohort == "A" for c in cases)

    def test_repeat_identical(self):
        cfg = tiny_phantom_config()
        first = generate_cohort(cfg, 3, "A", 7)
        second = generate_cohort(cfg, 3, "A", 7)
        for a, b in zip(first, second):
            assert a.volume.voxels.tobytes() == b.volume.voxels.tobytes()

    def test_cases_pairwise_distinct(self):
        cases = generate_cohort(tiny_phantom_config(), 50, "B", master_seed=9)
        checksums = {c.volume.voxels.tobytes() for c in cases}
        assert len(checksums) == 50

    def test_case_seed_is_stateless_hash(self):
        assert case_seed_for(7, "A", 0) == case_seed_for(7, "A", 0)
        assert case_seed_for(7, "A", 0) != case_seed_for(7, "A", 1)
        assert case_seed_for(7, "A", 0) != case_seed_for(7, "B", 0)

    def test_rejects_zero_cases(self):
        with pytest.raises(ValidationError):
            generate_cohort(tiny_phantom_config(), 0, "A", 1)


class TestSliceAnnotations:
    def test_all_zero_mask(self):
        mask = MaskVolume(np.zeros((5, 20, 20), dtype=np.uint8))
        anns = derive_slice_annotations(mask)
        assert len(anns) == 5
        assert all(a.label == "background" and not a.boxes for a in anns)

    def test_single_voxel_box(self):
        vox = np.zeros((5, 32, 32), dtype=np.uint8)
        vox[2, 10, 20] = 1
        anns = derive_slice_annotations(MaskVolume(vox))
        assert anns[2].label == "foreground"
        assert [b.as_tuple() for b in anns[2].boxes] == [(20, 10, 21, 11)]
        assert all(anns[z].label == "background" for z in (0, 1, 3, 4))

    def test_two_disjoint_squares(self):
        vox = np.zeros((1, 20, 20), dtype=np.uint8)
        vox[0, 2:5, 2:5] = 1
        vox[0, 10:13, 12:15] = 1
        anns = derive_slice_annotations(MaskVolume(vox))
        assert len(anns[0].boxes) == 2
        assert all(b.area == 9 for b in anns[0].boxes)
        assert len(bfs_components_2d(vox[0])) == 2

    def test_boxes_match_bfs_components(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            plane = (rng.random((24, 24)) < 0.12).astype(np.uint8)
            anns = derive_slice_annotations(MaskVolume(plane[None]))
            comps = bfs_components_2d(plane)
            boxes = anns[0].boxes
            assert len(boxes) == len(comps)
            expected = sorted(
                (min(x for _, x in c), min(y for y, _ in c),
                 max(x for _, x in c) + 1, max(y for y, _ in c) + 1)
                for c in comps
            )
            assert sorted(b.as_tuple() for b in boxes) == expected

    def test_mask_box_consistency(self):
        case = generate_case(tiny_phantom_config(tumor_count_range=(2, 3)), 13, "A-000", "A")
        anns = derive_slice_annotations(case.gt_mask)
        for ann in anns:
            plane = case.gt_mask.voxels[ann.slice_index]
            covered = np.zeros_like(plane, dtype=bool)
            for b in ann.boxes:
                region = plane[b.y_min:b.y_max, b.x_min:b.x_max]
                assert region.any(), "box with no foreground"
                covered[b.y_min:b.y_max, b.x_min:b.x_max] = True
            assert not (plane.astype(bool) & ~covered).any(), "foreground outside boxes"
            assert (ann.label == "foreground") == bool(len(ann.boxes))
