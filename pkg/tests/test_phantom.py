import numpy as np
import pytest

from cotunet.phantom import (
    PhantomFitError,
    PhantomRanges,
    PhantomSpec,
    generate_tree_mask,
    make_dataset,
    split_cases,
    synthesize_ct,
)
from cotunet.pipeline import preprocess


class TestTreeMask:
    def test_depth_one_single_tube(self):
        airway, lung, info = generate_tree_mask(PhantomSpec(depth=1, seed=3))
        assert info.branch_count == 1
        assert airway.astype_mask().any()
        assert lung.astype_mask().any()

    def test_depth_two_three_branches(self):
        _, _, info = generate_tree_mask(PhantomSpec(depth=2, seed=3))
        assert info.branch_count == 3

    def test_branch_count_is_binary_tree(self):
        for depth in (1, 2, 3, 4):
            _, _, info = generate_tree_mask(PhantomSpec(depth=depth, seed=1))
            assert info.branch_count == 2**depth - 1

    def test_deterministic(self):
        spec = PhantomSpec(depth=3, seed=11)
        a1, l1, _ = generate_tree_mask(spec)
        a2, l2, _ = generate_tree_mask(spec)
        np.testing.assert_array_equal(a1.data, a2.data)
        np.testing.assert_array_equal(l1.data, l2.data)

    def test_escaping_tree_rejected(self):
        spec = PhantomSpec(dims=(32, 32, 32), depth=4, root_length=20.0, seed=0)
        with pytest.raises(PhantomFitError, match="segment"):
            generate_tree_mask(spec)

    def test_airway_intersects_lung(self):
        airway, lung, _ = generate_tree_mask(PhantomSpec(depth=3, seed=5))
        assert (airway.astype_mask() & lung.astype_mask()).any()

    def test_tip_radius_guard(self):
        with pytest.raises(ValueError, match="tip radius"):
            PhantomSpec(depth=5, root_radius=1.5, radius_decay=0.5)


class TestSynthesizeCt:
    def test_four_levels_no_noise(self):
        airway, lung, _ = generate_tree_mask(PhantomSpec(depth=3, seed=2))
        ct = synthesize_ct(airway, lung, noise_sigma=0.0)
        assert set(np.unique(ct.data)) == {-1000.0, -850.0, -200.0, 40.0}

    def test_window_maps_lumen_and_tissue(self):
        airway, lung, _ = generate_tree_mask(PhantomSpec(depth=2, seed=2))
        ct = synthesize_ct(airway, lung, noise_sigma=0.0)
        norm = preprocess(ct)
        assert norm.data[airway.astype_mask()].max() == 0.0
        background = ~lung.astype_mask() & (ct.data == 40.0)
        np.testing.assert_allclose(norm.data[background], 0.65)

    def test_noise_deterministic(self):
        airway, lung, _ = generate_tree_mask(PhantomSpec(depth=2, seed=2))
        a = synthesize_ct(airway, lung, noise_sigma=12.0, seed=7)
        b = synthesize_ct(airway, lung, noise_sigma=12.0, seed=7)
        np.testing.assert_array_equal(a.data, b.data)


class TestDataset:
    def test_split_counts(self):
        cases = make_dataset(10, PhantomRanges(dims=(64, 64, 64)), seed=4)
        split = split_cases(cases)
        assert (len(split["train"]), len(split["val"]), len(split["test"])) == (6, 2, 2)

    def test_deterministic(self):
        a = make_dataset(4, seed=9)
        b = make_dataset(4, seed=9)
        for ca, cb in zip(a, b):
            assert ca.split == cb.split
            np.testing.assert_array_equal(ca.ct.data, cb.ct.data)
            np.testing.assert_array_equal(ca.airway.data, cb.airway.data)

    def test_case_invariants(self):
        for case in make_dataset(5, seed=1):
            assert case.airway.astype_mask().any()
            assert case.lung.astype_mask().any()
            if case.spec.depth >= 2:
                assert (case.airway.astype_mask() & case.lung.astype_mask()).any()

    def test_too_few_cases(self):
        with pytest.raises(ValueError):
            make_dataset(2)
