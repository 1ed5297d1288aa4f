"""Metric correctness against hand-built fixtures and brute-force oracles."""

import numpy as np
import pytest

from oracles import (
    bd_bruteforce,
    confusion_bruteforce,
    dsc_bruteforce,
    flood_fill_components,
    td_bruteforce,
)

from cotunet.metrics import (
    MetricUndefinedError,
    airway_stats,
    branches_detected,
    confusion_metrics,
    decompose_branches,
    dsc,
    evaluate_case,
    skeletonize,
    tree_length_detected,
)
from cotunet.phantom import PhantomSpec, generate_tree_mask


def straight_line_skeleton(n=20):
    skel = np.zeros((5, 5, n + 4), dtype=bool)
    skel[2, 2, 2:2 + n] = True
    return skel


def y_skeleton():
    """Trunk of 10 plus two arms of 8, meeting at one junction voxel."""
    skel = np.zeros((24, 24, 24), dtype=bool)
    for z in range(2, 12):
        skel[z, 12, 12] = True                 # trunk
    for i in range(1, 9):
        skel[11 + i, 12 + i, 12] = True        # arm A (diagonal in z-y)
        skel[11 + i, 12 - i, 12] = True        # arm B
    return skel


def tube_mask(n=20):
    mask = np.zeros((7, 7, n + 4), dtype=bool)
    mask[2:5, 2:5, 2:2 + n] = True
    return mask


class TestSkeletonize:
    def test_empty(self):
        assert not skeletonize(np.zeros((4, 4, 4), bool)).any()

    def test_tube_single_path(self):
        sk = skeletonize(tube_mask())
        assert 15 <= sk.sum() <= 22
        assert len(flood_fill_components(sk)) == 1
        tree = decompose_branches(sk)
        assert tree.branch_count == 1

    def test_idempotent(self):
        sk = skeletonize(tube_mask())
        np.testing.assert_array_equal(skeletonize(sk), sk)

    def test_component_count_preserved(self):
        mask = tube_mask(8)
        mask[6, 6, 0] = True  # second, isolated component
        sk = skeletonize(mask)
        assert len(flood_fill_components(sk)) == len(flood_fill_components(mask))


class TestDecompose:
    def test_single_path(self):
        tree = decompose_branches(straight_line_skeleton(20), (1.0, 1.0, 1.0))
        assert tree.branch_count == 1
        assert tree.total_length_mm == 19.0

    def test_y_three_branches(self):
        tree = decompose_branches(y_skeleton())
        assert tree.branch_count == 3

    def test_anisotropic_spacing(self):
        tree = decompose_branches(straight_line_skeleton(10), (1.0, 1.0, 2.5))
        assert tree.total_length_mm == pytest.approx(9 * 2.5)

    def test_every_voxel_in_a_branch(self):
        for skel in (straight_line_skeleton(), y_skeleton()):
            tree = decompose_branches(skel)
            union = set().union(*(b.voxels for b in tree.branches))
            assert union == set(map(tuple, np.argwhere(skel)))

    def test_every_voxel_in_a_branch_random(self, rng):
        for _ in range(10):
            mask = rng.random((10, 10, 10)) > 0.55
            skel = skeletonize(mask)
            if not skel.any():
                continue
            tree = decompose_branches(skel)
            union = set().union(*(b.voxels for b in tree.branches))
            assert union == set(map(tuple, np.argwhere(skel)))


class TestBranchesDetected:
    def test_perfect_and_empty(self):
        skel = y_skeleton()
        tree = decompose_branches(skel)
        assert branches_detected(tree, skel) == 100.0
        assert branches_detected(tree, np.zeros_like(skel)) == 0.0

    def test_one_arm_removed(self):
        skel = y_skeleton()
        tree = decompose_branches(skel)
        pred = skel.copy()
        pred[:, 13:, :] = False  # erase arm A entirely
        assert branches_detected(tree, pred) == pytest.approx(200.0 / 3.0)

    def test_zero_branches_error(self):
        tree = decompose_branches(np.zeros((4, 4, 4), bool))
        with pytest.raises(MetricUndefinedError):
            branches_detected(tree, np.zeros((4, 4, 4), bool))

    def test_any_overlap_mode(self):
        skel = y_skeleton()
        tree = decompose_branches(skel)
        pred = np.zeros_like(skel)
        pred[2, 12, 12] = True  # one voxel of the trunk
        assert branches_detected(tree, pred, detect_fraction=0.0) == pytest.approx(100.0 / 3.0)
        assert branches_detected(tree, pred, detect_fraction=0.8) == 0.0


class TestTreeLength:
    def test_perfect_and_empty(self):
        skel = straight_line_skeleton(20)
        tree = decompose_branches(skel)
        assert tree_length_detected(tree, skel) == 100.0
        assert tree_length_detected(tree, np.zeros_like(skel)) == 0.0

    def test_half_tube(self):
        skel = straight_line_skeleton(20)
        tree = decompose_branches(skel)
        pred = np.zeros_like(skel)
        pred[:, :, :12] = True  # first 10 of 20 line voxels
        td = tree_length_detected(tree, pred)
        assert abs(td - 50.0) <= 100.0 / 19.0  # one voxel-step quantization

    def test_zero_length_error(self):
        tree = decompose_branches(np.zeros((4, 4, 4), bool))
        with pytest.raises(MetricUndefinedError):
            tree_length_detected(tree, np.zeros((4, 4, 4), bool))


class TestConfusionAndDice:
    def test_perfect(self, rng):
        gt = rng.random((8, 8, 8)) > 0.6
        tpr, fpr, precision = confusion_metrics(gt, gt)
        assert (tpr, fpr, precision) == (100.0, 0.0, 100.0)
        assert dsc(gt, gt) == 100.0

    def test_complement(self, rng):
        gt = rng.random((8, 8, 8)) > 0.5
        tpr, _, _ = confusion_metrics(~gt, gt)
        assert tpr == 0.0

    def test_dsc_counts(self):
        pred = np.zeros((3, 3, 3), bool)
        gt = np.zeros((3, 3, 3), bool)
        pred.reshape(-1)[:4] = True
        gt.reshape(-1)[1:7] = True  # overlap 3, sizes 4 and 6
        assert dsc(pred, gt) == 60.0
        assert dsc(gt, pred) == 60.0

    def test_empty_gt_error(self):
        with pytest.raises(MetricUndefinedError):
            confusion_metrics(np.ones((2, 2, 2), bool), np.zeros((2, 2, 2), bool))

    def test_empty_empty_dsc(self):
        assert dsc(np.zeros((2, 2, 2), bool), np.zeros((2, 2, 2), bool)) == 100.0


class TestAirwayStats:
    def test_empty(self):
        stats = airway_stats(np.zeros((4, 4, 4), bool))
        assert (stats.branch_count, stats.tree_length_mm, stats.airway_volume_mm3) == (0, 0.0, 0.0)

    def test_tube_volume(self):
        stats = airway_stats(tube_mask(20), (1.0, 1.0, 1.0))
        assert stats.airway_volume_mm3 == 180.0
        assert stats.branch_count == 1

    def test_y_phantom_branches(self):
        airway, _, info = generate_tree_mask(PhantomSpec(depth=2, seed=4))
        stats = airway_stats(airway.data, (1.0, 1.0, 1.0))
        assert stats.branch_count == info.branch_count == 3


class TestOracleEquivalence:
    """The package metrics must agree exactly with the brute-force oracles."""

    def test_random_mask_pairs(self):
        rng = np.random.default_rng(20240817)
        checked = 0
        for trial in range(100):
            side = int(rng.integers(8, 17))
            gt = rng.random((side,) * 3) > float(rng.uniform(0.45, 0.8))
            pred = rng.random((side,) * 3) > float(rng.uniform(0.45, 0.8))
            region = (rng.random((side,) * 3) > 0.3) if trial % 3 == 0 else None

            o_tpr, o_fpr, o_prec = confusion_bruteforce(pred, gt, region)
            try:
                tpr, fpr, precision = confusion_metrics(pred, gt, region)
                assert (tpr, fpr, precision) == (o_tpr, o_fpr, o_prec)
            except MetricUndefinedError:
                assert o_tpr is None or o_prec is None

            assert dsc(pred, gt) == dsc_bruteforce(pred, gt)

            skel = skeletonize(gt)
            tree = decompose_branches(skel)
            o_bd = bd_bruteforce(skel, pred, 0.8, region)
            o_td = td_bruteforce(skel, pred, region)
            try:
                assert branches_detected(tree, pred, 0.8, region) == o_bd
            except MetricUndefinedError:
                assert o_bd is None
            try:
                assert tree_length_detected(tree, pred, region) == o_td
            except MetricUndefinedError:
                assert o_td is None
            checked += 1
        assert checked == 100

    def test_tube_and_y_fixtures(self):
        for skel in (straight_line_skeleton(16), y_skeleton()):
            rng = np.random.default_rng(5)
            pred = rng.random(skel.shape) > 0.4
            tree = decompose_branches(skel)
            assert branches_detected(tree, pred) == bd_bruteforce(skel, pred)
            assert tree_length_detected(tree, pred) == td_bruteforce(skel, pred)


class TestMonotonicity:
    def test_bd_td_grow_with_prediction(self):
        rng = np.random.default_rng(3)
        airway, _, _ = generate_tree_mask(PhantomSpec(depth=3, seed=7))
        gt = airway.data.astype(bool)
        tree = decompose_branches(skeletonize(gt))
        pred = gt & (rng.random(gt.shape) > 0.4)
        grown = pred | (rng.random(gt.shape) > 0.7)
        assert branches_detected(tree, grown) >= branches_detected(tree, pred)
        assert tree_length_detected(tree, grown) >= tree_length_detected(tree, pred)


class TestEvaluateCase:
    def test_perfect_prediction_report(self):
        airway, lung, _ = generate_tree_mask(PhantomSpec(depth=3, seed=2))
        gt = airway.data.astype(bool)
        report = evaluate_case(gt, gt, region=lung.data.astype(bool))
        assert report.bd == 100.0 and report.td == 100.0
        assert report.tpr == 100.0 and report.fpr == 0.0
        assert report.dsc == 100.0 and report.precision == 100.0
        assert report.branch_count == 7
