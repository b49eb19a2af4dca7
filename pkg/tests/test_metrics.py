"""Evaluation metrics: IoU arithmetic, the hand-traced AP fixture, the
brute-force oracle equivalence, and ranking properties."""
import numpy as np
import pytest

from fabme.metrics import Detection, GroundTruth, iou, map50, match_and_ap

from oracles import brute_force_map50, random_detection_scene


class TestIoU:
    def test_identity(self):
        assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0

    def test_third_overlap(self):
        assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3, abs=1e-15)

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError, match="degenerate"):
            iou((0, 0, 0, 2), (0, 0, 1, 1))
        with pytest.raises(ValueError, match="degenerate"):
            Detection(1, (3, 0, 1, 2), 0.5)

    def test_symmetry_and_range(self, rng):
        for _ in range(50):
            a = _rand_box(rng)
            b = _rand_box(rng)
            v = iou(a, b)
            assert 0.0 <= v <= 1.0
            assert v == pytest.approx(iou(b, a), abs=1e-15)


def _rand_box(rng):
    x1, y1 = rng.uniform(0, 50, 2)
    w, h = rng.uniform(1, 30, 2)
    return (x1, y1, x1 + w, y1 + h)


class TestAP:
    def test_perfect_detector(self):
        gts = [GroundTruth(1, (0, 0, 10, 10), i) for i in range(3)]
        dets = [Detection(1, (0, 0, 10, 10), 0.9, i) for i in range(3)]
        assert match_and_ap(dets, gts)[1].ap == 1.0

    def test_no_detections(self):
        gts = [GroundTruth(1, (0, 0, 10, 10))]
        assert match_and_ap([], gts)[1].ap == 0.0

    def test_hand_traced_fixture(self):
        # TP at .9, FP at .8, TP at .7 over 2 GTs -> 0.5*1 + 0.5*(2/3)
        gts = [GroundTruth(1, (0, 0, 10, 10), "a"), GroundTruth(1, (20, 20, 30, 30), "a")]
        dets = [
            Detection(1, (0, 0, 10, 10), 0.9, "a"),
            Detection(1, (50, 50, 60, 60), 0.8, "a"),
            Detection(1, (20, 20, 30, 30), 0.7, "a"),
        ]
        ap = match_and_ap(dets, gts)[1].ap
        assert ap == pytest.approx(0.5 + 0.5 * (2 / 3), abs=1e-12)

    def test_duplicate_detections_single_tp(self):
        gts = [GroundTruth(1, (0, 0, 10, 10))]
        dets = [Detection(1, (0, 0, 10, 10), 0.9 - 0.1 * i) for i in range(4)]
        r = match_and_ap(dets, gts)[1]
        assert r.n_tp == 1 and r.n_fp == 3

    def test_matches_highest_iou_unmatched_gt(self):
        gts = [GroundTruth(1, (0, 0, 10, 10)), GroundTruth(1, (2, 0, 12, 10))]
        dets = [Detection(1, (2, 0, 12, 10), 0.9), Detection(1, (0, 0, 10, 10), 0.8)]
        r = match_and_ap(dets, gts)[1]
        assert r.n_tp == 2 and r.n_fp == 0

    def test_monotone_confidence_invariance(self, rng):
        dets_raw, gts_raw = random_detection_scene(rng)
        gts = [GroundTruth(c, b, i) for i, c, b in gts_raw]
        dets = [Detection(c, b, conf, i) for i, c, b, conf in dets_raw]
        base = map50(dets, gts, classes=5).map50
        squashed = [Detection(d.class_id, d.box, d.confidence ** 3 * 0.5 + 0.1, d.image_id)
                    for d in dets]
        assert map50(squashed, gts, classes=5).map50 == pytest.approx(base, abs=1e-12)

    def test_adding_fp_never_raises_ap(self, rng):
        dets_raw, gts_raw = random_detection_scene(rng)
        gts = [GroundTruth(c, b, i) for i, c, b in gts_raw]
        dets = [Detection(c, b, conf, i) for i, c, b, conf in dets_raw]
        before = map50(dets, gts, classes=5)
        far_fp = Detection(gts[0].class_id, (900.0, 900.0, 910.0, 910.0), 0.99, gts[0].image_id)
        after = map50(dets + [far_fp], gts, classes=5)
        cid = gts[0].class_id
        assert after.per_class[cid].ap <= before.per_class[cid].ap + 1e-12

    def test_tp_for_unmatched_gt_never_lowers_ap(self, rng):
        dets_raw, gts_raw = random_detection_scene(rng)
        gts = [GroundTruth(c, b, i) for i, c, b in gts_raw]
        dets = [Detection(c, b, conf, i) for i, c, b, conf in dets_raw]
        report = map50(dets, gts, classes=5)
        # find an unmatched gt: add a perfect high-confidence detection for it
        cid = gts[0].class_id
        perfect = Detection(cid, gts[0].box, 1.0, gts[0].image_id)
        after = map50(dets + [perfect], gts, classes=5)
        assert after.per_class[cid].ap >= report.per_class[cid].ap - 1e-12


class TestMap50:
    def test_all_perfect(self):
        gts = [GroundTruth(c, (0, 0, 10, 10), 0) for c in (1, 2, 3)]
        dets = [Detection(c, (0, 0, 10, 10), 1.0, 0) for c in (1, 2, 3)]
        assert map50(dets, gts, classes=20).map50 == 1.0

    def test_two_class_mean(self):
        gts = [GroundTruth(1, (0, 0, 10, 10), 0), GroundTruth(2, (20, 0, 30, 10), 0)]
        dets = [Detection(1, (0, 0, 10, 10), 1.0, 0)]
        assert map50(dets, gts, classes=20).map50 == 0.5

    def test_absent_classes_excluded(self):
        gts = [GroundTruth(7, (0, 0, 10, 10), 0)]
        dets = [Detection(7, (0, 0, 10, 10), 1.0, 0)]
        report = map50(dets, gts, classes=20)
        assert list(report.per_class) == [7] and report.map50 == 1.0

    def test_empty_gt_is_error(self):
        with pytest.raises(ValueError, match="no ground truth"):
            map50([], [], classes=20)

    def test_out_of_range_class_rejected(self):
        with pytest.raises(ValueError, match="class_id"):
            map50([], [GroundTruth(21, (0, 0, 1, 1))], classes=20)

    def test_brute_force_agreement_sample(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            dets_raw, gts_raw = random_detection_scene(rng)
            gts = [GroundTruth(c, b, i) for i, c, b in gts_raw]
            dets = [Detection(c, b, conf, i) for i, c, b, conf in dets_raw]
            got = map50(dets, gts, classes=5).map50
            want = brute_force_map50(dets_raw, gts_raw)
            assert got == pytest.approx(want, abs=1e-9), seed

    def test_eleven_point_variant_close_but_distinct(self):
        gts = [GroundTruth(1, (0, 0, 10, 10), "a"), GroundTruth(1, (20, 20, 30, 30), "a")]
        dets = [
            Detection(1, (0, 0, 10, 10), 0.9, "a"),
            Detection(1, (50, 50, 60, 60), 0.8, "a"),
            Detection(1, (20, 20, 30, 30), 0.7, "a"),
        ]
        allp = map50(dets, gts, classes=20).map50
        elevenp = map50(dets, gts, classes=20, interpolation="11-point").map50
        assert 0 < elevenp <= 1 and abs(elevenp - allp) < 0.1 and elevenp != allp
