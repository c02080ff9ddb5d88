import numpy as np
import pytest

from uhrbarcode.geometry import BBox
from uhrbarcode.metrics import (
    IOU_THRESHOLDS,
    Detection,
    detection_rate,
    evaluate_detections,
    match,
    match_and_ap,
    pixel_metrics,
    pseudo_scores,
)

from oracles import brute_force_ap


def random_case(rng):
    n_img = int(rng.integers(1, 3))
    gts, dets = [], []
    for _ in range(int(rng.integers(1, 5))):
        img = f"{int(rng.integers(n_img))}"
        gts.append((img, BBox(*rng.integers(0, 40, 2), *rng.integers(5, 20, 2))))
    for _ in range(int(rng.integers(0, 7))):
        if rng.random() < 0.7:
            img, g = gts[int(rng.integers(len(gts)))]
            box = BBox(g.x + rng.integers(-4, 5), g.y + rng.integers(-4, 5), max(1, g.w + rng.integers(-4, 5)),
                       max(1, g.h + rng.integers(-4, 5)))
        else:
            img = f"{int(rng.integers(n_img))}"
            box = BBox(*rng.integers(0, 40, 2), *rng.integers(5, 20, 2))
        dets.append(Detection(img, box.with_score(round(float(rng.random()), 1))))
    return dets, gts


class TestMatchAndAP:
    def test_perfect(self):
        gts = [("a", BBox(0, 0, 10, 10)), ("a", BBox(50, 50, 40, 40)), ("b", BBox(5, 5, 100, 20))]
        dets = [Detection(i, b) for i, b in gts]
        res = match_and_ap(dets, gts)
        assert all(v == 1.0 for v in res["ap"].values())
        rep = evaluate_detections(dets, gts)
        assert rep.mAP == 1.0 and rep.AR90 == 1.0 and rep.detection_rate == 1.0

    def test_threshold_crossing(self):
        g = BBox(0, 0, 10, 10)
        d = BBox(0, 0, 10, 6)  # IoU 0.6
        res = match_and_ap([Detection("x", d)], [("x", g)], (0.5, 0.75))
        assert res["ap"] == {0.5: 1.0, 0.75: 0.0}

    def test_empty_dets(self):
        res = match_and_ap([], [("x", BBox(0, 0, 5, 5))], (0.5,))
        assert res["ap"][0.5] == 0.0 and res["recall"][0.5] == 0.0

    def test_empty_bucket_is_undefined(self):
        gts = [("x", BBox(0, 0, 10, 10))]
        res = match_and_ap([Detection("x", gts[0][1])], gts, (0.5,), area_bucket="large")
        assert res["ap"][0.5] == -1
        rep = evaluate_detections([Detection("x", gts[0][1])], gts)
        assert rep.mAP_large == -1 and rep.mAP_medium == -1 and rep.mAP_small == 1.0

    def test_small_det_on_medium_gt_ignored_in_small_bucket(self):
        gts = [("x", BBox(0, 0, 50, 50)), ("x", BBox(100, 100, 10, 10))]
        dets = [Detection("x", BBox(0, 0, 50, 50, 0.9)), Detection("x", BBox(100, 100, 10, 10, 0.8))]
        assert match_and_ap(dets, gts, (0.5,), "small")["ap"][0.5] == 1.0

    @pytest.mark.parametrize("seed", range(50))
    def test_brute_force_equivalence(self, seed):
        rng = np.random.default_rng(seed)
        dets, gts = random_case(rng)
        for t in (0.5, 0.75):
            ours = match_and_ap(dets, gts, (t,))["ap"][t]
            ref = brute_force_ap([(d.image_id, tuple(d.box.to_list()), d.score) for d in dets],
                                 [(i, tuple(b.to_list())) for i, b in gts], t)
            assert ours == pytest.approx(ref, abs=1e-9)

    def test_ap_monotone_in_threshold(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            dets, gts = random_case(rng)
            aps = list(match_and_ap(dets, gts, IOU_THRESHOLDS)["ap"].values())
            assert all(b <= a + 1e-12 for a, b in zip(aps, aps[1:]))

    def test_max_dets_cap(self):
        g = BBox(0, 0, 10, 10)
        dets = [Detection("x", BBox(100 + 20 * i, 0, 5, 5, 0.9)) for i in range(3)] + [Detection("x", g.with_score(0.1))]
        assert match_and_ap(dets, [("x", g)], (0.5,), max_dets=3)["recall"][0.5] == 0.0
        assert match_and_ap(dets, [("x", g)], (0.5,), max_dets=4)["recall"][0.5] == 1.0


class TestMatch:
    def test_one_to_one(self):
        g = BBox(0, 0, 10, 10)
        res = match([g.with_score(0.9), g.with_score(0.8)], [g], 0.5)
        assert res.det_to_gt == [0, None] and res.gt_matched == [True]

    def test_highest_iou_wins(self):
        gts = [BBox(0, 0, 10, 10), BBox(2, 0, 10, 10)]
        res = match([BBox(2, 0, 10, 10)], gts, 0.5)
        assert res.det_to_gt == [1]


class TestPseudoScores:
    def setup_method(self):
        self.labels = np.zeros((40, 40), np.uint8)
        self.labels[5:15, 5:25] = 1
        self.labels[20:30, 10:20] = 2
        self.inst = [(1, BBox(5, 5, 20, 10)), (2, BBox(10, 20, 10, 10))]

    def test_identity(self):
        assert pseudo_scores(self.labels > 0, self.labels, self.inst) == {1: 1.0, 2: 1.0}

    def test_empty(self):
        assert pseudo_scores(np.zeros((40, 40)), self.labels, self.inst) == {1: 0.0, 2: 0.0}

    def test_half(self):
        pred = np.zeros((40, 40), bool)
        pred[5:15, 5:15] = True
        assert pseudo_scores(pred, self.labels, self.inst)[1] == 0.5

    def test_clamped(self):
        assert pseudo_scores(np.ones((40, 40)), self.labels, self.inst) == {1: 1.0, 2: 1.0}

    def test_missing_instance(self):
        with pytest.raises(ValueError, match="instance 3"):
            pseudo_scores(self.labels > 0, self.labels, [(3, BBox(0, 0, 2, 2))])


class TestPixelMetrics:
    def test_identity(self):
        m = np.random.default_rng(0).random((20, 20)) > 0.5
        r = pixel_metrics(m, m)
        assert r["accuracy"] == r["precision"] == r["recall"] == r["miou"] == 1.0

    def test_all_wrong(self):
        r = pixel_metrics(np.ones((5, 5)), np.zeros((5, 5)))
        assert r["accuracy"] == 0 and r["precision"] == 0 and r["iou_barcode"] == 0

    def test_confusion_arithmetic(self):
        pred = np.zeros(100, bool)
        gt = np.zeros(100, bool)
        pred[:20] = gt[:20] = True  # TP 20
        pred[20:25] = True  # FP 5
        gt[25:35] = True  # FN 10
        r = pixel_metrics(pred.reshape(10, 10), gt.reshape(10, 10))
        assert r["precision"] == pytest.approx(0.8)
        assert r["recall"] == pytest.approx(2 / 3)
        assert r["accuracy"] == pytest.approx(0.85)
        assert r["miou"] == pytest.approx((20 / 35 + 65 / 80) / 2)

    def test_complement_invariance(self):
        rng = np.random.default_rng(1)
        p, g = rng.random((15, 15)) > 0.4, rng.random((15, 15)) > 0.6
        assert pixel_metrics(p, g)["accuracy"] == pixel_metrics(~p, ~g)["accuracy"]


class TestDetectionRate:
    def test_perfect(self):
        gts = {"a": [BBox(0, 0, 10, 10)], "b": [BBox(3, 3, 5, 5), BBox(30, 30, 8, 8)]}
        r = detection_rate(gts, gts)
        assert r["detection_rate"] == 1.0 and r["miou"] == 1.0

    def test_no_dets(self):
        assert detection_rate({}, {"a": [BBox(0, 0, 4, 4)]})["detection_rate"] == 0.0

    def test_half(self):
        gts = {"a": [BBox(0, 0, 10, 10)], "b": [BBox(0, 0, 10, 10), BBox(50, 50, 10, 10)]}
        dets = {"a": [BBox(0, 0, 10, 10)], "b": [BBox(1, 0, 10, 10)]}
        r = detection_rate(dets, gts)
        assert r["detection_rate"] == 0.5
        assert r["precision"] == 1.0 and r["recall"] == pytest.approx(2 / 3)
        assert r["miou"] == pytest.approx((1 + 90 / 110) / 2)
