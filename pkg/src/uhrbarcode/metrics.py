"""Detection and segmentation metrics.

Box AP follows the COCO evaluator: greedy score-ordered one-to-one matching,
101-point interpolated precision, GT area buckets with ignore semantics, and
-1 for undefined values.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .geometry import BBox, iou, iou_matrix

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
AR_THRESHOLDS = (0.5, 0.7, 0.8, 0.9)
AREA_BUCKETS = {
    "all": (0.0, float("inf")),
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, float("inf")),
}
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
UNDEFINED = -1.0

__all__ = [
    "Detection", "MatchResult", "MetricsReport", "confusion_counts", "detection_rate", "evaluate_detections",
    "iou", "match", "match_and_ap", "metrics_from_counts", "pixel_metrics", "pr_curve", "pseudo_scores",
]


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: BBox

    @property
    def score(self) -> float:
        return self.box.score


@dataclass
class MatchResult:
    det_to_gt: list[int | None]
    gt_matched: list[bool]
    det_ignored: list[bool] = field(default_factory=list)


def _in_bucket(area: float, bucket: tuple[float, float]) -> bool:
    return bucket[0] <= area < bucket[1]


def match(dets: list[BBox], gts: list[BBox], threshold: float, gt_ignore: list[bool] | None = None) -> MatchResult:
    """Greedy one-to-one matching of score-sorted ``dets`` to ``gts``.

    Each detection takes the highest-IoU free GT with IoU >= threshold,
    preferring non-ignored GTs; among equal IoUs the lower GT index wins.
    """
    gt_ignore = gt_ignore or [False] * len(gts)
    ious = iou_matrix(dets, gts)
    gt_order = sorted(range(len(gts)), key=lambda g: (gt_ignore[g], g))
    taken = [False] * len(gts)
    det_to_gt: list[int | None] = []
    det_ignored = []
    for d in range(len(dets)):
        best, best_iou = None, threshold
        for g in gt_order:
            if taken[g]:
                continue
            if best is not None and not gt_ignore[best] and gt_ignore[g]:
                break
            v = ious[d, g]
            if v < best_iou or (best is not None and v == best_iou):
                continue
            best, best_iou = g, v
        if best is not None:
            taken[best] = True
        det_to_gt.append(best)
        det_ignored.append(best is not None and gt_ignore[best])
    return MatchResult(det_to_gt, taken, det_ignored)


def _group(items: Iterable, key) -> dict:
    out: dict = {}
    for it in items:
        out.setdefault(key(it), []).append(it)
    return out


def pr_curve(dets: list[Detection], gts: list[tuple[str, BBox]], threshold: float, area_bucket: str = "all",
             max_dets: int = 100) -> tuple[np.ndarray, np.ndarray, int]:
    """Cumulative (recall, precision) over score-ranked detections, and the GT count."""
    bucket = AREA_BUCKETS[area_bucket]
    dets_by = _group(dets, lambda d: d.image_id)
    gts_by = _group(gts, lambda g: g[0])
    n_gt = sum(_in_bucket(b.area, bucket) for _, b in gts)
    rows = []  # (score, image, y, x, tp, ignored)
    for img in sorted(set(dets_by) | set(gts_by)):
        ds = sorted(dets_by.get(img, []), key=lambda d: (-d.score, d.box.y, d.box.x))[:max_dets]
        gs = [b for _, b in gts_by.get(img, [])]
        ign = [not _in_bucket(b.area, bucket) for b in gs]
        res = match([d.box for d in ds], gs, threshold, ign)
        for d, g, dig in zip(ds, res.det_to_gt, res.det_ignored):
            ignored = dig or (g is None and not _in_bucket(d.box.area, bucket))
            rows.append((d.score, img, d.box.y, d.box.x, g is not None, ignored))
    rows.sort(key=lambda r: (-r[0], r[1], r[2], r[3]))
    tp = np.array([r[4] for r in rows if not r[5]], dtype=float)
    ctp, cfp = np.cumsum(tp), np.cumsum(1 - tp)
    recall = ctp / max(n_gt, 1)
    precision = ctp / np.maximum(ctp + cfp, np.finfo(float).eps)
    return recall, precision, n_gt


def match_and_ap(dets: list[Detection], gts: list[tuple[str, BBox]], iou_thresholds=IOU_THRESHOLDS,
                 area_bucket: str = "all", max_dets: int = 100) -> dict:
    """Per-threshold AP and recall. Returns ``{"ap": {t: v}, "recall": {t: v}}``.

    Values are -1 when the bucket holds no GT.
    """
    ap, rec = {}, {}
    for t in iou_thresholds:
        recall, precision, n_gt = pr_curve(dets, gts, t, area_bucket, max_dets)
        if n_gt == 0:
            ap[t] = rec[t] = UNDEFINED
            continue
        ap[t] = _interpolated_ap(recall, precision)
        rec[t] = float(recall[-1]) if len(recall) else 0.0
    return {"ap": ap, "recall": rec}


def _interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    if len(recall) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # tolerance keeps recall values like 7/100 from missing their grid point
    idx = np.searchsorted(recall, RECALL_POINTS - 1e-12, side="left")
    valid = idx < len(recall)
    q = np.zeros_like(RECALL_POINTS)
    q[valid] = envelope[idx[valid]]
    return float(q.mean())


def _mean_defined(values) -> float:
    vals = [v for v in values if v != UNDEFINED]
    return float(np.mean(vals)) if vals else UNDEFINED


# ---------------------------------------------------------------------------
# masks


def pseudo_scores(pred_mask: np.ndarray, gt_labels: np.ndarray, instances: list[tuple[int, BBox]]) -> dict[int, float]:
    """Per GT instance: predicted foreground pixels inside its box over its GT
    pixel count, clamped to [0, 1]."""
    pred = np.asarray(pred_mask) > 0
    if pred.shape != gt_labels.shape:
        raise ValueError(f"mask extents differ: {pred.shape} vs {gt_labels.shape}")
    counts = np.bincount(gt_labels.ravel(), minlength=max([i for i, _ in instances], default=0) + 1)
    out = {}
    for iid, b in instances:
        n = int(counts[iid])
        if n == 0:
            raise ValueError(f"instance {iid} has no pixels in the GT mask")
        x0, y0 = max(int(np.floor(b.x)), 0), max(int(np.floor(b.y)), 0)
        x1, y1 = int(np.ceil(b.x2)), int(np.ceil(b.y2))
        out[iid] = min(1.0, float(pred[y0:y1, x0:x1].sum()) / n)
    return out


def _ratio(num: float, den: float) -> float:
    if den == 0:
        return 1.0 if num == 0 else 0.0
    return num / den


def confusion_counts(pred: np.ndarray, gt: np.ndarray) -> dict[str, int]:
    """Pixel confusion counts; sums of these aggregate metrics over many images."""
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise ValueError(f"mask extents differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred)) - tp
    fn = int(np.count_nonzero(gt)) - tp
    return {"tp": tp, "fp": fp, "fn": fn, "tn": pred.size - tp - fp - fn}


def metrics_from_counts(c: dict[str, int]) -> dict[str, float]:
    tp, fp, fn, tn = (float(c[k]) for k in ("tp", "fp", "fn", "tn"))
    iou_fg = _ratio(tp, tp + fp + fn)
    iou_bg = _ratio(tn, tn + fp + fn)
    return {
        "accuracy": _ratio(tp + tn, tp + tn + fp + fn),
        "precision": _ratio(tp, tp + fp),
        "recall": _ratio(tp, tp + fn),
        "miou": (iou_fg + iou_bg) / 2,
        "iou_barcode": iou_fg,
        "iou_background": iou_bg,
    }


def pixel_metrics(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    return metrics_from_counts(confusion_counts(pred, gt))


# ---------------------------------------------------------------------------
# detection rate


def detection_rate(dets: dict[str, list[BBox]], gts: dict[str, list[BBox]], iou_threshold: float = 0.5) -> dict:
    """DR (images with every GT matched), mIoU over matched pairs, box precision/recall."""
    images = sorted(set(dets) | set(gts))
    full, matched_ious, n_det, n_gt, n_match = 0, [], 0, 0, 0
    for img in images:
        ds = sorted(dets.get(img, []), key=lambda b: (-b.score, b.y, b.x))
        gs = gts.get(img, [])
        res = match(ds, gs, iou_threshold)
        n_det += len(ds)
        n_gt += len(gs)
        pairs = [(d, g) for d, g in zip(ds, res.det_to_gt) if g is not None]
        n_match += len(pairs)
        matched_ious += [iou(d, gs[g]) for d, g in pairs]
        full += all(res.gt_matched)
    return {
        "detection_rate": full / len(images) if images else 1.0,
        "miou": float(np.mean(matched_ious)) if matched_ious else 0.0,
        "precision": _ratio(n_match, n_det),
        "recall": _ratio(n_match, n_gt),
    }


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    mAP: float
    AP50: float
    AP75: float
    mAP_small: float
    mAP_medium: float
    mAP_large: float
    AR50: float
    AR70: float
    AR80: float
    AR90: float
    detection_rate: float
    det_miou: float
    det_precision: float
    det_recall: float
    pixel: dict | None = None
    latency: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_detections(dets: list[Detection], gts: list[tuple[str, BBox]]) -> MetricsReport:
    per = {b: match_and_ap(dets, gts, IOU_THRESHOLDS, b, 100) for b in ("all", "small", "medium", "large")}
    ar = match_and_ap(dets, gts, AR_THRESHOLDS, "all", 10)["recall"]
    aps = per["all"]["ap"]
    dr = detection_rate(
        {k: [d.box for d in v] for k, v in _group(dets, lambda d: d.image_id).items()},
        {k: [b for _, b in v] for k, v in _group(gts, lambda g: g[0]).items()},
    )
    return MetricsReport(
        mAP=_mean_defined(aps.values()), AP50=aps[0.5], AP75=aps[0.75],
        mAP_small=_mean_defined(per["small"]["ap"].values()),
        mAP_medium=_mean_defined(per["medium"]["ap"].values()),
        mAP_large=_mean_defined(per["large"]["ap"].values()),
        AR50=ar[0.5], AR70=ar[0.7], AR80=ar[0.8], AR90=ar[0.9],
        detection_rate=dr["detection_rate"], det_miou=dr["miou"],
        det_precision=dr["precision"], det_recall=dr["recall"],
    )
