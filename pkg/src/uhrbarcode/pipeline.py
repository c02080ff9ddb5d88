"""End-to-end detection: downscale, propose, crop, segment, extract, merge."""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import rpn, ynet
from .geometry import BBox, intersection, iou
from .metrics import pseudo_scores
from .postproc import PostprocParams, binarize, extract_boxes

STAGES = ("downscale", "propose", "crop", "ynet", "postproc")


@dataclass
class PipelineConfig:
    ynet_checkpoint: str = ""
    pnet_checkpoint: str = ""
    postproc: PostprocParams = field(default_factory=PostprocParams)
    rpn_threshold: float = 0.5
    rpn_nms_iou: float = 0.5
    crop_size: int = 400
    crop_margin: float = 0.1
    crop_overlap: int = 50
    dedupe_iou: float = 0.5
    batch_size: int = 4
    threads: int = 1
    seed: int = 0

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["postproc"] = self.postproc.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        d = dict(d)
        if "postproc" in d:
            d["postproc"] = PostprocParams(**d["postproc"])
        cfg = cls(**d)
        if base_dir is not None:
            for key in ("ynet_checkpoint", "pnet_checkpoint"):
                path = getattr(cfg, key)
                if path and not Path(path).is_absolute():
                    setattr(cfg, key, str(base_dir / path))
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)


@dataclass
class CropResult:
    window: BBox
    footprint: BBox
    mask: np.ndarray  # binarized Y-Net output over the whole window
    boxes: list[BBox]  # crop-local


@dataclass
class PipelineResult:
    detections: list[BBox]
    crops: list[CropResult]
    proposals: list[BBox]  # LR coordinates, after NMS
    dropped: int
    timings: dict[str, float]  # seconds

    def stitched_mask(self, shape: tuple[int, int]) -> np.ndarray:
        """Union of the crop masks on the UHR canvas."""
        out = np.zeros(shape, bool)
        for c in self.crops:
            fx0, fy0, fx1, fy1 = int(c.footprint.x), int(c.footprint.y), int(c.footprint.x2), int(c.footprint.y2)
            if fx1 <= fx0 or fy1 <= fy0:
                continue
            wx, wy = int(c.window.x), int(c.window.y)
            out[fy0:fy1, fx0:fx1] |= c.mask[fy0 - wy:fy1 - wy, fx0 - wx:fx1 - wx]
        return out


class Pipeline:
    def __init__(self, config: PipelineConfig, proposal_net: rpn.ProposalNet, segmenter: ynet.YNetModel):
        if config.crop_size != segmenter.config.input_size:
            raise ValueError(f"crop_size {config.crop_size} does not match the Y-Net input size "
                             f"{segmenter.config.input_size}")
        if proposal_net.config.input_size != rpn.LR_SIZE:
            raise ValueError(f"proposal net input {proposal_net.config.input_size} != {rpn.LR_SIZE}")
        self.config = config
        self.proposal_net = proposal_net
        self.segmenter = segmenter

    @classmethod
    def from_config(cls, config: PipelineConfig) -> "Pipeline":
        for key in ("pnet_checkpoint", "ynet_checkpoint"):
            path = getattr(config, key)
            if not path or not Path(path).is_file():
                raise FileNotFoundError(f"{key} not found: {path!r}")
        return cls(config, rpn.load_checkpoint(config.pnet_checkpoint), ynet.load_checkpoint(config.ynet_checkpoint))

    def segment(self, crops: list[np.ndarray]) -> list[np.ndarray]:
        """Binarized Y-Net masks, batched; order matches ``crops``."""
        bs = max(1, self.config.batch_size)
        batches = [np.stack(crops[i:i + bs]) for i in range(0, len(crops), bs)]

        def run(batch):
            prob = ynet.ynet_forward(self.segmenter, ynet.normalize_crop(batch))
            return binarize(prob.reshape(batch.shape), self.config.postproc.threshold)

        if self.config.threads > 1 and len(batches) > 1:
            with ThreadPoolExecutor(self.config.threads) as pool:
                outs = list(pool.map(run, batches))
        else:
            outs = [run(b) for b in batches]
        return [m for out in outs for m in out]

    def crop_boxes(self, masks: list[np.ndarray]) -> list[list[BBox]]:
        # masks are already binary, so any threshold in (0, 1] reproduces them
        return [extract_boxes(m.astype(np.float32), self.config.postproc) for m in masks]

    def __call__(self, uhr: np.ndarray) -> PipelineResult:
        cfg = self.config
        t = {}
        t0 = time.perf_counter()
        lr, smap = rpn.downscale(uhr)
        t1 = time.perf_counter()
        proposals = rpn.nms(rpn.propose(self.proposal_net, lr, cfg.rpn_threshold), cfg.rpn_nms_iou)
        t2 = time.perf_counter()
        crops, dropped = rpn.remap_and_crop(uhr, proposals, smap, cfg.crop_size, cfg.crop_margin, cfg.crop_overlap)
        t3 = time.perf_counter()
        masks = self.segment([c.image for c in crops])
        t4 = time.perf_counter()
        local = self.crop_boxes(masks)
        results = [CropResult(c.window, c.footprint, m, b) for c, m, b in zip(crops, masks, local)]
        detections = merge_crop_boxes(results, uhr.shape, cfg.dedupe_iou)
        t5 = time.perf_counter()
        t.update(downscale=t1 - t0, propose=t2 - t1, crop=t3 - t2, ynet=t4 - t3, postproc=t5 - t4, end_to_end=t5 - t0)
        return PipelineResult(detections, results, proposals, dropped, t)


def run_pipeline(pipeline: Pipeline, uhr: np.ndarray, gt_labels: np.ndarray | None = None,
                 gt_instances: list[tuple[int, BBox]] | None = None) -> PipelineResult:
    """Runs ``pipeline``; with GT supplied, detections carry pseudo-scores."""
    res = pipeline(uhr)
    if gt_labels is not None and gt_instances is not None:
        res.detections = score_detections(res, uhr.shape, gt_labels, gt_instances)
    return res


def score_detections(res: PipelineResult, shape, gt_labels, gt_instances) -> list[BBox]:
    """Each detection takes the pseudo-score of its best-overlapping GT instance (0 if none)."""
    scores = pseudo_scores(res.stitched_mask(shape), gt_labels, gt_instances)
    out = []
    for d in res.detections:
        best = max(gt_instances, key=lambda g: iou(d, g[1]), default=None)
        s = scores[best[0]] if best is not None and iou(d, best[1]) > 0 else 0.0
        out.append(d.with_score(s))
    return out


def _truncated(local: BBox, window: BBox, shape) -> bool:
    """True when a crop-local box touches a crop edge that lies inside the image."""
    h, w = shape
    size = window.w
    return ((local.x <= 0 and window.x > 0) or (local.y <= 0 and window.y > 0)
            or (local.x2 >= size and window.x2 < w) or (local.y2 >= window.h and window.y2 < h))


def merge_crop_boxes(crops: list[CropResult], shape: tuple[int, int], dedupe_iou: float = 0.5) -> list[BBox]:
    """Maps crop-local boxes to the UHR frame and removes cross-crop duplicates.

    Greedy NMS over (complete boxes first, then boxes cut by an interior crop
    edge), each group by descending score then (x, y). A cut box is also
    dropped when at least half of it lies inside an already kept box.
    """
    h, w = shape
    cands = []
    for c in crops:
        for b in c.boxes:
            g = b.translate(c.window.x, c.window.y).clamp(w, h)
            if g.w > 0 and g.h > 0:
                cands.append((_truncated(b, c.window, shape), g))
    cands.sort(key=lambda tb: (tb[0], -tb[1].score, tb[1].x, tb[1].y))
    kept: list[BBox] = []
    for cut, b in cands:
        if any(iou(b, k) > dedupe_iou for k in kept):
            continue
        if cut and any(intersection(b, k) >= 0.5 * b.area for k in kept):
            continue
        kept.append(b)
    return sorted(kept, key=lambda b: (b.y, b.x))


def sliding_window_starts(extent: int, size: int, stride: int) -> list[int]:
    if extent <= size:
        return [0]
    starts = list(range(0, extent - size + 1, stride))
    if starts[-1] + size < extent:
        starts.append(extent - size)
    return starts


def sliding_window(pipeline: Pipeline, uhr: np.ndarray, stride: int = 350) -> tuple[list[BBox], float]:
    """Exhaustive baseline: Y-Net and post-processing on every window; returns (boxes, seconds)."""
    size = pipeline.config.crop_size
    h, w = uhr.shape
    t0 = time.perf_counter()
    windows = [BBox(x, y, size, size) for y in sliding_window_starts(h, size, stride)
               for x in sliding_window_starts(w, size, stride)]
    images = [rpn.cut_window(uhr, int(b.x), int(b.y), size) for b in windows]
    masks = pipeline.segment(images)
    local = pipeline.crop_boxes(masks)
    results = [CropResult(b, b.clamp(w, h), m, lb) for b, m, lb in zip(windows, masks, local)]
    boxes = merge_crop_boxes(results, uhr.shape, pipeline.config.dedupe_iou)
    return boxes, time.perf_counter() - t0
