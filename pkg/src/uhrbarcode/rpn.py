"""Region proposals on a 256x256 downscale of the UHR image.

A small anchor-free network scores a 16x16 grid of cells. Each cell predicts an
objectness logit, the box centre as an offset inside the cell and log extents
relative to the cell size. Boxes are NMS-filtered, mapped back to UHR
coordinates, margin-expanded and cut into fixed-size crops.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint, nn
from .geometry import BBox, iou
from .nn import ConvSpec
from .ynet import TrainingDiverged, TrainRecord, normalize_crop

MAGIC = b"PNET"
LR_SIZE = 256
BACKGROUND = 255


# ---------------------------------------------------------------------------
# downscaling


@dataclass(frozen=True)
class ScaleMap:
    """Axis-aligned affine map between UHR and LR pixel coordinates.

    ``padded_w``/``padded_h`` exceed the source extents only when the source is
    smaller than the target and had to be padded.
    """

    src_w: int
    src_h: int
    padded_w: int
    padded_h: int
    dst_w: int = LR_SIZE
    dst_h: int = LR_SIZE

    @property
    def sx(self) -> float:
        return self.padded_w / self.dst_w

    @property
    def sy(self) -> float:
        return self.padded_h / self.dst_h

    @property
    def forward_affine(self) -> np.ndarray:
        return np.array([[1 / self.sx, 0, 0], [0, 1 / self.sy, 0]])

    @property
    def inverse_affine(self) -> np.ndarray:
        return np.array([[self.sx, 0, 0], [0, self.sy, 0]])

    def to_lr(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return np.c_[pts, np.ones(len(pts))] @ self.forward_affine.T

    def to_uhr(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return np.c_[pts, np.ones(len(pts))] @ self.inverse_affine.T

    def box_to_uhr(self, box: BBox) -> BBox:
        (x0, y0), (x1, y1) = self.to_uhr([(box.x, box.y), (box.x2, box.y2)])
        return BBox.from_corners(x0, y0, x1, y1, box.score)

    def box_to_lr(self, box: BBox) -> BBox:
        (x0, y0), (x1, y1) = self.to_lr([(box.x, box.y), (box.x2, box.y2)])
        return BBox.from_corners(x0, y0, x1, y1, box.score)


def area_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) weights: row i averages source span [i*s, (i+1)*s), s = src/dst."""
    s = src / dst
    lo = np.arange(dst)[:, None] * s
    hi = lo + s
    j = np.arange(src)[None, :]
    overlap = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0, None)
    return overlap / s


def scale_map(width: int, height: int, size: int = LR_SIZE) -> ScaleMap:
    """The map :func:`downscale` records for a ``width x height`` source."""
    return ScaleMap(width, height, max(width, size), max(height, size), size, size)


def downscale(uhr: np.ndarray, size: int = LR_SIZE, chunk_rows: int = 512) -> tuple[np.ndarray, ScaleMap]:
    """Area-averaging reduction to ``size x size`` (uint8, rounded).

    Extents below ``size`` are padded with white on the right/bottom first.
    """
    uhr = np.asarray(uhr)
    if uhr.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {uhr.shape}")
    h, w = uhr.shape
    ph, pw = max(h, size), max(w, size)
    if (ph, pw) != (h, w):
        uhr = np.pad(uhr, ((0, ph - h), (0, pw - w)), constant_values=BACKGROUND)
    rows = area_matrix(ph, size)
    cols_t = area_matrix(pw, size).T
    acc = np.zeros((size, size))
    for r in range(0, ph, chunk_rows):
        acc += rows[:, r:r + chunk_rows] @ (uhr[r:r + chunk_rows].astype(np.float64) @ cols_t)
    lr = np.clip(np.rint(acc), 0, 255).astype(np.uint8)
    return lr, scale_map(w, h, size)


# ---------------------------------------------------------------------------
# proposal network


@dataclass
class PNetConfig:
    input_size: int = LR_SIZE
    channels: tuple[int, ...] = (8, 16, 32, 64)
    box_weight: float = 1.0
    pos_weight: float = 1.0
    max_log_extent: float = 4.0
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.input_size % 2 ** len(self.channels):
            raise ValueError(f"input_size {self.input_size} is not divisible by 2^{len(self.channels)}")

    @property
    def cell(self) -> int:
        return 2 ** len(self.channels)

    @property
    def grid(self) -> int:
        return self.input_size // self.cell

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PNetConfig":
        return cls(**d)


def pnet_specs(cfg: PNetConfig) -> dict[str, ConvSpec]:
    specs, c_in = {}, 1
    for k, c in enumerate(cfg.channels):
        specs[f"conv{k}"] = ConvSpec(c_in, c, (3, 3), stride=2, padding=1)
        c_in = c
    specs["head"] = ConvSpec(c_in, 5, (3, 3), padding=1)
    return specs


def pnet_shapes(cfg: PNetConfig) -> dict[str, tuple]:
    out = {}
    for name, s in pnet_specs(cfg).items():
        out[f"{name}.w"] = (s.out_channels, s.in_channels, *s.kernel)
        out[f"{name}.b"] = (s.out_channels,)
    return out


@dataclass
class PNetHyper:
    epochs: int = 40
    batch_size: int = 8
    lr: float = 3e-3
    optimizer: str = "adam"
    augment: bool = True
    max_shift: int = 0  # random integer translation (LR px) per sample; 0 disables
    decay_at: float | None = 0.75  # fraction of epochs after which lr drops 10x
    seed: int = 0


class ProposalNet:
    def __init__(self, config: PNetConfig, params: dict[str, np.ndarray]):
        checkpoint.audit_shapes(params, pnet_shapes(config))
        self.config = config
        self.params = params
        self._specs = pnet_specs(config)

    def copy(self) -> "ProposalNet":
        return ProposalNet(self.config, {k: v.copy() for k, v in self.params.items()})

    def _as_batch(self, x):
        x = np.asarray(x, dtype=np.float32)
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        s = self.config.input_size
        if x.shape[1:] != (1, s, s):
            raise ValueError(f"proposal net expects {s}x{s} single-channel input, got {x.shape}")
        return x

    def head_with_cache(self, x):
        """Raw head output (N, 5, G, G) for normalized input, plus caches."""
        h = self._as_batch(x)
        caches = []
        for name, spec in self._specs.items():
            h, cache = nn.conv2d(h, spec, self.params[f"{name}.w"], self.params[f"{name}.b"])
            mask = None
            if name != "head":
                h, mask = nn.relu(h)
            caches.append((name, cache, mask))
        return h, caches

    def __call__(self, x) -> np.ndarray:
        return self.head_with_cache(x)[0]

    def backward(self, dout, caches) -> dict[str, np.ndarray]:
        grads = {}
        for name, cache, mask in reversed(caches):
            if mask is not None:
                dout = nn.relu_backward(dout, mask)
            g = nn.conv2d_backward(dout, cache)
            grads[f"{name}.w"], grads[f"{name}.b"] = g["weights"], g["bias"]
            dout = g["input"]
        return grads

    def loss_and_grads(self, x, obj, offsets, positive):
        """Positive-weighted BCE over every cell's objectness plus weighted L1
        on positive cells' box terms."""
        out, caches = self.head_with_cache(x)
        n_cells = obj.size
        wp = self.config.pos_weight
        prob, _ = nn.sigmoid(out[:, 0])
        p = np.clip(prob.astype(np.float64), nn.BCE_EPS, 1 - nn.BCE_EPS)
        bce = float(-np.mean(wp * obj * np.log(p) + (1 - obj) * np.log1p(-p)))
        dout = np.zeros_like(out)
        dout[:, 0] = (wp * obj * (prob - 1) + (1 - obj) * prob) / n_cells
        n_pos = int(positive.sum())
        l1 = 0.0
        if n_pos:
            diff = out[:, 1:] - offsets
            pos = positive[:, None].astype(out.dtype)
            l1 = float(np.sum(np.abs(diff) * pos)) / n_pos
            dout[:, 1:] = self.config.box_weight * np.sign(diff) * pos / n_pos
        grads = self.backward(dout.astype(np.float32), caches)
        return bce + self.config.box_weight * l1, grads


def build_proposal_net(config: PNetConfig | None = None) -> ProposalNet:
    config = config or PNetConfig()
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, spec in pnet_specs(config).items():
        shape = (spec.out_channels, spec.in_channels, *spec.kernel)
        params[f"{name}.w"] = nn.he_uniform(rng, shape, spec.in_channels * 9)
        params[f"{name}.b"] = np.zeros(spec.out_channels, np.float32)
    # start from a low objectness prior so early training is not flooded by negatives
    params["head.b"][0] = -2.0
    return ProposalNet(config, params)


def encode_targets(boxes: list[BBox], config: PNetConfig):
    """Per-cell targets for LR boxes: objectness, (dx, dy, log w/cell, log h/cell), positive mask.

    A cell is positive iff a box centre falls in it; if several do, the largest box wins.
    """
    g, c = config.grid, config.cell
    obj = np.zeros((g, g), np.float32)
    offsets = np.zeros((4, g, g), np.float32)
    taken = np.zeros((g, g))
    for b in boxes:
        cx, cy = b.center
        j, i = int(cx // c), int(cy // c)
        if not (0 <= i < g and 0 <= j < g) or b.area <= taken[i, j]:
            continue
        taken[i, j] = b.area
        obj[i, j] = 1
        offsets[:, i, j] = (cx / c - j, cy / c - i, math.log(max(b.w, 1e-3) / c), math.log(max(b.h, 1e-3) / c))
    return obj, offsets, obj > 0


def decode_head(head: np.ndarray, config: PNetConfig, threshold: float) -> list[BBox]:
    """Boxes (LR coordinates, clipped to the image) for cells with sigmoid(objectness) > threshold."""
    c, size, lim = config.cell, config.input_size, config.max_log_extent
    scores, _ = nn.sigmoid(head[0].astype(np.float64))
    out = []
    for i, j in zip(*np.nonzero(scores > threshold)):
        dx, dy, tw, th = (float(v) for v in head[1:, i, j])
        cx, cy = (j + dx) * c, (i + dy) * c
        w, h = c * math.exp(min(max(tw, -lim), lim)), c * math.exp(min(max(th, -lim), lim))
        box = BBox(cx - w / 2, cy - h / 2, w, h, float(scores[i, j])).clamp(size, size)
        if box.w > 0 and box.h > 0:
            out.append(box)
    return out


def propose(net: ProposalNet, lr: np.ndarray, threshold: float = 0.5) -> list[BBox]:
    """Scored LR-space proposals for one uint8 LR image."""
    head = net(normalize_crop(lr))[0]
    return decode_head(head, net.config, threshold)


def nms(boxes: list[BBox], iou_threshold: float = 0.5) -> list[BBox]:
    """Greedy NMS by descending score; ties broken by (x, y)."""
    order = sorted(boxes, key=lambda b: (-b.score, b.x, b.y))
    kept: list[BBox] = []
    for b in order:
        if all(iou(b, k) <= iou_threshold for k in kept):
            kept.append(b)
    return kept


def dihedral_image(img: np.ndarray, k: int) -> np.ndarray:
    """One of the 8 symmetries of the square (k in 0..7): bit 2 transposes,
    bit 0 mirrors columns, bit 1 mirrors rows."""
    out = img.T if k & 4 else img
    if k & 1:
        out = out[:, ::-1]
    if k & 2:
        out = out[::-1]
    return np.ascontiguousarray(out)


def dihedral_boxes(boxes: list[BBox], k: int, n: int) -> list[BBox]:
    bs = list(boxes)
    if k & 4:
        bs = [BBox(b.y, b.x, b.h, b.w, b.score) for b in bs]
    if k & 1:
        bs = [BBox(n - b.x2, b.y, b.w, b.h, b.score) for b in bs]
    if k & 2:
        bs = [BBox(b.x, n - b.y2, b.w, b.h, b.score) for b in bs]
    return bs


def shift_image(img: np.ndarray, dx: int, dy: int, fill: float = 0.0) -> np.ndarray:
    """Translates ``img`` by (dx, dy) pixels, filling uncovered pixels with ``fill``."""
    h, w = img.shape
    out = np.full_like(img, fill)
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def dihedral(img: np.ndarray, boxes: list[BBox], k: int) -> tuple[np.ndarray, list[BBox]]:
    return dihedral_image(img, k), dihedral_boxes(boxes, k, img.shape[0])


def train_proposal_net(net: ProposalNet, images: np.ndarray, boxes: list[list[BBox]], hyper: PNetHyper,
                       log: Callable[[TrainRecord], None] | None = None) -> tuple[list[TrainRecord], ProposalNet]:
    """Trains ``net`` in place on uint8 LR images with LR-space GT boxes."""
    images = np.asarray(images)
    if len(images) != len(boxes):
        raise ValueError("images and box lists differ in length")
    if len(images) == 0:
        raise ValueError("dataset is empty")
    x = normalize_crop(images)
    n_views = 8 if hyper.augment else 1
    size = net.config.input_size
    targets = [[encode_targets(dihedral_boxes(boxes[i], k, size), net.config) for k in range(n_views)]
               for i in range(len(x))]
    rng = np.random.default_rng(hyper.seed)
    state = nn.OptState()
    opt = nn.OptHyper(hyper.optimizer, lr=hyper.lr)
    records = []
    for epoch in range(hyper.epochs):
        if hyper.decay_at is not None and epoch == int(hyper.decay_at * hyper.epochs):
            opt = replace(opt, lr=opt.lr * 0.1)
        t0 = time.perf_counter()
        order = rng.permutation(len(x))
        total = 0.0
        for bi, s in enumerate(range(0, len(order), hyper.batch_size)):
            idx = np.sort(order[s:s + hyper.batch_size])
            ks = rng.integers(0, n_views, len(idx))
            xb = np.stack([dihedral_image(x[i], k) for i, k in zip(idx, ks)])
            if hyper.max_shift:
                # ink is 0 outside the image, so shifted-in pixels are background
                shifts = rng.integers(-hyper.max_shift, hyper.max_shift + 1, (len(idx), 2))
                xb = np.stack([shift_image(img, int(dx), int(dy)) for img, (dx, dy) in zip(xb, shifts)])
                tb = [encode_targets([b.translate(int(dx), int(dy)) for b in dihedral_boxes(boxes[i], k, size)],
                                     net.config) for i, k, (dx, dy) in zip(idx, ks, shifts)]
            else:
                tb = [targets[i][k] for i, k in zip(idx, ks)]
            loss, grads = net.loss_and_grads(xb, *(np.stack([t[j] for t in tb]) for j in range(3)))
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bi}")
            nn.optimizer_step(net.params, grads, state, opt)
            total += loss * len(idx)
        rec = TrainRecord(epoch, total / len(x), None, None, time.perf_counter() - t0)
        records.append(rec)
        if log:
            log(rec)
    return records, net


def save_checkpoint(net: ProposalNet, path) -> None:
    checkpoint.write_atomic(path, checkpoint.encode(MAGIC, net.config.to_dict(), net.params))


def load_checkpoint(path) -> ProposalNet:
    config, params = checkpoint.decode(Path(path).read_bytes(), MAGIC)
    try:
        cfg = PNetConfig.from_dict(config)
    except (TypeError, ValueError) as exc:
        raise checkpoint.CheckpointError(f"invalid proposal-net config in checkpoint: {exc}") from exc
    return ProposalNet(cfg, params)


# ---------------------------------------------------------------------------
# remapping, cropping, coverage


@dataclass(frozen=True)
class Crop:
    """A fixed-size UHR window. ``window`` may extend past the image (padded
    with white); ``footprint`` is its part inside the image."""

    image: np.ndarray
    window: BBox
    footprint: BBox


def tile_starts(lo: int, hi: int, size: int, overlap: int) -> list[int]:
    """Window origins covering [lo, hi): centred if it fits, else overlapping tiles
    with the last one right-aligned."""
    if hi - lo <= size:
        return [int(math.floor((lo + hi) / 2 - size / 2))]
    starts = [lo]
    while starts[-1] + size < hi:
        nxt = starts[-1] + size - overlap
        starts.append(hi - size if nxt + size >= hi else nxt)
    return starts


def cut_window(img: np.ndarray, x0: int, y0: int, size: int, fill: int = BACKGROUND) -> np.ndarray:
    h, w = img.shape
    out = np.full((size, size), fill, dtype=img.dtype)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + size, w), min(y0 + size, h)
    if sx1 > sx0 and sy1 > sy0:
        out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = img[sy0:sy1, sx0:sx1]
    return out


def proposal_regions(proposals: list[BBox], smap: ScaleMap, margin: float = 0.1) -> tuple[list[BBox], int]:
    """LR proposals -> margin-expanded, clamped, integer UHR regions; also returns the drop count."""
    regions, dropped = [], 0
    for p in proposals:
        b = smap.box_to_uhr(p)
        b = b.expand(margin * b.w, margin * b.h).clamp(smap.src_w, smap.src_h)
        x0, y0 = math.floor(b.x), math.floor(b.y)
        x1, y1 = math.ceil(b.x2), math.ceil(b.y2)
        if x1 - x0 < 4 or y1 - y0 < 4:
            dropped += 1
            continue
        regions.append(BBox.from_corners(x0, y0, x1, y1, p.score))
    return regions, dropped


def remap_and_crop(uhr: np.ndarray, proposals: list[BBox], smap: ScaleMap, crop_size: int = 400,
                   margin: float = 0.1, overlap: int = 50) -> tuple[list[Crop], int]:
    """Crops covering every mapped proposal; returns ``(crops, dropped)``."""
    regions, dropped = proposal_regions(proposals, smap, margin)
    h, w = uhr.shape
    crops = []
    for r in regions:
        for y0 in tile_starts(int(r.y), int(r.y2), crop_size, overlap):
            for x0 in tile_starts(int(r.x), int(r.x2), crop_size, overlap):
                window = BBox(x0, y0, crop_size, crop_size, r.score)
                crops.append(Crop(cut_window(uhr, x0, y0, crop_size), window, window.clamp(w, h)))
    return crops, dropped


def covered_area(box: BBox, regions: list[BBox]) -> float:
    """Exact area of ``box`` inside the union of ``regions`` (coordinate compression)."""
    clipped = [r.clamp(box.x2, box.y2) for r in regions]
    clipped = [BBox.from_corners(max(r.x, box.x), max(r.y, box.y), r.x2, r.y2) for r in clipped]
    clipped = [r for r in clipped if r.w > 0 and r.h > 0]
    if not clipped:
        return 0.0
    xs = np.unique([box.x, box.x2, *[r.x for r in clipped], *[r.x2 for r in clipped]])
    ys = np.unique([box.y, box.y2, *[r.y for r in clipped], *[r.y2 for r in clipped]])
    cover = np.zeros((len(ys) - 1, len(xs) - 1), bool)
    for r in clipped:
        i0, i1 = np.searchsorted(ys, [r.y, r.y2])
        j0, j1 = np.searchsorted(xs, [r.x, r.x2])
        cover[i0:i1, j0:j1] = True
    return float(np.sum(cover * np.outer(np.diff(ys), np.diff(xs))))


def proposal_coverage(proposals: list[BBox], gt: list[BBox], threshold: float = 0.95) -> float:
    """Fraction of GT boxes with at least ``threshold`` of their area inside the proposal union."""
    if not gt:
        return 1.0
    covered = sum(covered_area(g, proposals) >= threshold * g.area for g in gt)
    return covered / len(gt)
