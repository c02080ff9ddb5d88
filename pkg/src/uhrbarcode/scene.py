"""Synthetic UHR barcode scenes, instance masks and the on-disk dataset layout.

Layout under a dataset root::

    images/uhr/{id}.png   8-bit grayscale UHR scene
    images/lr/{id}.png    8-bit 256x256 area-averaged downscale
    masks/{id}.png        8-bit instance labels (0 = background)
    annotations.json
"""

from __future__ import annotations

import json
import math
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image
from skimage.draw import ellipse, polygon

from .geometry import BBox, apply_homography, solve_homography, warp
from .rpn import LR_SIZE, cut_window, downscale
from .symbology import Kind, Symbology, encode, random_payload, render

ANNOTATION_VERSION = 1
PLACEMENT_ATTEMPTS = 100
MIN_GAP = 3


@dataclass
class SceneConfig:
    uhr_size: tuple[int, int] = (4096, 4096)  # (W, H)
    lr_size: int = LR_SIZE
    lam: float = 3.0
    max_count: int = 10
    module_px: tuple[int, int] = (2, 4)  # inclusive range
    warp_intensity: float = 0.1
    distractors: tuple[int, int] = (0, 4)  # inclusive range
    distractor_radius: tuple[int, int] = (8, 60)
    matrix_scale: int = 4  # Matrix2D cells are this many modules wide
    kinds: tuple[str, ...] = tuple(k.value for k in Kind)
    quiet_zone_modules: int = 10
    seed: int = 0

    def __post_init__(self):
        self.uhr_size = tuple(int(v) for v in self.uhr_size)
        self.module_px = tuple(int(v) for v in self.module_px)
        self.distractors = tuple(int(v) for v in self.distractors)
        self.distractor_radius = tuple(int(v) for v in self.distractor_radius)
        self.kinds = tuple(Kind(k).value for k in self.kinds)
        self.validate()

    def validate(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not 1 <= self.max_count <= 255:
            raise ValueError(f"max_count must be in [1, 255], got {self.max_count}")
        if not 0 <= self.warp_intensity <= 0.3:
            raise ValueError(f"warp_intensity must be in [0, 0.3], got {self.warp_intensity}")
        if self.module_px[0] < 1 or self.module_px[1] < self.module_px[0]:
            raise ValueError(f"bad module_px range {self.module_px}")
        if self.distractors[0] < 0 or self.distractors[1] < self.distractors[0]:
            raise ValueError(f"bad distractor range {self.distractors}")
        if not self.kinds:
            raise ValueError("kinds is empty")

    def to_dict(self) -> dict:
        return {
            "uhr_size": list(self.uhr_size), "lr_size": self.lr_size, "lam": self.lam,
            "max_count": self.max_count, "module_px": list(self.module_px),
            "warp_intensity": self.warp_intensity, "distractors": list(self.distractors),
            "distractor_radius": list(self.distractor_radius), "matrix_scale": self.matrix_scale,
            "kinds": list(self.kinds), "quiet_zone_modules": self.quiet_zone_modules, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


@dataclass(frozen=True)
class Instance:
    instance_id: int
    bbox: BBox
    symbology: str
    payload: str

    def to_json(self) -> dict:
        return {"instance_id": self.instance_id, "bbox": self.bbox.to_list(),
                "symbology": self.symbology, "payload": self.payload}

    @classmethod
    def from_json(cls, d: dict) -> "Instance":
        return cls(int(d["instance_id"]), BBox(*d["bbox"]), d["symbology"], d["payload"])


@dataclass
class SceneAnnotation:
    image_id: str
    instances: list[Instance]
    canvas: tuple[int, int]  # UHR (W, H)
    uhr_path: str = ""
    lr_path: str = ""
    mask_path: str = ""

    @property
    def boxes(self) -> list[BBox]:
        return [i.bbox for i in self.instances]

    def to_json(self) -> dict:
        return {"id": self.image_id, "uhr_path": self.uhr_path, "lr_path": self.lr_path,
                "mask_path": self.mask_path, "instances": [i.to_json() for i in self.instances]}


@dataclass
class Scene:
    uhr: np.ndarray
    lr: np.ndarray
    mask: np.ndarray
    annotation: SceneAnnotation
    distractor_boxes: list[BBox] = field(default_factory=list)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    """Per-scene generator, so serial and parallel generation agree."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def clamped_count(rng: np.random.Generator, lam: float, max_count: int) -> int:
    return int(min(max(rng.poisson(lam), 1), max_count))


def warped_barcode(kind: Kind, payload: str, module_px: int, jitter: float, quiet: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Renders and perspective-warps one barcode.

    Returns (uint8 tile, bool instance mask). The tight box corners are jittered
    independently by up to ``jitter`` of the box extents.
    """
    img, tight = render(encode(Symbology(kind, payload)), module_px, quiet)
    corners = np.array([(tight.x, tight.y), (tight.x2, tight.y), (tight.x2, tight.y2), (tight.x, tight.y2)], float)
    indicator = np.zeros(img.shape, np.float64)
    indicator[tight.y:tight.y2, tight.x:tight.x2] = 1.0
    if jitter == 0:
        return img, indicator > 0
    scale = np.array([tight.w, tight.h], float)
    moved = corners + rng.uniform(-jitter, jitter, (4, 2)) * scale
    H = solve_homography(corners, moved)
    tile_corners = np.array([(0, 0), (img.shape[1], 0), (img.shape[1], img.shape[0]), (0, img.shape[0])], float)
    out_corners = apply_homography(H, tile_corners)
    lo = np.floor(out_corners.min(0))
    hi = np.ceil(out_corners.max(0))
    shift = np.array([[1, 0, -lo[0]], [0, 1, -lo[1]], [0, 0, 1]], float)
    H = shift @ H
    shape = (int(hi[1] - lo[1]), int(hi[0] - lo[0]))
    tile = np.clip(np.rint(warp(img, H, shape, fill=255)), 0, 255).astype(np.uint8)
    mask = warp(indicator, H, shape, fill=0) >= 0.5
    return tile, mask


def _hull(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _overlaps(box: tuple[int, int, int, int], taken: list[tuple[int, int, int, int]], gap: int) -> bool:
    x0, y0, x1, y1 = box
    return any(x0 < b[2] + gap and b[0] < x1 + gap and y0 < b[3] + gap and b[1] < y1 + gap for b in taken)


def compose_scene(cfg: SceneConfig, rng: np.random.Generator, image_id: str = "0") -> Scene:
    """One synthetic scene: Poisson-many warped barcodes, then blob distractors."""
    W, H = cfg.uhr_size
    uhr = np.full((H, W), 255, np.uint8)
    labels = np.zeros((H, W), np.uint8)
    n = clamped_count(rng, cfg.lam, cfg.max_count)
    taken: list[tuple[int, int, int, int]] = []
    instances: list[Instance] = []
    for _ in range(n):
        kind = Kind(cfg.kinds[int(rng.integers(len(cfg.kinds)))])
        payload = random_payload(kind, rng)
        module_px = int(rng.integers(cfg.module_px[0], cfg.module_px[1] + 1))
        if kind is Kind.MATRIX2D:
            module_px *= cfg.matrix_scale
        tile, mask = warped_barcode(kind, payload, module_px, cfg.warp_intensity, cfg.quiet_zone_modules, rng)
        hx0, hy0, hx1, hy1 = _hull(mask)
        bw, bh = hx1 - hx0, hy1 - hy0
        if bw > W or bh > H:
            continue
        for _attempt in range(PLACEMENT_ATTEMPTS):
            px = int(rng.integers(0, W - bw + 1))
            py = int(rng.integers(0, H - bh + 1))
            box = (px, py, px + bw, py + bh)
            if not _overlaps(box, taken, MIN_GAP):
                break
        else:
            continue
        taken.append(box)
        iid = len(instances) + 1
        ox, oy = px - hx0, py - hy0  # tile origin on the canvas
        _paste(uhr, labels, tile, mask, ox, oy, iid)
        instances.append(Instance(iid, BBox(px, py, bw, bh), kind.value, payload))
    if not instances:
        raise ValueError(f"canvas {W}x{H} is too small to place any barcode")
    distractor_boxes = _add_distractors(uhr, cfg, rng, taken)
    lr, _ = downscale(uhr, cfg.lr_size)
    ann = SceneAnnotation(image_id, instances, (W, H))
    return Scene(uhr, lr, labels, ann, distractor_boxes)


def _paste(uhr, labels, tile, mask, ox, oy, iid):
    H, W = uhr.shape
    th, tw = tile.shape
    x0, y0 = max(ox, 0), max(oy, 0)
    x1, y1 = min(ox + tw, W), min(oy + th, H)
    t = tile[y0 - oy:y1 - oy, x0 - ox:x1 - ox]
    m = mask[y0 - oy:y1 - oy, x0 - ox:x1 - ox]
    np.minimum(uhr[y0:y1, x0:x1], t, out=uhr[y0:y1, x0:x1])
    labels[y0:y1, x0:x1][m] = iid


def _add_distractors(uhr, cfg: SceneConfig, rng, taken) -> list[BBox]:
    """Black ellipses and polygons away from every barcode (label 0)."""
    H, W = uhr.shape
    count = int(rng.integers(cfg.distractors[0], cfg.distractors[1] + 1))
    placed = []
    rmin, rmax = cfg.distractor_radius
    for _ in range(count):
        for _attempt in range(PLACEMENT_ATTEMPTS):
            ry, rx = (int(v) for v in rng.integers(rmin, rmax + 1, 2))
            cy = int(rng.integers(ry, max(H - ry, ry + 1)))
            cx = int(rng.integers(rx, max(W - rx, rx + 1)))
            box = (cx - rx, cy - ry, cx + rx + 1, cy + ry + 1)
            if not _overlaps(box, taken, MIN_GAP):
                break
        else:
            continue
        if rng.random() < 0.5:
            rr, cc = ellipse(cy, cx, ry, rx, shape=uhr.shape)
        else:
            k = int(rng.integers(3, 8))
            ang = np.sort(rng.uniform(0, 2 * math.pi, k))
            rad = rng.uniform(0.4, 1.0, k)
            rr, cc = polygon(cy + ry * rad * np.sin(ang), cx + rx * rad * np.cos(ang), shape=uhr.shape)
        uhr[rr, cc] = 0
        taken.append(box)
        placed.append(BBox.from_corners(*box))
    return placed


# ---------------------------------------------------------------------------
# dataset IO


def id_width(count: int) -> int:
    return max(6, len(str(max(count - 1, 0))))


def generate_scenes(cfg: SceneConfig, count: int, start: int = 0) -> Iterator[Scene]:
    width = id_width(start + count)
    for i in range(start, start + count):
        yield compose_scene(cfg, scene_rng(cfg.seed, i), f"{i:0{width}d}")


def _save_png(path: Path, arr: np.ndarray):
    Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint8), mode="L").save(path, optimize=False)


def _load_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: expected 8-bit single-channel PNG, got mode {im.mode}")
        return np.array(im)


def write_dataset(scenes: Iterable[Scene], root, canvas: dict | None = None) -> list[SceneAnnotation]:
    """Writes images, masks and annotations.json under ``root``.

    The root is assembled in a sibling temp directory and moved into place, so
    an interrupted write leaves no partial dataset behind.
    """
    root = Path(root)
    tmp = root.with_name(root.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    try:
        for sub in ("images/uhr", "images/lr", "masks"):
            (tmp / sub).mkdir(parents=True)
        anns = []
        for sc in scenes:
            a = sc.annotation
            a.uhr_path = f"images/uhr/{a.image_id}.png"
            a.lr_path = f"images/lr/{a.image_id}.png"
            a.mask_path = f"masks/{a.image_id}.png"
            _save_png(tmp / a.uhr_path, sc.uhr)
            _save_png(tmp / a.lr_path, sc.lr)
            _save_png(tmp / a.mask_path, sc.mask)
            anns.append(a)
        if canvas is None:
            first = anns[0].canvas if anns else (0, 0)
            canvas = {"uhr": list(first), "lr": [LR_SIZE, LR_SIZE]}
        doc = {"version": ANNOTATION_VERSION, "canvas": canvas, "images": [a.to_json() for a in anns]}
        (tmp / "annotations.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        if root.exists():
            shutil.rmtree(root)
        os.replace(tmp, root)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return anns


def parse_annotations(doc: dict) -> tuple[dict, list[SceneAnnotation]]:
    if doc.get("version") != ANNOTATION_VERSION:
        raise ValueError(f"unsupported annotation version {doc.get('version')!r}")
    canvas = doc["canvas"]
    uhr = tuple(canvas.get("uhr", (0, 0)))
    anns = [SceneAnnotation(rec["id"], [Instance.from_json(i) for i in rec["instances"]], uhr,
                            rec.get("uhr_path", ""), rec.get("lr_path", ""), rec.get("mask_path", ""))
            for rec in doc["images"]]
    return canvas, anns


class Dataset(Sequence):
    """Lazily loaded dataset; indexing returns a :class:`Scene`."""

    def __init__(self, root: Path, canvas: dict, annotations: list[SceneAnnotation]):
        self.root = root
        self.canvas = canvas
        self.annotations = annotations

    def __len__(self):
        return len(self.annotations)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        a = self.annotations[i]
        return Scene(self.load(a, "uhr"), self.load(a, "lr"), self.load(a, "mask"), a)

    def load(self, ann: SceneAnnotation, which: str) -> np.ndarray:
        return _load_png(self.root / getattr(ann, f"{which}_path"))


def read_dataset(root) -> Dataset:
    root = Path(root)
    ann_path = root / "annotations.json"
    if not ann_path.is_file():
        raise FileNotFoundError(f"{ann_path} not found")
    canvas, anns = parse_annotations(json.loads(ann_path.read_text()))
    for a in anns:
        for which in ("uhr", "lr", "mask"):
            rel = getattr(a, f"{which}_path")
            if not rel or not (root / rel).is_file():
                raise FileNotFoundError(f"dataset is missing the {which} file for id {a.image_id}")
        with Image.open(root / a.uhr_path) as im, Image.open(root / a.mask_path) as mk:
            if im.size != mk.size or im.size != tuple(a.canvas):
                raise ValueError(f"image/mask extents disagree for id {a.image_id}")
    return Dataset(root, canvas, anns)


# ---------------------------------------------------------------------------
# training crops


def instance_crops(scene: Scene, size: int, rng: np.random.Generator, per_instance: int = 1,
                   negatives: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Y-Net training crops: windows containing an instance at a random offset,
    plus random windows. Returns (uint8 crops, binary masks)."""
    H, W = scene.uhr.shape
    origins = []
    for inst in scene.annotation.instances:
        b = inst.bbox
        for _ in range(per_instance):
            lo_x, hi_x = int(b.x2) - size, int(b.x)
            lo_y, hi_y = int(b.y2) - size, int(b.y)
            x0 = int(rng.integers(min(lo_x, hi_x), max(lo_x, hi_x) + 1))
            y0 = int(rng.integers(min(lo_y, hi_y), max(lo_y, hi_y) + 1))
            origins.append((x0, y0))
    for _ in range(negatives):
        origins.append((int(rng.integers(0, max(W - size, 0) + 1)), int(rng.integers(0, max(H - size, 0) + 1))))
    crops = np.stack([cut_window(scene.uhr, x, y, size) for x, y in origins]) if origins else np.zeros((0, size, size), np.uint8)
    labels = (scene.mask > 0).astype(np.uint8)
    masks = np.stack([cut_window(labels, x, y, size, fill=0) for x, y in origins]) if origins else np.zeros((0, size, size), np.uint8)
    return crops, masks

