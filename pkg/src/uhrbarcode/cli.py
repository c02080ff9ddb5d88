"""Command-line entry point: generate, train, infer, eval, bench.

Every failure exits nonzero with a single ``error: <kind>: <message>`` line on
stderr. Outputs are written atomically and JSON keys are sorted, so repeated
runs with the same inputs and seed produce identical files.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import bench as bench_mod
from . import plots, rpn, ynet
from .checkpoint import CheckpointError, write_atomic
from .geometry import BBox
from .metrics import (Detection, confusion_counts, evaluate_detections, metrics_from_counts,
                      pr_curve)
from .pipeline import Pipeline, PipelineConfig, run_pipeline
from .scene import (ANNOTATION_VERSION, SceneConfig, generate_scenes, instance_crops, parse_annotations,
                    read_dataset, scene_rng, write_dataset)

SEED_ENV = "PIPELINE_SEED"
DETECTION_SYMBOLOGY = "barcode"  # detections carry no decoded symbology


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _seed(default: int) -> int:
    """``PIPELINE_SEED`` overrides any seed given by flag or config."""
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return default
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_atomic(path, _dumps(obj).encode())


def _write_png(path: Path, arr: np.ndarray) -> None:
    tmp = path.with_name(path.name + ".tmp.png")
    Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint8), mode="L").save(tmp)
    os.replace(tmp, path)


def _load_gray(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found")
    with Image.open(path) as im:
        if im.mode not in ("L", "1", "P", "RGB", "RGBA"):
            raise ValueError(f"{path}: unsupported image mode {im.mode}")
        return np.array(im.convert("L"))


def _split_keys(d: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ValueError(f"unknown keys in {where}: {', '.join(unknown)}")


def _pair(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected W,H but got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError(f"extents must be positive, got {text!r}")
    return w, h


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> None:
    cfg_dict = _read_json(args.config) if args.config else {}
    if args.lam is not None:
        cfg_dict["lam"] = args.lam
    cfg_dict["seed"] = _seed(args.seed if args.seed is not None else int(cfg_dict.get("seed", 0)))
    if args.uhr_size:
        cfg_dict["uhr_size"] = list(args.uhr_size)
    cfg = SceneConfig.from_dict(cfg_dict)
    if args.count < 0:
        raise ValueError("--count must be >= 0")
    canvas = {"uhr": list(cfg.uhr_size), "lr": [cfg.lr_size, cfg.lr_size], "scene_config": cfg.to_dict()}
    write_dataset(generate_scenes(cfg, args.count), args.out, canvas)


# ---------------------------------------------------------------------------
# train


YNET_TRAIN_KEYS = {"model", "hyper", "per_instance", "negatives", "limit"}
PNET_TRAIN_KEYS = {"model", "hyper", "limit"}


def ynet_training_set(dataset, size: int, seed: int, per_instance: int = 1, negatives: int = 1):
    """Crops around every instance plus random windows, one seeded generator per scene."""
    crops, masks = [], []
    for i in range(len(dataset)):
        c, m = instance_crops(dataset[i], size, scene_rng(seed, i), per_instance, negatives)
        crops.append(c)
        masks.append(m)
    return np.concatenate(crops), np.concatenate(masks)


def pnet_training_set(dataset):
    """LR images and their GT boxes mapped into LR coordinates."""
    images, boxes = [], []
    for a in dataset.annotations:
        smap = rpn.scale_map(*a.canvas)
        images.append(dataset.load(a, "lr"))
        boxes.append([smap.box_to_lr(b) for b in a.boxes])
    return np.stack(images), boxes


def _log(rec) -> None:
    extra = "" if rec.val_loss is None else f" val_loss={rec.val_loss:.5f} val_acc={rec.val_pixel_accuracy:.4f}"
    print(f"epoch {rec.epoch} train_loss={rec.train_loss:.5f}{extra}", file=sys.stderr, flush=True)


def cmd_train(args) -> None:
    conf = _read_json(args.config) if args.config else {}
    dataset = read_dataset(args.data)
    limit = conf.get("limit")
    if limit is not None:
        dataset.annotations = dataset.annotations[:int(limit)]
    if len(dataset) == 0:
        raise ValueError(f"{args.data}: dataset is empty")
    seed_default = int(conf.get("hyper", {}).get("seed", 0))
    seed = _seed(seed_default)
    log = None if args.quiet else _log
    if args.net == "ynet":
        _split_keys(conf, YNET_TRAIN_KEYS, "train config")
        model_cfg = ynet.YNetConfig.from_dict({**conf.get("model", {}), "seed": seed})
        hyper = ynet.TrainHyper(**{**conf.get("hyper", {}), "seed": seed})
        crops, masks = ynet_training_set(dataset, model_cfg.input_size, seed,
                                         int(conf.get("per_instance", 1)), int(conf.get("negatives", 1)))
        _, best, _ = ynet.train_ynet(ynet.build_ynet(model_cfg), ynet.normalize_crop(crops), masks, hyper, log)
        ynet.save_checkpoint(best, args.out)
    else:
        _split_keys(conf, PNET_TRAIN_KEYS, "train config")
        model_cfg = rpn.PNetConfig.from_dict({**conf.get("model", {}), "seed": seed})
        hyper = rpn.PNetHyper(**{**conf.get("hyper", {}), "seed": seed})
        images, boxes = pnet_training_set(dataset)
        _, net = rpn.train_proposal_net(rpn.build_proposal_net(model_cfg), images, boxes, hyper, log)
        rpn.save_checkpoint(net, args.out)


# ---------------------------------------------------------------------------
# infer


def load_pipeline(config_path) -> Pipeline:
    cfg = PipelineConfig.load(config_path)
    cfg.seed = _seed(cfg.seed)
    return Pipeline.from_config(cfg)


def detection_record(image_id: str, boxes: list[BBox], uhr_path: str = "", lr_path: str = "",
                     mask_path: str = "") -> dict:
    """One ``images[]`` entry of the annotation schema, with a per-instance score."""
    return {
        "id": image_id, "uhr_path": uhr_path, "lr_path": lr_path, "mask_path": mask_path,
        "instances": [{"instance_id": i + 1, "bbox": [b.x, b.y, b.w, b.h], "symbology": DETECTION_SYMBOLOGY,
                       "payload": "", "score": b.score} for i, b in enumerate(boxes)],
    }


def _gt_for(data_dir, image_id):
    dataset = read_dataset(data_dir)
    for a in dataset.annotations:
        if a.image_id == image_id:
            return dataset.load(a, "mask"), [(i.instance_id, i.bbox) for i in a.instances]
    raise ValueError(f"image id {image_id} is not in {data_dir}")


def _dump_masks(res, shape, out_dir: Path, image_id: str) -> str:
    """Per-crop binary masks plus their windows and local boxes, and the stitched mask.

    Returns the stitched mask's file name.
    """
    tmp = out_dir.with_name(out_dir.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / image_id).mkdir(parents=True)
    try:
        crops = []
        for k, c in enumerate(res.crops):
            name = f"{image_id}/crop_{k:04d}.png"
            _write_png(tmp / name, c.mask.astype(np.uint8) * 255)
            crops.append({"mask": name, "window": c.window.to_list(), "footprint": c.footprint.to_list(),
                          "boxes": [b.to_list() for b in c.boxes]})
        _write_png(tmp / f"{image_id}.png", res.stitched_mask(shape).astype(np.uint8) * 255)
        (tmp / f"{image_id}.crops.json").write_text(_dumps({"id": image_id, "shape": list(shape), "crops": crops}))
        out_dir.mkdir(parents=True, exist_ok=True)
        for entry in sorted(tmp.iterdir()):
            dest = out_dir / entry.name
            if dest.is_dir():
                shutil.rmtree(dest)
            os.replace(entry, dest)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    return f"{image_id}.png"


def _relative(path, start) -> str:
    """``path`` relative to ``start``, as annotation files store paths."""
    return Path(os.path.relpath(os.path.abspath(path), os.path.abspath(start))).as_posix()


def cmd_infer(args) -> None:
    pipeline = load_pipeline(args.config)
    uhr = _load_gray(args.image)
    image_id = args.id or Path(args.image).stem
    if args.data:
        labels, instances = _gt_for(args.data, image_id)
        res = run_pipeline(pipeline, uhr, labels, instances)
    else:
        res = run_pipeline(pipeline, uhr)
    out = Path(args.out)
    mask_path = ""
    if args.dump_masks:
        dump = Path(args.dump_masks)
        mask_path = _relative(dump / _dump_masks(res, uhr.shape, dump, image_id), out.parent)
    h, w = uhr.shape
    doc = {
        "version": ANNOTATION_VERSION,
        "canvas": {"uhr": [w, h], "lr": [rpn.LR_SIZE, rpn.LR_SIZE]},
        "images": [detection_record(image_id, res.detections, _relative(args.image, out.parent), "", mask_path)],
        "proposals": len(res.proposals), "crops": len(res.crops), "dropped": res.dropped,
    }
    _write_json(out, doc)


# ---------------------------------------------------------------------------
# eval


def _load_annotations(path):
    path = Path(path)
    canvas, anns = parse_annotations(_read_json(path))
    return path.parent, anns


def _scores(doc_path) -> dict[tuple[str, int], float]:
    doc = _read_json(doc_path)
    return {(rec["id"], int(i["instance_id"])): float(i.get("score", 1.0))
            for rec in doc["images"] for i in rec["instances"]}


def evaluate_files(gt_path, dets_path) -> tuple[dict, dict]:
    """Returns (metrics dict, PR curves at IoU .50 and .75)."""
    gt_root, gt_anns = _load_annotations(gt_path)
    det_root, det_anns = _load_annotations(dets_path)
    scores = _scores(dets_path)
    gts = [(a.image_id, i.bbox) for a in gt_anns for i in a.instances]
    dets = [Detection(a.image_id, i.bbox.with_score(scores[(a.image_id, i.instance_id)]))
            for a in det_anns for i in a.instances]
    unknown = sorted({a.image_id for a in det_anns} - {a.image_id for a in gt_anns})
    if unknown:
        raise ValueError(f"detections reference image ids missing from the GT: {', '.join(unknown[:5])}")
    report = evaluate_detections(dets, gts)
    gt_by = {a.image_id: a for a in gt_anns}
    counts, n_px = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}, 0
    for a in det_anns:
        g = gt_by[a.image_id]
        if a.mask_path and g.mask_path:
            pred = _load_gray(det_root / a.mask_path)
            gt = _load_gray(gt_root / g.mask_path)
            for k, v in confusion_counts(pred, gt).items():
                counts[k] += v
            n_px += 1
    if n_px:
        report.pixel = {**metrics_from_counts(counts), "images": n_px}
    curves = {}
    for t in (0.5, 0.75):
        recall, precision, _ = pr_curve(dets, gts, t)
        curves[f"IoU {t:.2f}"] = (recall, precision)
    out = report.to_dict()
    out["images"] = len(gt_anns)
    out["gt_instances"] = len(gts)
    out["detections"] = len(dets)
    return out, curves


def cmd_eval(args) -> None:
    metrics, curves = evaluate_files(args.gt, args.dets)
    out = Path(args.out)
    _write_json(out, metrics)
    if not args.no_plots:
        plots.pr_figure(curves, out.with_suffix(".pr.png"))


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args) -> None:
    pipeline = load_pipeline(args.config)
    pipeline.config.threads = 1  # stable timings: one dedicated thread
    dataset = read_dataset(args.data)
    anns = dataset.annotations[:args.limit] if args.limit else dataset.annotations
    images = [dataset.load(a, "uhr") for a in anns]
    report = bench_mod.benchmark(pipeline, images, args.repetitions, args.warmup,
                                 args.stride if args.stride > 0 else None)
    out = Path(args.out)
    _write_json(out, report)
    if not args.no_plots:
        plots.latency_figure(report, out.with_suffix(".latency.png"))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uhrbarcode", description="UHR barcode detection pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--lambda", dest="lam", type=float, default=None, help="Poisson mean count (default 3)")
    g.add_argument("--out", required=True)
    g.add_argument("--uhr-size", type=_pair, default=None, help="W,H (default 4096,4096)")
    g.add_argument("--config", help="JSON with further scene settings")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the Y-Net or the proposal net")
    t.add_argument("net", choices=("ynet", "pnet"))
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="detect barcodes in one image")
    i.add_argument("--config", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--dump-masks", metavar="DIR")
    i.add_argument("--data", help="dataset holding the image's GT, for pseudo-scores")
    i.add_argument("--id", help="image id (default: file stem)")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score detections against GT annotations")
    e.add_argument("--gt", required=True)
    e.add_argument("--dets", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--no-plots", action="store_true")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="latency benchmark against the sliding-window baseline")
    b.add_argument("--config", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--limit", type=int, default=0)
    b.add_argument("--repetitions", type=int, default=1)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--stride", type=int, default=350, help="sliding-window stride; 0 skips the baseline")
    b.add_argument("--no-plots", action="store_true")
    b.set_defaults(func=cmd_bench)
    return p


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(f"error: usage: {_one_line(exc)}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing: {_one_line(exc)}", file=sys.stderr)
        return 1
    except CheckpointError as exc:
        print(f"error: checkpoint: {_one_line(exc)}", file=sys.stderr)
        return 1
    except (ValueError, TypeError, KeyError) as exc:
        print(f"error: invalid: {_one_line(exc)}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
