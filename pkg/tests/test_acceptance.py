"""Acceptance criteria, one test per numbered criterion.

The training-based criteria use the desk profile: 2048x2048 canvases with
1-2 px modules, which gives the same 256x256 thumbnails (barcode size relative
to the canvas) as the default 4096 canvas with 2-4 px modules at a quarter of
the pixels. A PASS/FAIL summary line per criterion is printed at the end of
the run.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from uhrbarcode import nn, rpn, ynet
from uhrbarcode.cli import main
from uhrbarcode.geometry import BBox, iou
from uhrbarcode.metrics import Detection, detection_rate, evaluate_detections, match, match_and_ap
from uhrbarcode.metrics import IOU_THRESHOLDS
from uhrbarcode.nn import ConvSpec
from uhrbarcode.pipeline import Pipeline, PipelineConfig, run_pipeline
from uhrbarcode.postproc import extract_boxes
from uhrbarcode.scene import SceneConfig, compose_scene, instance_crops, scene_rng
from uhrbarcode.symbology import ONE_D, Kind, check_digit, encode, random_payload, render, Symbology

from oracles import brute_force_ap
from scanline import scan_decode

DESK = SceneConfig(uhr_size=(2048, 2048), module_px=(1, 2))
TRAIN_SEED, HELDOUT_SEED = 0, 1
N_TRAIN, N_HELDOUT = 200, 100

PNET_CONFIG = rpn.PNetConfig(channels=(16, 32, 64, 128), pos_weight=4.0)
PNET_HYPER = rpn.PNetHyper(epochs=150, lr=3e-3, batch_size=8, max_shift=8)

# segmentation converges within a few epochs, so Y-Net sees crops from the first 60 training scenes
YNET_CROP = 400
YNET_SCENES = 60
YNET_CONFIG = ynet.YNetConfig(input_size=YNET_CROP, width_multiplier=1 / 8)
YNET_HYPER = ynet.TrainHyper(epochs=3, batch_size=8, lr=3e-3)


# ---------------------------------------------------------------------------
# shared trained models


@pytest.fixture(scope="session")
def trained_pnet(tmp_path_factory):
    smap = rpn.scale_map(*DESK.uhr_size)
    images, boxes = [], []
    for i in range(N_TRAIN):
        s = compose_scene(DESK, scene_rng(TRAIN_SEED, i))
        images.append(s.lr)
        boxes.append([smap.box_to_lr(b) for b in s.annotation.boxes])
    _, net = rpn.train_proposal_net(rpn.build_proposal_net(PNET_CONFIG), np.stack(images), boxes, PNET_HYPER)
    path = tmp_path_factory.mktemp("models") / "proposal.pnet"
    rpn.save_checkpoint(net, path)
    return net, path


@pytest.fixture(scope="session")
def trained_ynet(tmp_path_factory):
    crops, masks = [], []
    for i in range(YNET_SCENES):
        s = compose_scene(DESK, scene_rng(TRAIN_SEED, i))
        c, m = instance_crops(s, YNET_CROP, scene_rng(TRAIN_SEED + 100, i), per_instance=1, negatives=1)
        crops.append(c)
        masks.append(m)
    _, best, _ = ynet.train_ynet(ynet.build_ynet(YNET_CONFIG), ynet.normalize_crop(np.concatenate(crops)),
                                 np.concatenate(masks), YNET_HYPER)
    path = tmp_path_factory.mktemp("models") / "segmenter.ynet"
    ynet.save_checkpoint(best, path)
    return best, path


def heldout_scenes():
    for i in range(N_HELDOUT):
        yield compose_scene(DESK, scene_rng(HELDOUT_SEED, i), f"{i:06d}")


# ---------------------------------------------------------------------------
# 1. gradient suite


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _conv_case(spec, shape):
    def build(rng):
        x = _rand(rng, *shape)
        w = _rand(rng, spec.out_channels, spec.in_channels, *spec.kernel)
        return (lambda x, w, b: nn.conv2d(x, spec, w, b),
                lambda d, c: {"x": (g := nn.conv2d_backward(d, c))["input"], "w": g["weights"], "b": g["bias"]},
                {"x": x, "w": w, "b": _rand(rng, spec.out_channels)})
    return build


def _tconv_case(spec, shape):
    def build(rng):
        w = _rand(rng, spec.in_channels, spec.out_channels, *spec.kernel)
        return (lambda x, w, b: nn.transposed_conv2d(x, spec, w, b),
                lambda d, c: {"x": (g := nn.transposed_conv2d_backward(d, c))["input"], "w": g["weights"],
                              "b": g["bias"]},
                {"x": _rand(rng, *shape), "w": w, "b": _rand(rng, spec.out_channels)})
    return build


def _maxpool_case(window, stride):
    def build(rng):
        # distinct values keep every window's argmax away from a tie
        x = rng.permutation(2 * 2 * 7 * 7).reshape(2, 2, 7, 7) * 0.1
        return (lambda x: nn.maxpool2d(x, window, stride), lambda d, c: {"x": nn.maxpool2d_backward(d, c)}, {"x": x})
    return build


def _activation_case(kind):
    def build(rng):
        x = _rand(rng, 2, 3, 5, 5)
        x += np.sign(x) * 0.01  # off the ReLU hinge
        return (lambda x: nn.activation(x, kind), lambda d, c: {"x": nn.activation_backward(d, c)}, {"x": x})
    return build


def _resample_case(src, dst, pool):
    def build(rng):
        m = nn.adaptive_pool_matrix(src, dst, np.float64) if pool else nn.nearest_upsample_matrix(src, dst, np.float64)
        return (lambda x: nn.separable_resample(x, m, m), lambda d, c: {"x": nn.separable_resample_backward(d, c)},
                {"x": _rand(rng, 1, 2, src, src)})
    return build


def _bce_case(rng):
    t = (rng.random((3, 4)) > 0.5).astype(float)
    w = _rand(rng, 5)

    def forward(pred, w):
        loss, grads = nn.bce_loss(pred, t, 0.1, {"w": w})
        return np.array(loss), grads

    return (forward, lambda d, g: {"pred": d * g["pred"], "w": d * g["w"]},
            {"pred": rng.uniform(0.05, 0.95, (3, 4)), "w": w})


GRAD_CASES = {
    "conv2d": _conv_case(ConvSpec(2, 3, (3, 3), 1, 1, 1), (2, 2, 8, 8)),
    "conv2d_dilated": _conv_case(ConvSpec(2, 3, (3, 3), 1, 4, 4), (1, 2, 9, 9)),
    "conv2d_strided_dilated": _conv_case(ConvSpec(2, 2, (3, 3), 2, 2, 2), (2, 2, 10, 10)),
    "conv2d_1x1": _conv_case(ConvSpec(3, 2, (1, 1)), (1, 3, 4, 4)),
    "transposed_conv2d": _tconv_case(ConvSpec(3, 2, (2, 2), 2), (2, 3, 4, 5)),
    "maxpool2d": _maxpool_case(2, 2),
    "maxpool2d_overlapping": _maxpool_case(3, 2),
    "relu": _activation_case("relu"),
    "sigmoid": _activation_case("sigmoid"),
    "adaptive_pool": _resample_case(25, 5, True),
    "nearest_upsample": _resample_case(5, 25, False),
    "bce_l2": _bce_case,
}


@pytest.mark.acceptance(1, "gradient suite")
def test_gradient_suite(record_property):
    t0 = time.perf_counter()
    worst = {}
    for name, build in GRAD_CASES.items():
        for seed in range(10):
            forward, backward, inputs = build(np.random.default_rng(seed))
            assert all(v.dtype == np.float64 for v in inputs.values())
            err = nn.grad_check(forward, backward, inputs, eps=1e-6, seed=seed)
            worst[name] = max(worst.get(name, 0.0), err)
    seconds = time.perf_counter() - t0
    record_property("max_rel_err", f"{max(worst.values()):.2e}")
    record_property("seconds", f"{seconds:.1f}")
    failing = {k: v for k, v in worst.items() if not v < 1e-4}
    assert not failing, failing
    assert seconds < 120


# ---------------------------------------------------------------------------
# 2. architecture audit


@pytest.mark.acceptance(2, "architecture audit")
def test_architecture_audit(record_property):
    rng = np.random.default_rng(0)
    for size in (112, 208, 400):
        for mult in (1 / 8, 1 / 4):
            model = ynet.build_ynet(ynet.YNetConfig(input_size=size, width_multiplier=mult))
            x = rng.random((size, size)).astype(np.float32)
            assert ynet.ynet_forward(model, x).shape == (size, size)
            left, right = model.branch_outputs(x)
            assert left.shape == right.shape == (1, model.config.ladder[3], size // 16, size // 16)

    cfg = ynet.YNetConfig()
    model = ynet.build_ynet(cfg)
    specs = ynet.layer_specs(cfg)
    h = np.zeros((1, 1, 400, 400), np.float32)
    ladder = []
    for k in range(4):
        _, spec = specs[f"left{k}"]
        h, _ = nn.conv2d(h, spec, model.params[f"left{k}.w"], model.params[f"left{k}.b"])
        h, _ = nn.maxpool2d(h, 2, 2)
        ladder.append((h.shape[1], h.shape[2], h.shape[3]))
    record_property("ladder", ladder)
    assert ladder == [(64, 200, 200), (128, 100, 100), (256, 50, 50), (512, 25, 25)]


# ---------------------------------------------------------------------------
# 3. overfit check


def overfit_crops(n=8, size=112):
    cfg = SceneConfig(uhr_size=(512, 512), module_px=(1, 2), lam=2)
    crops, masks = [], []
    i = 0
    while len(crops) < n:
        c, m = instance_crops(compose_scene(cfg, scene_rng(11, i)), size, scene_rng(12, i))
        crops += list(c)
        masks += list(m)
        i += 1
    return np.stack(crops[:n]), np.stack(masks[:n])


@pytest.mark.acceptance(3, "overfit check")
def test_overfit(record_property):
    crops, masks = overfit_crops()
    x = ynet.normalize_crop(crops)
    model = ynet.build_ynet(ynet.YNetConfig(input_size=112, width_multiplier=1 / 8))
    hyper = ynet.TrainHyper(epochs=500, batch_size=4, lr=3e-3, split=(1.0, 0.0, 0.0), stop_at_accuracy=0.99)
    t0 = time.perf_counter()
    with pytest.warns(UserWarning, match="validation split is empty"):
        records, best, _ = ynet.train_ynet(model, x, masks, hyper)
    seconds = time.perf_counter() - t0
    _, acc = ynet.evaluate(best, x, masks)
    record_property("epochs", len(records))
    record_property("pixel_accuracy", f"{acc:.4f}")
    assert len(records) <= 500
    assert acc >= 0.98
    assert seconds < 30 * 60


# ---------------------------------------------------------------------------
# 4. encoder oracle


def summation_check_digit(digits):
    """Weights 3,1,3,1... from the rightmost data digit, modulo 10."""
    total = sum(int(d) * (3 if i % 2 == 0 else 1) for i, d in enumerate(reversed(digits)))
    return (10 - total % 10) % 10


@pytest.mark.acceptance(4, "encoder oracle")
def test_encoder_oracle(record_property):
    rng = np.random.default_rng(4)
    decoded = {}
    for kind in ONE_D:
        ok = 0
        for _ in range(100):
            payload = random_payload(kind, rng)
            img, _ = render(encode(Symbology(kind, payload)), int(rng.integers(1, 4)))
            got = scan_decode(img, kind)
            if kind in (Kind.EAN13, Kind.UPCA):
                ok += got[:-1] == payload and int(got[-1]) == summation_check_digit(payload)
            else:
                ok += got == payload
        decoded[kind.value] = ok
    record_property("decoded", decoded)
    assert all(v == 100 for v in decoded.values()), decoded

    assert check_digit(Kind.EAN13, "400638133393") == summation_check_digit("400638133393") == 1
    assert check_digit(Kind.UPCA, "03600029145") == summation_check_digit("03600029145") == 2
    for kind, n in ((Kind.EAN13, 12), (Kind.UPCA, 11)):
        for _ in range(1000):
            digits = "".join(str(d) for d in rng.integers(0, 10, n))
            assert check_digit(kind, digits) == summation_check_digit(digits), (kind, digits)


# ---------------------------------------------------------------------------
# 5. post-processing recovery


def _gap(a, b):
    return max(b.x - a.x2, a.x - b.x2, b.y - a.y2, a.y - b.y2)


def separated_masks(count, min_gap=3):
    cfg = SceneConfig(uhr_size=(512, 512), module_px=(1, 2), lam=3, distractors=(0, 0))
    i = 0
    while count:
        s = compose_scene(cfg, scene_rng(5, i))
        i += 1
        boxes = s.annotation.boxes
        if all(_gap(a, b) >= min_gap for k, a in enumerate(boxes) for b in boxes[k + 1:]):
            count -= 1
            yield s.mask > 0, boxes


@pytest.mark.acceptance(5, "post-processing recovery")
def test_postproc_recovery(record_property):
    worst = 1.0
    n_masks = n_instances = 0
    for mask, gt in separated_masks(200):
        boxes = extract_boxes(mask.astype(np.float32))
        assert len(boxes) == len(gt)
        res = match(boxes, gt, 0.9)
        assert all(res.gt_matched)
        worst = min(worst, min(max(iou(b, g) for b in boxes) for g in gt))
        n_masks += 1
        n_instances += len(gt)
    record_property("masks", n_masks)
    record_property("instances", n_instances)
    record_property("min_iou", f"{worst:.3f}")

    rng = np.random.default_rng(5)
    for _ in range(50):
        prob = np.zeros((120, 120), np.float32)
        x0, y0 = rng.integers(5, 40, 2)
        w0, h0 = rng.integers(20, 50, 2)
        # the second rectangle overlaps the first by at least 8 px each way
        x1 = int(rng.integers(x0 + 8 - 30, x0 + w0 - 8))
        y1 = int(rng.integers(y0 + 8 - 30, y0 + h0 - 8))
        x1, y1 = max(x1, 2), max(y1, 2)
        prob[y0:y0 + h0, x0:x0 + w0] = 1
        prob[y1:y1 + 30, x1:x1 + 30] = 1
        (box,) = extract_boxes(prob)
        ys, xs = np.nonzero(prob)
        assert box == BBox.from_corners(xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)


# ---------------------------------------------------------------------------
# 6. evaluator equivalence


def random_eval_case(rng):
    n_img = int(rng.integers(1, 3))
    gts = [(f"{int(rng.integers(n_img))}", BBox(*rng.integers(0, 40, 2), *rng.integers(5, 20, 2)))
           for _ in range(int(rng.integers(1, 5)))]
    dets = []
    for _ in range(int(rng.integers(0, 7))):
        if rng.random() < 0.7:
            img, g = gts[int(rng.integers(len(gts)))]
            jit = rng.integers(-4, 5, 4)
            box = BBox(g.x + jit[0], g.y + jit[1], max(1, g.w + jit[2]), max(1, g.h + jit[3]))
        else:
            img = f"{int(rng.integers(n_img))}"
            box = BBox(*rng.integers(0, 40, 2), *rng.integers(5, 20, 2))
        dets.append(Detection(img, box.with_score(round(float(rng.random()), 1))))
    return dets, gts


@pytest.mark.acceptance(6, "evaluator equivalence")
def test_evaluator_equivalence(record_property):
    worst = 0.0
    for seed in range(50):
        dets, gts = random_eval_case(np.random.default_rng(1000 + seed))
        assert len(dets) <= 6 and len(gts) <= 4
        ours = match_and_ap(dets, gts, IOU_THRESHOLDS)["ap"]
        for t in IOU_THRESHOLDS:
            ref = brute_force_ap([(d.image_id, tuple(d.box.to_list()), d.score) for d in dets],
                                 [(i, tuple(b.to_list())) for i, b in gts], t)
            worst = max(worst, abs(ours[t] - ref))
    record_property("max_abs_diff", f"{worst:.1e}")
    assert worst <= 1e-9

    rng = np.random.default_rng(6)
    gts = [(f"{i % 4}", BBox(*rng.integers(0, 500, 2), *rng.integers(4, 200, 2))) for i in range(20)]
    rep = evaluate_detections([Detection(i, b) for i, b in gts], gts)
    assert rep.mAP == 1.0 and rep.AR90 == 1.0


# ---------------------------------------------------------------------------
# 7. proposal coverage


@pytest.mark.acceptance(7, "proposal coverage")
def test_proposal_coverage(trained_pnet, record_property):
    net, _ = trained_pnet
    smap = rpn.scale_map(*DESK.uhr_size)
    covered = total = 0
    for s in heldout_scenes():
        regions, _ = rpn.proposal_regions(rpn.nms(rpn.propose(net, s.lr, 0.5), 0.5), smap)
        gt = s.annotation.boxes
        covered += rpn.proposal_coverage(regions, gt) * len(gt)
        total += len(gt)
    coverage = covered / total
    record_property("coverage", f"{coverage:.4f}")
    record_property("gt_boxes", total)
    assert coverage >= 0.95


# ---------------------------------------------------------------------------
# 8. end-to-end latency


@pytest.fixture(scope="session")
def bench_workspace(tmp_path_factory, trained_pnet, trained_ynet):
    root = tmp_path_factory.mktemp("bench")
    assert main(["generate", "--count", "3", "--seed", "8", "--uhr-size", "4096,4096", "--out", str(root / "ds")]) == 0
    (root / "pipe.json").write_text(json.dumps({
        "pnet_checkpoint": str(trained_pnet[1]), "ynet_checkpoint": str(trained_ynet[1]), "crop_size": YNET_CROP,
    }))
    return root


@pytest.mark.acceptance(8, "end-to-end latency")
def test_latency(bench_workspace, record_property):
    out = bench_workspace / "bench.json"
    assert main(["bench", "--config", str(bench_workspace / "pipe.json"), "--data", str(bench_workspace / "ds"),
                 "--out", str(out), "--warmup", "1", "--repetitions", "1", "--stride", "350"]) == 0
    report = json.loads(out.read_text())
    assert out.with_suffix(".latency.png").is_file()
    pipe_ms = report["end_to_end"]["median_ms"]
    slide_ms = report["sliding_window"]["median_ms"]
    record_property("pipeline_ms", f"{pipe_ms:.0f}")
    record_property("sliding_ms", f"{slide_ms:.0f}")
    record_property("speedup", f"{report['speedup']:.1f}")
    assert report["crop_size"] == YNET_CROP and report["sliding_window"]["stride"] == 350
    assert report["speedup"] == pytest.approx(slide_ms / pipe_ms)
    assert report["speedup"] >= 2.0


# ---------------------------------------------------------------------------
# 9. pipeline quality


@pytest.mark.acceptance(9, "pipeline quality")
def test_pipeline_quality(trained_pnet, trained_ynet, record_property):
    pipe = Pipeline(PipelineConfig(crop_size=YNET_CROP), trained_pnet[0], trained_ynet[0])
    dets, gts, scores = {}, {}, []
    for s in heldout_scenes():
        res = run_pipeline(pipe, s.uhr, s.mask, [(i.instance_id, i.bbox) for i in s.annotation.instances])
        key = s.annotation.image_id
        dets[key] = res.detections
        gts[key] = s.annotation.boxes
        ranked = sorted(res.detections, key=lambda b: (-b.score, b.y, b.x))
        m = match(ranked, gts[key], 0.5)
        scores += [d.score for d, g in zip(ranked, m.det_to_gt) if g is not None]
    dr = detection_rate(dets, gts, 0.5)
    mean_score = float(np.mean(scores)) if scores else 0.0
    record_property("detection_rate", f"{dr['detection_rate']:.3f}")
    record_property("recall", f"{dr['recall']:.3f}")
    record_property("mean_pseudo_score", f"{mean_score:.3f}")
    assert dr["detection_rate"] >= 0.8
    assert mean_score >= 0.8


# ---------------------------------------------------------------------------
# 10. determinism


def _cli(*argv, cwd):
    env = {k: v for k, v in os.environ.items() if k != "PIPELINE_SEED"}
    proc = subprocess.run([sys.executable, "-m", "uhrbarcode", *map(str, argv)], cwd=cwd, env=env,
                          stdout=subprocess.DEVNULL, stderr=subprocess.PIPE, text=True)
    assert proc.returncode == 0, proc.stderr


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.acceptance(10, "determinism")
def test_determinism(tmp_path, record_property):
    (tmp_path / "scene.json").write_text(json.dumps({"module_px": [1, 2], "distractors": [0, 2]}))
    (tmp_path / "ynet.json").write_text(json.dumps({
        "model": {"input_size": 112, "width_multiplier": 0.125},
        "hyper": {"epochs": 2, "batch_size": 4, "seed": 3},
    }))
    (tmp_path / "pnet.json").write_text(json.dumps({"hyper": {"epochs": 2, "seed": 3, "max_shift": 4}}))
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        _cli("generate", "--count", "3", "--seed", "5", "--uhr-size", "768,768", "--config", "../scene.json",
             "--out", "ds", cwd=d)
        _cli("train", "ynet", "--data", "ds", "--config", "../ynet.json", "--out", "y.ynet", "--quiet", cwd=d)
        _cli("train", "pnet", "--data", "ds", "--config", "../pnet.json", "--out", "p.pnet", "--quiet", cwd=d)
        (d / "pipe.json").write_text(json.dumps({"ynet_checkpoint": "y.ynet", "pnet_checkpoint": "p.pnet",
                                                 "crop_size": 112, "rpn_threshold": 0.3}))
        _cli("infer", "--config", "pipe.json", "--image", "ds/images/uhr/000000.png", "--data", "ds", "--out", "det.json",
             "--dump-masks", "masks", cwd=d)
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    record_property("files", len(a))
    for group in ("ds/", "y.ynet", "p.pnet", "det.json", "masks/"):
        files = sorted(k for k in a if k.startswith(group))
        assert files, group
        assert files == sorted(k for k in b if k.startswith(group))
        assert all(a[k] == b[k] for k in files), group
