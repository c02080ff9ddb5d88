"""Latency benchmark: per-stage and end-to-end wall clock, plus the
exhaustive sliding-window baseline."""

from __future__ import annotations

import os
import platform
import sys
import warnings

import numpy as np

from .pipeline import STAGES, Pipeline, sliding_window


def hardware_descriptor() -> str:
    cpu = platform.processor() or platform.machine()
    return (f"{platform.system()} {platform.machine()} cpu={cpu} logical_cpus={os.cpu_count()} "
            f"python={sys.version.split()[0]} numpy={np.__version__}")


def summarize(samples_s: list[float]) -> dict:
    ms = np.asarray(samples_s, dtype=float) * 1e3
    if ms.size == 0:
        return {"median_ms": None, "p95_ms": None, "n": 0}
    return {"median_ms": float(np.median(ms)), "p95_ms": float(np.percentile(ms, 95)), "n": int(ms.size)}


def benchmark(pipeline: Pipeline, images: list[np.ndarray], repetitions: int = 1, warmup: int = 3,
              sliding_stride: int | None = 350, sliding_repetitions: int = 1) -> dict:
    """Times ``pipeline`` over ``images``; the first ``warmup`` runs are discarded.

    Stages are inclusive sub-spans of the end-to-end span, so a run whose stage
    sum exceeds its end-to-end time indicates a harness bug and is flagged.
    """
    if not images:
        raise ValueError("no images to benchmark")
    for i in range(warmup):
        pipeline(images[i % len(images)])
    samples = {k: [] for k in (*STAGES, "end_to_end")}
    per_crop, n_crops, violations = [], [], 0
    for _ in range(repetitions):
        for img in images:
            res = pipeline(img)
            for k in samples:
                samples[k].append(res.timings[k])
            if sum(res.timings[k] for k in STAGES) > res.timings["end_to_end"]:
                violations += 1
            n_crops.append(len(res.crops))
            if res.crops:
                per_crop.append(res.timings["ynet"] / len(res.crops))
    if violations:
        warnings.warn(f"stage timings exceeded end-to-end in {violations} runs", RuntimeWarning, stacklevel=2)
    report = {
        "hardware": hardware_descriptor(),
        "threads": pipeline.config.threads,
        "crop_size": pipeline.config.crop_size,
        "image_shape": list(images[0].shape),
        "images": len(images),
        "repetitions": repetitions,
        "warmup": warmup,
        "stages": {k: summarize(samples[k]) for k in STAGES},
        "ynet_per_crop": summarize(per_crop),
        "end_to_end": summarize(samples["end_to_end"]),
        "crops_per_image": {"mean": float(np.mean(n_crops)), "max": int(np.max(n_crops))},
        "accounting_violations": violations,
    }
    if sliding_stride:
        times = []
        for _ in range(sliding_repetitions):
            for img in images:
                times.append(sliding_window(pipeline, img, sliding_stride)[1])
        report["sliding_window"] = {"stride": sliding_stride, **summarize(times)}
        report["speedup"] = report["sliding_window"]["median_ms"] / report["end_to_end"]["median_ms"]
    return report
