"""Y-Net: two-branch segmentation network for barcode masks.

Left branch: 3x3 conv + 2x2 max-pool, four times, doubling channels.
Right branch: dilated 3x3 convs (stride 2 until input/16) plus a pyramid of
adaptive-average-pooled context maps, concatenated and projected by a 1x1
conv. The two branch outputs are summed, then decoded by four transposed-conv
stages with skip connections into a 1-channel sigmoid map.
"""

from __future__ import annotations

import copy
import math
import time
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint, nn
from .nn import ConvSpec

MAGIC = b"YNET"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class YNetConfig:
    input_size: int = 400
    width_multiplier: float = 1.0
    regular_base_channels: int = 64
    dilated_channels: int = 32
    dilation_schedule: tuple[int, ...] = (1, 2, 4, 8, 16)
    pyramid_bin_sizes: tuple[int, ...] = (1, 2, 5, 25)
    l2_strength: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.dilation_schedule = tuple(int(d) for d in self.dilation_schedule)
        self.pyramid_bin_sizes = tuple(int(b) for b in self.pyramid_bin_sizes)
        self.validate()

    def validate(self):
        if self.input_size % 16 or self.input_size // 16 < 5:
            raise ValueError(f"input_size must be divisible by 16 with input_size/16 >= 5, got {self.input_size}")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")
        ds = self.dilation_schedule
        if len(ds) < 4:
            raise ValueError("dilation_schedule needs at least 4 entries (four stride-2 reductions)")
        if any(b < a for a, b in zip(ds, ds[1:])) or max(ds) > 16 or min(ds) < 1:
            raise ValueError(f"dilation_schedule must be non-decreasing within [1, 16], got {ds}")
        if not self.pyramid_bin_sizes or min(self.pyramid_bin_sizes) < 1:
            raise ValueError("pyramid_bin_sizes must be positive")

    def scaled(self, channels: int) -> int:
        return max(1, int(round(channels * self.width_multiplier)))

    @property
    def ladder(self) -> list[int]:
        return [self.scaled(self.regular_base_channels * 2 ** k) for k in range(4)]

    @property
    def bottleneck(self) -> int:
        return self.input_size // 16

    @property
    def bins(self) -> list[int]:
        return [min(b, self.bottleneck) for b in self.pyramid_bin_sizes]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilation_schedule"] = list(self.dilation_schedule)
        d["pyramid_bin_sizes"] = list(self.pyramid_bin_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "YNetConfig":
        return cls(**d)


def layer_specs(cfg: YNetConfig) -> dict[str, tuple[str, ConvSpec]]:
    """Every parameterised layer: name -> ("conv" | "tconv", spec)."""
    ch = cfg.ladder
    dc = cfg.scaled(cfg.dilated_channels)
    specs: dict[str, tuple[str, ConvSpec]] = {}
    for k in range(4):
        specs[f"left{k}"] = ("conv", ConvSpec(1 if k == 0 else ch[k - 1], ch[k], (3, 3), 1, 1, 1))
    for i, d in enumerate(cfg.dilation_schedule):
        stride = 2 if i < 4 else 1
        specs[f"dil{i}"] = ("conv", ConvSpec(1 if i == 0 else dc, dc, (3, 3), stride, d, d))
    for j, _ in enumerate(cfg.bins):
        specs[f"pyr{j}"] = ("conv", ConvSpec(dc, dc, (1, 1)))
    specs["proj"] = ("conv", ConvSpec(dc * (1 + len(cfg.bins)), ch[3], (1, 1)))
    for k in (3, 2, 1, 0):
        up_in = ch[3] if k == 3 else ch[k + 1]
        specs[f"up{k}"] = ("tconv", ConvSpec(up_in, ch[k], (2, 2), 2, 1, 0))
        specs[f"dec{k}"] = ("conv", ConvSpec(2 * ch[k], ch[k], (3, 3), 1, 1, 1))
    specs["head"] = ("conv", ConvSpec(ch[0], 1, (1, 1)))
    return specs


def expected_shapes(cfg: YNetConfig) -> dict[str, tuple]:
    shapes = {}
    for name, (kind, s) in layer_specs(cfg).items():
        kh, kw = s.kernel
        w = (s.out_channels, s.in_channels, kh, kw) if kind == "conv" else (s.in_channels, s.out_channels, kh, kw)
        shapes[f"{name}.w"] = w
        shapes[f"{name}.b"] = (s.out_channels,)
    return shapes


@dataclass
class TrainRecord:
    epoch: int
    train_loss: float
    val_loss: float | None
    val_pixel_accuracy: float | None
    seconds: float


@dataclass
class TrainHyper:
    epochs: int = 50
    batch_size: int = 4
    lr: float = 1e-2
    optimizer: str = "adam"
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    stop_at_accuracy: float | None = None


class YNetModel:
    def __init__(self, config: YNetConfig, params: dict[str, np.ndarray]):
        checkpoint.audit_shapes(params, expected_shapes(config))
        self.config = config
        self.params = params
        self._specs = layer_specs(config)
        self._resample_cache: dict = {}

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "YNetModel":
        return YNetModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "YNetModel":
        return YNetModel(copy.deepcopy(self.config), {k: v.copy() for k, v in self.params.items()})

    def weight_names(self) -> list[str]:
        return sorted(k for k in self.params if k.endswith(".w"))

    # -- layers -------------------------------------------------------------

    def _layer(self, name, x, caches):
        kind, spec = self._specs[name]
        w, b = self.params[f"{name}.w"], self.params[f"{name}.b"]
        if kind == "conv":
            out, cache = nn.conv2d(x, spec, w, b)
        else:
            out, cache = nn.transposed_conv2d(x, spec, w, b)
        out, mask = nn.relu(out) if name != "head" else (out, None)
        if caches is not None:
            caches[name] = (kind, cache, mask)
        return out

    def _layer_backward(self, name, d, caches, grads):
        kind, cache, mask = caches[name]
        if mask is not None:
            d = nn.relu_backward(d, mask)
        g = nn.conv2d_backward(d, cache) if kind == "conv" else nn.transposed_conv2d_backward(d, cache)
        grads[f"{name}.w"] = g["weights"]
        grads[f"{name}.b"] = g["bias"]
        return g["input"]

    def _resample_mats(self, size, b):
        key = (size, b, np.dtype(self.dtype).str)
        if key not in self._resample_cache:
            self._resample_cache[key] = (
                nn.adaptive_pool_matrix(size, b, self.dtype),
                nn.nearest_upsample_matrix(b, size, self.dtype),
            )
        return self._resample_cache[key]

    def _forward(self, x: np.ndarray, caches: dict | None):
        cfg = self.config
        skips = []
        h = x
        for k in range(4):
            h = self._layer(f"left{k}", h, caches)
            skips.append(h)
            h, pc = nn.maxpool2d(h, 2, 2)
            if caches is not None:
                caches[f"pool{k}"] = pc
        left = h

        r = x
        for i in range(len(cfg.dilation_schedule)):
            r = self._layer(f"dil{i}", r, caches)
        parts = [r]
        for j, b in enumerate(cfg.bins):
            pool, up = self._resample_mats(r.shape[-1], b)
            p, _ = nn.separable_resample(r, pool, pool)
            p = self._layer(f"pyr{j}", p, caches)
            p, _ = nn.separable_resample(p, up, up)
            parts.append(p)
        right = self._layer("proj", np.concatenate(parts, axis=1), caches)

        h = left + right
        for k in (3, 2, 1, 0):
            h = self._layer(f"up{k}", h, caches)
            h = self._layer(f"dec{k}", np.concatenate([h, skips[k]], axis=1), caches)
        logits = self._layer("head", h, caches)
        return logits, left, right

    def _backward(self, dlogits: np.ndarray, caches: dict):
        cfg = self.config
        grads: dict[str, np.ndarray] = {}
        d = self._layer_backward("head", dlogits, caches, grads)
        dskip = {}
        for k in (0, 1, 2, 3):
            d = self._layer_backward(f"dec{k}", d, caches, grads)
            n_up = self._specs[f"up{k}"][1].out_channels
            dskip[k] = d[:, n_up:]
            d = self._layer_backward(f"up{k}", d[:, :n_up], caches, grads)
        dfused = d

        dcat = self._layer_backward("proj", dfused, caches, grads)
        dc = self._specs["dil0"][1].out_channels
        dr = dcat[:, :dc].copy()
        size = dr.shape[-1]
        for j, b in enumerate(cfg.bins):
            pool, up = self._resample_mats(size, b)
            dp = nn.separable_resample_backward(dcat[:, dc * (j + 1):dc * (j + 2)], (up, up))
            dp = self._layer_backward(f"pyr{j}", dp, caches, grads)
            dr += nn.separable_resample_backward(dp, (pool, pool))
        for i in reversed(range(len(cfg.dilation_schedule))):
            dr = self._layer_backward(f"dil{i}", dr, caches, grads)

        d = dfused
        for k in (3, 2, 1, 0):
            d = nn.maxpool2d_backward(d, caches[f"pool{k}"]) + dskip[k]
            d = self._layer_backward(f"left{k}", d, caches, grads)
        return grads, d + dr

    def _as_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (s, s):
            raise ValueError(f"Y-Net expects {s}x{s} single-channel input, got shape {x.shape}")
        return x

    def branch_outputs(self, x: np.ndarray):
        """Pre-fusion left and right branch tensors."""
        _, left, right = self._forward(self._as_batch(x), None)
        return left, right

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self._forward(self._as_batch(x), None)[0]

    def logits_with_cache(self, x: np.ndarray):
        caches: dict = {}
        logits = self._forward(self._as_batch(x), caches)[0]
        return logits, caches

    def backward(self, dlogits: np.ndarray, caches: dict):
        """Returns ``(param_grads, input_grad)``."""
        return self._backward(dlogits, caches)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return ynet_forward(self, x)

    def forward_backward(self, x: np.ndarray, target: np.ndarray):
        """Loss, parameter gradients and probabilities for a batch.

        BCE is fused with the output sigmoid: dL/dlogit = (p - t) / N.
        """
        x = self._as_batch(x)
        t = np.asarray(target, dtype=self.dtype).reshape(x.shape)
        logits, caches = self.logits_with_cache(x)
        prob, _ = nn.sigmoid(logits)
        weights = {k: self.params[k] for k in self.weight_names()}
        loss, lgrads = nn.bce_loss(prob, t, self.config.l2_strength, weights)
        grads, _ = self._backward(((prob - t) / t.size).astype(self.dtype), caches)
        for k in weights:
            grads[k] = grads[k] + lgrads[k]
        return loss, grads, prob


def build_ynet(config: YNetConfig, dtype=np.float32) -> YNetModel:
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, (kind, spec) in layer_specs(config).items():
        kh, kw = spec.kernel
        if kind == "conv":
            shape = (spec.out_channels, spec.in_channels, kh, kw)
            fan_in = spec.in_channels * kh * kw
        else:
            shape = (spec.in_channels, spec.out_channels, kh, kw)
            fan_in = spec.in_channels * kh * kw // (spec.stride * spec.stride)
        params[f"{name}.w"] = nn.he_uniform(rng, shape, max(fan_in, 1), dtype)
        params[f"{name}.b"] = np.zeros(spec.out_channels, dtype=dtype)
    return YNetModel(config, params)


def normalize_crop(gray: np.ndarray) -> np.ndarray:
    """uint8 grayscale (white paper, black ink) -> float32 ink density in [0, 1]."""
    return (1.0 - np.asarray(gray, dtype=np.float32) / 255.0).astype(np.float32)


def ynet_forward(model: YNetModel, crop: np.ndarray) -> np.ndarray:
    """Barcode probability map with the same spatial shape as ``crop``.

    ``crop`` is (H, W) or a batch (N, H, W) of normalized values.
    """
    crop = np.asarray(crop)
    prob, _ = nn.sigmoid(model.logits(crop))
    prob = prob[:, 0]
    return prob[0] if crop.ndim == 2 else prob


def pixel_accuracy(prob: np.ndarray, mask: np.ndarray) -> float:
    return float(np.mean((prob >= 0.5) == (np.asarray(mask) > 0)))


def split_indices(n: int, split, seed: int):
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(math.floor(split[1] * n))
    n_test = int(math.floor(split[2] * n))
    n_train = n - n_val - n_test
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def evaluate(model: YNetModel, crops, masks, batch_size: int = 8):
    """Mean unregularised BCE and pixel accuracy over a set of crops."""
    total_loss = 0.0
    correct = 0
    count = 0
    for s in range(0, len(crops), batch_size):
        x, t = crops[s:s + batch_size], masks[s:s + batch_size].astype(np.float32)
        prob = ynet_forward(model, x)
        loss, _ = nn.bce_loss(prob, t)
        total_loss += loss * t.size
        correct += int(np.sum((prob >= 0.5) == (t > 0)))
        count += t.size
    return total_loss / count, correct / count


def train_ynet(model: YNetModel, crops: np.ndarray, masks: np.ndarray, hyper: TrainHyper,
               log: Callable[[TrainRecord], None] | None = None):
    """Mini-batch training with BCE + L2; returns ``(records, best_model, split)``.

    The best model is chosen by validation loss, or by training loss when the
    validation split is empty.
    """
    crops = np.asarray(crops, dtype=model.dtype)
    masks = (np.asarray(masks) > 0).astype(model.dtype)
    if len(crops) == 0:
        raise ValueError("dataset is empty")
    if len(crops) != len(masks):
        raise ValueError("crops and masks differ in length")
    train_idx, val_idx, test_idx = split_indices(len(crops), hyper.split, hyper.seed)
    if len(val_idx) == 0:
        warnings.warn("validation split is empty; selecting the best model by training loss", stacklevel=2)
    rng = np.random.default_rng(hyper.seed + 1)
    state = nn.OptState()
    opt = nn.OptHyper(hyper.optimizer, lr=hyper.lr)
    records: list[TrainRecord] = []
    best = (math.inf, model.copy())
    for epoch in range(hyper.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(train_idx)
        losses, correct, seen = [], 0, 0
        for bi, s in enumerate(range(0, len(order), hyper.batch_size)):
            idx = np.sort(order[s:s + hyper.batch_size])
            loss, grads, prob = model.forward_backward(crops[idx], masks[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bi}")
            nn.optimizer_step(model.params, grads, state, opt)
            losses.append(loss * len(idx))
            correct += int(np.sum((prob[:, 0] >= 0.5) == (masks[idx] > 0)))
            seen += masks[idx].size
        train_loss = float(sum(losses) / len(order))
        val_loss = val_acc = None
        if len(val_idx):
            val_loss, val_acc = evaluate(model, crops[val_idx], masks[val_idx])
        rec = TrainRecord(epoch, train_loss, val_loss, val_acc, time.perf_counter() - t0)
        records.append(rec)
        if log:
            log(rec)
        score = val_loss if val_loss is not None else train_loss
        if score < best[0]:
            best = (score, model.copy())
        if hyper.stop_at_accuracy is not None and correct / seen >= hyper.stop_at_accuracy:
            break
    return records, best[1], (train_idx, val_idx, test_idx)


def save_checkpoint(model: YNetModel, path) -> None:
    checkpoint.write_atomic(path, checkpoint.encode(MAGIC, model.config.to_dict(), model.params))


def load_checkpoint(path) -> YNetModel:
    blob = Path(path).read_bytes()
    config, params = checkpoint.decode(blob, MAGIC)
    try:
        cfg = YNetConfig.from_dict(config)
    except (TypeError, ValueError) as exc:
        raise checkpoint.CheckpointError(f"invalid Y-Net config in checkpoint: {exc}") from exc
    checkpoint.audit_shapes(params, expected_shapes(cfg))
    return YNetModel(cfg, params)
