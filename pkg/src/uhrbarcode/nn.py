"""Dense-tensor layers with explicit forward/backward passes.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout. Every layer is a
pair of pure functions: ``layer(...) -> (out, cache)`` and
``layer_backward(dout, cache) -> grads``. Nothing here keeps global state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import as_strided

BCE_EPS = 1e-7


class NonFiniteGradient(ValueError):
    """Raised when an optimizer step sees NaN or inf in a gradient."""


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError("stride/dilation must be >= 1 and padding >= 0")

    @property
    def effective_kernel(self) -> tuple[int, int]:
        kh, kw = self.kernel
        return (kh - 1) * self.dilation + 1, (kw - 1) * self.dilation + 1

    def conv_output_size(self, h: int, w: int) -> tuple[int, int]:
        ekh, ekw = self.effective_kernel
        p, s = self.padding, self.stride
        return (h + 2 * p - ekh) // s + 1, (w + 2 * p - ekw) // s + 1

    def transposed_output_size(self, h: int, w: int) -> tuple[int, int]:
        ekh, ekw = self.effective_kernel
        p, s = self.padding, self.stride
        return (h - 1) * s - 2 * p + ekh, (w - 1) * s - 2 * p + ekw


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# convolution helpers

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Gathers a padded (N, C, H, W) input into (C, kh, kw, N, Ho, Wo) columns."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            cols[:, i, j] = xt[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride]
    return cols


def _col2im(cols: np.ndarray, out_shape, stride: int, dilation: int) -> np.ndarray:
    """Scatter-add (C, kh, kw, N, Ho, Wo) columns into a (N, C, H, W) array."""
    c, kh, kw, n, ho, wo = cols.shape
    out = np.zeros(out_shape, dtype=cols.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            out[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride] += (
                cols[:, i, j].transpose(1, 0, 2, 3)
            )
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: np.ndarray, spec: ConvSpec, weights: np.ndarray, bias: np.ndarray | None):
    """2-D cross-correlation with stride, dilation and zero padding.

    ``weights`` has shape (out_c, in_c, kh, kw). Returns ``(out, cache)``.
    """
    kh, kw = spec.kernel
    if x.ndim != 4:
        raise ValueError(f"input must be 4-D (N, C, H, W), got ndim={x.ndim}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"in_channels mismatch: input has {x.shape[1]}, spec expects {spec.in_channels}")
    expected = (spec.out_channels, spec.in_channels, kh, kw)
    if tuple(weights.shape) != expected:
        raise ValueError(f"weights shape mismatch: got {tuple(weights.shape)}, expected {expected}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ValueError(f"bias length mismatch: got {bias.shape}, expected ({spec.out_channels},)")
    n, _, h, w = x.shape
    ekh, ekw = spec.effective_kernel
    if ekh > h + 2 * spec.padding:
        raise ValueError(f"height: effective kernel {ekh} exceeds padded input {h + 2 * spec.padding}")
    if ekw > w + 2 * spec.padding:
        raise ValueError(f"width: effective kernel {ekw} exceeds padded input {w + 2 * spec.padding}")
    ho, wo = spec.conv_output_size(h, w)
    xp = _pad(x, spec.padding)
    cols = _im2col(xp, kh, kw, spec.stride, spec.dilation, ho, wo)
    out = (weights.reshape(spec.out_channels, -1) @ cols.reshape(-1, n * ho * wo)).reshape(-1, n, ho, wo)
    out = out.transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out, dtype=np.result_type(x, weights))
    return out, (xp, x.shape, spec, weights, bias is not None)


def conv2d_backward(dout: np.ndarray, cache):
    """Returns ``{"input", "weights", "bias"}`` gradients for :func:`conv2d`."""
    xp, x_shape, spec, weights, has_bias = cache
    kh, kw = spec.kernel
    n, c, h, w = x_shape
    ho, wo = dout.shape[2:]
    cols = _im2col(xp, kh, kw, spec.stride, spec.dilation, ho, wo).reshape(c * kh * kw, -1)
    d2 = np.ascontiguousarray(dout.transpose(1, 0, 2, 3)).reshape(spec.out_channels, -1)
    dw = (d2 @ cols.T).reshape(weights.shape)
    dcols = (weights.reshape(spec.out_channels, -1).T @ d2).reshape(c, kh, kw, n, ho, wo)
    dxp = _col2im(dcols, xp.shape, spec.stride, spec.dilation)
    p = spec.padding
    dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
    grads = {"input": np.ascontiguousarray(dx), "weights": dw.astype(weights.dtype, copy=False)}
    grads["bias"] = dout.sum(axis=(0, 2, 3)) if has_bias else None
    return grads


def transposed_conv2d(x: np.ndarray, spec: ConvSpec, weights: np.ndarray, bias: np.ndarray | None):
    """Adjoint of :func:`conv2d` (a.k.a. fractionally-strided convolution).

    ``weights`` has shape (in_c, out_c, kh, kw): the weights of the forward
    convolution mapping out_c -> in_c whose input-gradient this computes.
    """
    kh, kw = spec.kernel
    if x.ndim != 4:
        raise ValueError(f"input must be 4-D (N, C, H, W), got ndim={x.ndim}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"in_channels mismatch: input has {x.shape[1]}, spec expects {spec.in_channels}")
    expected = (spec.in_channels, spec.out_channels, kh, kw)
    if tuple(weights.shape) != expected:
        raise ValueError(f"weights shape mismatch: got {tuple(weights.shape)}, expected {expected}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ValueError(f"bias length mismatch: got {bias.shape}, expected ({spec.out_channels},)")
    n, _, h, w = x.shape
    oh, ow = spec.transposed_output_size(h, w)
    if oh < 1 or ow < 1:
        raise ValueError(f"transposed output extent ({oh}, {ow}) is empty")
    p = spec.padding
    x2 = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(spec.in_channels, -1)
    dcols = (weights.reshape(spec.in_channels, -1).T @ x2).reshape(spec.out_channels, kh, kw, n, h, w)
    outp = _col2im(dcols, (n, spec.out_channels, oh + 2 * p, ow + 2 * p), spec.stride, spec.dilation)
    out = outp[:, :, p:p + oh, p:p + ow] if p else outp
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out, dtype=np.result_type(x, weights))
    return out, (x, spec, weights, bias is not None)


def transposed_conv2d_backward(dout: np.ndarray, cache):
    x, spec, weights, has_bias = cache
    kh, kw = spec.kernel
    h, w = x.shape[2:]
    n = x.shape[0]
    doutp = _pad(dout, spec.padding)
    cols = _im2col(doutp, kh, kw, spec.stride, spec.dilation, h, w).reshape(-1, n * h * w)
    w2 = weights.reshape(spec.in_channels, -1)
    dx = (w2 @ cols).reshape(spec.in_channels, n, h, w).transpose(1, 0, 2, 3)
    x2 = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(spec.in_channels, -1)
    dw = (x2 @ cols.T).reshape(weights.shape)
    return {
        "input": np.ascontiguousarray(dx),
        "weights": dw.astype(weights.dtype, copy=False),
        "bias": dout.sum(axis=(0, 2, 3)) if has_bias else None,
    }


# ---------------------------------------------------------------------------
# pooling / resampling

def maxpool2d(x: np.ndarray, window: int, stride: int | None = None):
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise ValueError(f"input must be 4-D (N, C, H, W), got ndim={x.ndim}")
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ValueError(f"pool window {window} larger than input extent ({h}, {w})")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    sn, sc, sh, sw = x.strides
    view = as_strided(x, shape=(n, c, ho, wo, window, window),
                      strides=(sn, sc, sh * stride, sw * stride, sh, sw), writeable=False)
    flat = view.reshape(n, c, ho, wo, window * window)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, x.dtype, window, stride, idx)


def maxpool2d_backward(dout: np.ndarray, cache) -> np.ndarray:
    shape, dtype, window, stride, idx = cache
    n, c, h, w = shape
    ho, wo = idx.shape[2:]
    dx = np.zeros(shape, dtype=dout.dtype)
    if window == stride:
        buf = np.zeros((n, c, ho, wo, window * window), dtype=dout.dtype)
        np.put_along_axis(buf, idx[..., None], dout[..., None], axis=-1)
        buf = buf.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
        dx[:, :, :ho * window, :wo * window] = buf.reshape(n, c, ho * window, wo * window)
        return dx
    rows = (np.arange(ho) * stride)[None, None, :, None] + idx // window
    cols = (np.arange(wo) * stride)[None, None, None, :] + idx % window
    nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    np.add.at(dx, (nn_[..., None, None], cc[..., None, None], rows, cols), dout)
    return dx


def adaptive_pool_matrix(size: int, bins: int, dtype=np.float32) -> np.ndarray:
    """Row i averages input cells [floor(i*size/bins), ceil((i+1)*size/bins))."""
    m = np.zeros((bins, size), dtype=dtype)
    for i in range(bins):
        lo = (i * size) // bins
        hi = -((-(i + 1) * size) // bins)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def nearest_upsample_matrix(bins: int, size: int, dtype=np.float32) -> np.ndarray:
    m = np.zeros((size, bins), dtype=dtype)
    m[np.arange(size), (np.arange(size) * bins) // size] = 1.0
    return m


def separable_resample(x: np.ndarray, rows: np.ndarray, cols: np.ndarray):
    """Applies ``rows @ X @ cols.T`` to every (n, c) plane."""
    out = np.einsum("ih,nchw,jw->ncij", rows, x, cols, optimize=True)
    return out.astype(x.dtype, copy=False), (rows, cols)


def separable_resample_backward(dout: np.ndarray, cache) -> np.ndarray:
    rows, cols = cache
    return np.einsum("ih,ncij,jw->nchw", rows, dout, cols, optimize=True).astype(dout.dtype, copy=False)


# ---------------------------------------------------------------------------
# activations and loss

def relu(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask) -> np.ndarray:
    return dout * mask


def sigmoid(x: np.ndarray):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def sigmoid_backward(dout: np.ndarray, out) -> np.ndarray:
    return dout * out * (1.0 - out)


_ACTIVATIONS = {"relu": (relu, relu_backward), "sigmoid": (sigmoid, sigmoid_backward)}


def activation(x: np.ndarray, kind: str):
    try:
        fwd, _ = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    out, cache = fwd(x)
    return out, (kind, cache)


def activation_backward(dout: np.ndarray, cache) -> np.ndarray:
    kind, inner = cache
    return _ACTIVATIONS[kind][1](dout, inner)


def bce_loss(pred: np.ndarray, target: np.ndarray, l2_strength: float = 0.0,
             params: Mapping[str, np.ndarray] | None = None):
    """Mean binary cross-entropy plus ``l2_strength * sum ||w||^2``.

    Returns ``(loss, grads)`` where ``grads["pred"]`` is dL/dpred and every
    name in ``params`` maps to its L2 gradient.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    p = np.clip(pred.astype(np.float64), BCE_EPS, 1.0 - BCE_EPS)
    t = target.astype(np.float64)
    n = p.size
    loss = float(-np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p)))
    grads: dict[str, np.ndarray] = {"pred": ((p - t) / (p * (1.0 - p)) / n).astype(pred.dtype)}
    if params:
        for name, w in params.items():
            loss += l2_strength * float(np.sum(w.astype(np.float64) ** 2))
            grads[name] = (2.0 * l2_strength) * w
    return loss, grads


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class OptState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass(frozen=True)
class OptHyper:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def optimizer_step(params: dict, grads: Mapping[str, np.ndarray], state: OptState, hyper: OptHyper) -> OptState:
    """Updates ``params`` in place and returns the advanced state.

    The whole step is rejected (nothing modified) if any gradient is
    non-finite.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name!r}")
    state.step += 1
    t = state.step
    for name in sorted(grads):
        w = params[name]
        g = grads[name]
        if hyper.weight_decay:
            g = g + hyper.weight_decay * w
        if hyper.kind == "sgd":
            w -= (hyper.lr * g).astype(w.dtype, copy=False)
        elif hyper.kind == "adam":
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = np.zeros_like(w)
                state.v[name] = np.zeros_like(w)
            v = state.v[name]
            m *= hyper.beta1
            m += (1.0 - hyper.beta1) * g
            v *= hyper.beta2
            v += (1.0 - hyper.beta2) * (g * g)
            mhat = m / (1.0 - hyper.beta1 ** t)
            vhat = v / (1.0 - hyper.beta2 ** t)
            w -= (hyper.lr * mhat / (np.sqrt(vhat) + hyper.eps)).astype(w.dtype, copy=False)
        else:
            raise ValueError(f"unknown optimizer {hyper.kind!r}")
    return state


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(forward: Callable, backward: Callable, inputs: Mapping[str, np.ndarray],
               eps: float = 1e-6, seed: int = 0, max_checks: int | None = None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``forward(**inputs) -> (out, cache)`` and ``backward(dout, cache) ->
    {name: grad}``. The scalar probe is ``sum(out * R)`` for a fixed random
    ``R``. Relative error is per input: ``||a - n|| / max(||a||, ||n||)``.
    ``max_checks`` samples that many coordinates per input instead of all.
    """
    rng = np.random.default_rng(seed)
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    out, cache = forward(**inputs)
    probe = rng.standard_normal(np.shape(out))
    analytic = backward(probe, cache)

    def scalar(**kw):
        o, _ = forward(**kw)
        return float(np.sum(o * probe))

    worst = 0.0
    for name, x in inputs.items():
        a = analytic.get(name)
        if a is None:
            continue
        flat_idx = np.arange(x.size)
        if max_checks is not None and x.size > max_checks:
            flat_idx = rng.choice(x.size, size=max_checks, replace=False)
        num = np.empty(len(flat_idx))
        for k, i in enumerate(flat_idx):
            pos = np.unravel_index(i, x.shape)
            orig = x[pos]
            x[pos] = orig + eps
            fp = scalar(**inputs)
            x[pos] = orig - eps
            fm = scalar(**inputs)
            x[pos] = orig
            num[k] = (fp - fm) / (2 * eps)
        ana = np.asarray(a, dtype=np.float64).reshape(-1)[flat_idx]
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12)
        worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    return worst
