# services/nn_ops.py - Forward and vector-Jacobian products of the network primitives
import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from scipy.special import erf, expit

from services.tensor_core import freeze, require_same_shape
from utils.errors import ContractViolation, require
from utils.helpers import resolve_threads, run_parallel, split_slabs

logger = logging.getLogger()

DEPTHWISE = "depthwise"
DENSE = "dense"
POOL_MODES = ("avg", "max", "both")

# Largest double below 1 and smallest positive subnormal
_SIGMOID_CEIL = 1.0 - 2.0 ** -53
_SIGMOID_FLOOR = np.nextafter(0.0, 1.0)
_INV_SQRT_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Below this many multiply-adds a convolution stays on the calling thread
_PARALLEL_MIN_WORK = 1 << 20


@dataclass(frozen=True, eq=False)
class ConvWeights:
    """Weights of one "same" convolution.

    weight has shape (out, in_per_group, k, k); depthwise layers use one
    filter per channel (in_per_group == 1, out == in).
    """

    kind: str
    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    dilation: int = 1
    stride: int = 1

    def __post_init__(self):
        require(self.kind in (DEPTHWISE, DENSE), f"conv kind must be depthwise or dense, got {self.kind!r}")
        require(self.weight.ndim == 4, f"conv weight must be rank 4, got shape {self.weight.shape}")
        out, per_group, kh, kw = self.weight.shape
        require(kh == kw, f"conv kernel must be square, got {kh}x{kw}")
        require(kh >= 1 and kh % 2 == 1, f"conv kernel size must be odd and positive, got k={kh}")
        require(self.dilation >= 1, f"conv dilation must be >= 1, got d={self.dilation}")
        require(self.stride >= 1, f"conv stride must be >= 1, got stride={self.stride}")
        require(out >= 1 and per_group >= 1, f"conv weight has empty channel axis: {self.weight.shape}")
        if self.kind == DEPTHWISE:
            require(per_group == 1, f"depthwise conv requires in_per_group == 1, got {per_group}")
        if self.bias is not None:
            require(self.bias.shape == (out,), f"conv bias must have shape ({out},), got {self.bias.shape}")

    @property
    def kernel(self):
        return self.weight.shape[2]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.out_channels if self.kind == DEPTHWISE else self.weight.shape[1]

    @property
    def padding(self):
        return self.dilation * (self.kernel - 1) // 2


@dataclass(frozen=True, eq=False)
class ChannelAffine:
    """Per-channel scale and shift standing in for a frozen batch norm."""

    scale: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        require(
            self.scale.ndim == 1 and self.scale.shape == self.shift.shape,
            f"affine scale/shift must be matching vectors, got {self.scale.shape} and {self.shift.shape}",
        )

    @property
    def channels(self):
        return self.scale.shape[0]


@dataclass(frozen=True, eq=False)
class Vjp:
    grad_input: np.ndarray
    grad_weights: ConvWeights


def make_conv(kind, in_channels, out_channels, k, dilation=1, stride=1, bias=True):
    """Zero-initialised ConvWeights of the requested geometry."""
    require(in_channels >= 1 and out_channels >= 1, f"channel counts must be positive, got {in_channels}->{out_channels}")
    if kind == DEPTHWISE:
        require(in_channels == out_channels, f"depthwise conv requires in == out, got {in_channels}->{out_channels}")
        per_group = 1
    else:
        per_group = in_channels
    return ConvWeights(
        kind=kind,
        weight=np.zeros((out_channels, per_group, k, k)),
        bias=np.zeros(out_channels) if bias else None,
        dilation=dilation,
        stride=stride,
    )


def output_size(size, stride):
    return (size - 1) // stride + 1


def _check_conv_input(x, w):
    if x.ndim != 4:
        raise ContractViolation(f"conv input must be rank 4, got shape {x.shape}")
    if x.shape[1] != w.in_channels:
        raise ContractViolation(
            f"conv channel mismatch: input has C={x.shape[1]}, weights expect {w.in_channels}"
        )
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ContractViolation(f"conv input needs H, W >= 1, got {x.shape[2]}x{x.shape[3]}")


def _pad(x, pad):
    if pad == 0:
        return np.asarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _tap(w, i, j, h_out, w_out):
    """Slices of the padded input read by kernel tap (i, j)."""
    d, s = w.dilation, w.stride
    return (
        slice(None),
        slice(None),
        slice(d * i, d * i + s * (h_out - 1) + 1, s),
        slice(d * j, d * j + s * (w_out - 1) + 1, s),
    )


def _forward_slab(xpad, w, start, stop, h_out, w_out):
    """Output channels [start, stop).

    Every output element starts at its bias and accumulates w * x in
    (c, i, j) lexicographic order, the same order as conv2d_reference.
    """
    n = xpad.shape[0]
    k = w.kernel
    out = np.zeros((n, stop - start, h_out, w_out))
    if w.bias is not None:
        out += w.bias[start:stop][None, :, None, None]
    if w.kind == DEPTHWISE:
        for i in range(k):
            for j in range(k):
                tap = xpad[_tap(w, i, j, h_out, w_out)][:, start:stop]
                out += w.weight[start:stop, 0, i, j][None, :, None, None] * tap
        return out
    for c in range(w.weight.shape[1]):
        for i in range(k):
            for j in range(k):
                tap = xpad[_tap(w, i, j, h_out, w_out)][:, c : c + 1]
                out += w.weight[start:stop, c, i, j][None, :, None, None] * tap
    return out


def conv2d_forward(x, w: ConvWeights):
    _check_conv_input(x, w)
    h_out = output_size(x.shape[2], w.stride)
    w_out = output_size(x.shape[3], w.stride)
    xpad = _pad(x, w.padding)
    out_channels = w.out_channels

    work = x.shape[0] * out_channels * h_out * w_out * w.weight.shape[1] * w.kernel ** 2
    threads = resolve_threads()
    if threads <= 1 or out_channels < 2 or work < _PARALLEL_MIN_WORK:
        return freeze(_forward_slab(xpad, w, 0, out_channels, h_out, w_out))

    slabs = split_slabs(out_channels, threads)
    parts = run_parallel(
        lambda slab: _forward_slab(xpad, w, slab[0], slab[1], h_out, w_out), slabs
    )
    return freeze(np.concatenate(parts, axis=1))


def conv2d_reference(x, w: ConvWeights):
    """Naive direct-sum definition of conv2d_forward (scalar loops)."""
    _check_conv_input(x, w)
    n, _, height, width = x.shape
    k, d, s, pad = w.kernel, w.dilation, w.stride, w.padding
    h_out, w_out = output_size(height, s), output_size(width, s)
    out = np.zeros((n, w.out_channels, h_out, w_out))
    for b in range(n):
        for o in range(w.out_channels):
            group = [o] if w.kind == DEPTHWISE else range(w.weight.shape[1])
            for y in range(h_out):
                for xx in range(w_out):
                    acc = float(w.bias[o]) if w.bias is not None else 0.0
                    for c_index, c in enumerate(group):
                        per_group = 0 if w.kind == DEPTHWISE else c_index
                        for i in range(k):
                            for j in range(k):
                                row = y * s + d * i - pad
                                col = xx * s + d * j - pad
                                if 0 <= row < height and 0 <= col < width:
                                    value = float(x[b, c, row, col])
                                else:
                                    value = 0.0
                                acc += float(w.weight[o, per_group, i, j]) * value
                    out[b, o, y, xx] = acc
    return freeze(out)


def conv2d_vjp(x, w: ConvWeights, upstream):
    _check_conv_input(x, w)
    h_out = output_size(x.shape[2], w.stride)
    w_out = output_size(x.shape[3], w.stride)
    expected = (x.shape[0], w.out_channels, h_out, w_out)
    if upstream.shape != expected:
        raise ContractViolation(
            f"conv2d_vjp: upstream shape {tuple(upstream.shape)} does not match output shape {expected}"
        )
    pad = w.padding
    xpad = _pad(x, pad)
    grad_pad = np.zeros(xpad.shape)
    grad_weight = np.zeros(w.weight.shape)
    k = w.kernel
    for i in range(k):
        for j in range(k):
            region = _tap(w, i, j, h_out, w_out)
            tap = xpad[region]
            if w.kind == DEPTHWISE:
                grad_weight[:, 0, i, j] = np.sum(upstream * tap, axis=(0, 2, 3))
                grad_pad[region] += w.weight[:, 0, i, j][None, :, None, None] * upstream
            else:
                grad_weight[:, :, i, j] = np.einsum("nohw,nchw->oc", upstream, tap)
                grad_pad[region] += np.einsum("oc,nohw->nchw", w.weight[:, :, i, j], upstream)
    grad_bias = np.sum(upstream, axis=(0, 2, 3)) if w.bias is not None else None
    height, width = x.shape[2], x.shape[3]
    grad_input = grad_pad[:, :, pad : pad + height, pad : pad + width]
    return Vjp(
        grad_input=freeze(np.ascontiguousarray(grad_input)),
        grad_weights=replace(w, weight=grad_weight, bias=grad_bias),
    )


def channel_pool(x, mode="both"):
    if mode not in POOL_MODES:
        raise ContractViolation(f"pooling mode must be one of {POOL_MODES}, got {mode!r}")
    if x.ndim != 4 or x.shape[1] < 1:
        raise ContractViolation(f"channel_pool needs a rank-4 input with C >= 1, got shape {x.shape}")
    if mode == "avg":
        return freeze(np.mean(x, axis=1, keepdims=True))
    if mode == "max":
        return freeze(np.max(x, axis=1, keepdims=True))
    return freeze(np.concatenate([np.mean(x, axis=1, keepdims=True), np.max(x, axis=1, keepdims=True)], axis=1))


def pooled_channels(mode):
    return 2 if mode == "both" else 1


def channel_pool_vjp(x, mode, upstream):
    pooled = channel_pool(x, mode)
    require_same_shape(upstream, pooled, "channel_pool_vjp")
    channels = x.shape[1]
    grad = np.zeros(x.shape)
    avg_index = {"avg": 0, "both": 0}.get(mode)
    max_index = {"max": 0, "both": 1}.get(mode)
    if avg_index is not None:
        grad += upstream[:, avg_index : avg_index + 1] / channels
    if max_index is not None:
        # argmax returns the first maximum: ties go to the lowest channel
        winner = np.argmax(x, axis=1)[:, None]
        routed = np.zeros(x.shape)
        np.put_along_axis(routed, winner, upstream[:, max_index : max_index + 1], axis=1)
        grad += routed
    return freeze(grad)


def sigmoid(x):
    return freeze(np.clip(expit(x), _SIGMOID_FLOOR, _SIGMOID_CEIL))


def sigmoid_vjp(x, upstream):
    require_same_shape(x, upstream, "sigmoid_vjp")
    s = expit(x)
    return freeze(upstream * s * (1.0 - s))


def gelu(x):
    return freeze(0.5 * x * (1.0 + erf(x * _INV_SQRT_2)))


def gelu_vjp(x, upstream):
    require_same_shape(x, upstream, "gelu_vjp")
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return freeze(upstream * (cdf + x * pdf))


def relu(x):
    return freeze(np.maximum(x, 0.0))


def relu_vjp(x, upstream):
    require_same_shape(x, upstream, "relu_vjp")
    return freeze(upstream * (x > 0.0))


def residual_add(x, y):
    require_same_shape(x, y, "residual_add")
    return freeze(np.add(x, y))


def residual_add_vjp(upstream):
    return upstream, upstream


def elementwise_mul_vjp(a, b, upstream):
    require_same_shape(a, b, "elementwise_mul_vjp")
    require_same_shape(a, upstream, "elementwise_mul_vjp")
    return freeze(upstream * b), freeze(upstream * a)


def expand_channels(x, count):
    """Explicitly repeat a single-channel map across `count` channels."""
    if x.ndim != 4 or x.shape[1] != 1:
        raise ContractViolation(f"expand_channels needs a (N, 1, H, W) map, got shape {x.shape}")
    return freeze(np.repeat(x, count, axis=1))


def expand_channels_vjp(upstream):
    return freeze(np.sum(upstream, axis=1, keepdims=True))


def expand_spatial(x, height, width):
    """Explicitly tile a (N, C, 1, 1) descriptor to (N, C, H, W)."""
    if x.ndim != 4 or x.shape[2:] != (1, 1):
        raise ContractViolation(f"expand_spatial needs a (N, C, 1, 1) descriptor, got shape {x.shape}")
    return freeze(np.ascontiguousarray(np.broadcast_to(x, x.shape[:2] + (height, width))))


def global_avg_pool(x):
    return freeze(np.mean(x, axis=(2, 3), keepdims=True))


def global_avg_pool_vjp(x, upstream):
    expected = x.shape[:2] + (1, 1)
    if upstream.shape != expected:
        raise ContractViolation(f"global_avg_pool_vjp: upstream shape {upstream.shape}, expected {expected}")
    area = x.shape[2] * x.shape[3]
    return freeze(np.ascontiguousarray(np.broadcast_to(upstream / area, x.shape)))


def channel_affine(x, affine: ChannelAffine):
    if x.ndim != 4 or x.shape[1] != affine.channels:
        raise ContractViolation(
            f"channel_affine: input has shape {x.shape}, affine expects C={affine.channels}"
        )
    return freeze(x * affine.scale[None, :, None, None] + affine.shift[None, :, None, None])


def channel_affine_vjp(x, affine: ChannelAffine, upstream) -> Tuple[np.ndarray, ChannelAffine]:
    require_same_shape(x, upstream, "channel_affine_vjp")
    grad_input = freeze(upstream * affine.scale[None, :, None, None])
    grads = ChannelAffine(
        scale=np.sum(upstream * x, axis=(0, 2, 3)),
        shift=np.sum(upstream, axis=(0, 2, 3)),
    )
    return grad_input, grads


def softmax_branches(logits):
    """Softmax across the branch axis of equally shaped logit tensors."""
    if not logits:
        raise ContractViolation("softmax_branches needs at least one branch")
    stacked = np.stack(logits, axis=0)
    shifted = stacked - np.max(stacked, axis=0, keepdims=True)
    weights = np.exp(shifted)
    weights /= np.sum(weights, axis=0, keepdims=True)
    return [freeze(np.ascontiguousarray(weight)) for weight in weights]


def softmax_branches_vjp(weights, upstream):
    """Gradient w.r.t. the logits given the softmax outputs and their upstream."""
    dot = sum(weight * grad for weight, grad in zip(weights, upstream))
    return [freeze(weight * (grad - dot)) for weight, grad in zip(weights, upstream)]
