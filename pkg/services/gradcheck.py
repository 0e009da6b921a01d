# services/gradcheck.py - Central finite-difference checks of every reverse-mode rule
"""Each check builds a small f64 instance, a random upstream U and the scalar
loss L = sum(U * f(inputs)). Analytic gradients from the VJP are compared to
(L(p + eps) - L(p - eps)) / (2 eps) at sampled coordinates of every input
array, using |a - n| / max(|a|, |n|, 1). The floor of 1 makes the metric
absolute for small gradients, so the plain relative error |a - n| / max(|a|, |n|)
is also tracked over coordinates whose gradient exceeds STRICT_FLOOR.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from config import GRADCHECK_EPS, GRADCHECK_RTOL
from services import nn_ops
from services.backbone import BackboneConfig, backbone_forward, backbone_vjp, build_backbone
from services.decomposition import DecompositionPlan
from services.lsk_module import (
    BlockConfig,
    LskConfig,
    init_block_weights,
    init_lsk_weights,
    lsk_block_forward,
    lsk_block_vjp,
    lsk_forward,
    lsk_vjp,
    seeded_params,
)
from services.nn_ops import DENSE, DEPTHWISE
from services.params import flatten_params, rebuild_params
from services.tensor_core import Normal, Uniform, derive_seed, freeze, sample, seeded_fill
from utils.errors import ContractViolation, require

logger = logging.getLogger()

BACKBONE_RTOL = 1e-5
STRICT_FLOOR = 1e-3


@dataclass(frozen=True)
class GradcheckResult:
    op: str
    checked: int
    max_rel_error: float
    worst: str
    tolerance: float
    max_strict_rel_error: float = 0.0

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance

    def to_dict(self):
        return {
            "op": self.op,
            "checked": self.checked,
            "max_rel_error": self.max_rel_error,
            "max_strict_rel_error": self.max_strict_rel_error,
            "worst": self.worst,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)


def strict_relative_error(analytic, numeric, floor=STRICT_FLOOR):
    """|a - n| / max(|a|, |n|), or None when both lie at or below `floor`."""
    scale = max(abs(analytic), abs(numeric))
    if scale <= floor:
        return None
    return abs(analytic - numeric) / scale


def _coordinates(size, samples, seed):
    if samples is None or samples >= size:
        return list(range(size))
    draws = sample(samples, seed, Uniform(0.0, float(size)))
    return sorted({min(int(value), size - 1) for value in draws})


def check_gradients(
    op,
    loss: Callable[[Dict[str, np.ndarray]], float],
    inputs: Dict[str, np.ndarray],
    analytic: Dict[str, np.ndarray],
    eps=GRADCHECK_EPS,
    tolerance=GRADCHECK_RTOL,
    samples: Optional[int] = None,
    seed=0,
) -> GradcheckResult:
    """Compare `analytic` against central differences of `loss` around `inputs`."""
    worst_error, worst_name, checked = 0.0, "", 0
    worst_strict = 0.0
    for name, value in inputs.items():
        if name not in analytic or analytic[name] is None:
            raise ContractViolation(f"{op}: no analytic gradient for input {name}")
        require(analytic[name].shape == value.shape, f"{op}: gradient for {name} has shape {analytic[name].shape}, expected {value.shape}")
        flat_grad = np.asarray(analytic[name]).ravel()
        for index in _coordinates(value.size, samples, derive_seed(seed, name)):
            trial = dict(inputs)
            shifted = np.array(value, dtype=np.float64)
            flat = shifted.reshape(-1)
            original = flat[index]
            flat[index] = original + eps
            trial[name] = freeze(shifted.copy())
            plus = loss(trial)
            flat[index] = original - eps
            trial[name] = freeze(shifted.copy())
            minus = loss(trial)
            numeric = (plus - minus) / (2.0 * eps)
            error = relative_error(float(flat_grad[index]), numeric)
            strict = strict_relative_error(float(flat_grad[index]), numeric)
            if strict is not None:
                worst_strict = max(worst_strict, strict)
            checked += 1
            if error > worst_error or not worst_name:
                worst_error, worst_name = error, f"{name}[{index}]"
    result = GradcheckResult(
        op=op,
        checked=checked,
        max_rel_error=worst_error,
        worst=worst_name,
        tolerance=tolerance,
        max_strict_rel_error=worst_strict,
    )
    log = logger.info if result.passed else logger.warning
    log(
        f"gradcheck {op}: {checked} coordinates, max rel. error {worst_error:.3e} at {worst_name}, "
        f"strict {worst_strict:.3e} above {STRICT_FLOOR:g}"
    )
    return result


def _dot(upstream, out):
    return math.fsum((np.asarray(upstream) * np.asarray(out)).ravel())


def _normal(shape, seed, label, std=1.0):
    return seeded_fill(shape, derive_seed(seed, label), Normal(0.0, std))


def _separated(shape, seed, label):
    """Distinct nonzero values spaced 0.1 apart in random order (no ties, no kinks at 0)."""
    size = int(np.prod(shape))
    keys = sample(size, derive_seed(seed, label), Uniform(0.0, 1.0))
    ranks = np.argsort(np.argsort(keys, kind="stable"), kind="stable")
    return freeze(((ranks - size / 2.0 + 0.5) * 0.1).reshape(shape))


def _check_tree(op, forward, vjp, x, weights, upstream, seed, samples, tolerance):
    """Gradcheck over the input and every array of a weight structure."""
    grads = vjp(x, weights, upstream)
    inputs = {"input": x, **flatten_params(weights, prefix="w.")}
    analytic = {"input": grads.grad_input, **flatten_params(grads.grad_weights, prefix="w.")}

    def loss(arrays):
        flat = {name[2:]: array for name, array in arrays.items() if name.startswith("w.")}
        return _dot(upstream, forward(arrays["input"], rebuild_params(weights, flat)))

    return check_gradients(op, loss, inputs, analytic, tolerance=tolerance, samples=samples, seed=seed)


def check_conv2d(k=3, d=1, channels=2, out_channels=3, size=6, depthwise=False, stride=1, seed=0, samples=None):
    kind = DEPTHWISE if depthwise else DENSE
    out_channels = channels if depthwise else out_channels
    w = seeded_params(nn_ops.make_conv(kind, channels, out_channels, k, dilation=d, stride=stride), seed, std=0.5, bias_std=0.5)
    x = _normal((2, channels, size, size), seed, "input")
    out = nn_ops.output_size(size, stride)
    upstream = _normal((2, out_channels, out, out), seed, "upstream")
    op = f"conv2d[{kind},k={k},d={d},s={stride}]"
    return _check_tree(op, nn_ops.conv2d_forward, nn_ops.conv2d_vjp, x, w, upstream, seed, samples, GRADCHECK_RTOL)


def _check_unary(op, forward, vjp, x, upstream, seed, samples):
    analytic = {"input": vjp(x, upstream)}
    return check_gradients(
        op,
        lambda arrays: _dot(upstream, forward(arrays["input"])),
        {"input": x},
        analytic,
        samples=samples,
        seed=seed,
    )


def check_pool(mode="both", channels=4, size=5, seed=0, samples=None):
    x = _separated((2, channels, size, size), seed, "input")
    upstream = _normal((2, nn_ops.pooled_channels(mode), size, size), seed, "upstream")
    return _check_unary(
        f"channel_pool[{mode}]",
        lambda t: nn_ops.channel_pool(t, mode),
        lambda t, u: nn_ops.channel_pool_vjp(t, mode, u),
        x,
        upstream,
        seed,
        samples,
    )


def check_pointwise(name, seed=0, samples=None, shape=(2, 3, 4, 4)):
    table = {
        "sigmoid": (nn_ops.sigmoid, nn_ops.sigmoid_vjp),
        "gelu": (nn_ops.gelu, nn_ops.gelu_vjp),
        "relu": (nn_ops.relu, nn_ops.relu_vjp),
        "global_avg_pool": (nn_ops.global_avg_pool, nn_ops.global_avg_pool_vjp),
    }
    if name not in table:
        raise ContractViolation(f"no pointwise gradcheck for {name!r}, expected one of {sorted(table)}")
    forward, vjp = table[name]
    x = _separated(shape, seed, "input") if name == "relu" else _normal(shape, seed, "input", std=2.0)
    upstream = _normal(tuple(forward(x).shape), seed, "upstream")
    return _check_unary(name, forward, vjp, x, upstream, seed, samples)


def check_channel_affine(channels=3, size=4, seed=0, samples=None):
    affine = nn_ops.ChannelAffine(
        scale=np.asarray(_normal((1, channels, 1, 1), seed, "scale")).ravel(),
        shift=np.asarray(_normal((1, channels, 1, 1), seed, "shift")).ravel(),
    )
    x = _normal((2, channels, size, size), seed, "input")
    upstream = _normal(x.shape, seed, "upstream")

    def vjp(xx, a, u):
        grad_input, grads = nn_ops.channel_affine_vjp(xx, a, u)
        return nn_ops.Vjp(grad_input=grad_input, grad_weights=grads)

    return _check_tree("channel_affine", nn_ops.channel_affine, vjp, x, affine, upstream, seed, samples, GRADCHECK_RTOL)


def check_softmax(branches=3, channels=4, seed=0, samples=None):
    shape = (2, channels, 1, 1)
    logits = _normal((2, branches * channels, 1, 1), seed, "input")
    upstream = [_normal(shape, seed, f"upstream{i}") for i in range(branches)]

    def forward(t):
        parts = [t[:, i * channels : (i + 1) * channels] for i in range(branches)]
        return nn_ops.softmax_branches(parts)

    def loss(arrays):
        return math.fsum(_dot(u, w) for u, w in zip(upstream, forward(arrays["input"])))

    grads = nn_ops.softmax_branches_vjp(forward(logits), upstream)
    analytic = {"input": np.concatenate(grads, axis=1)}
    return check_gradients("softmax_branches", loss, {"input": logits}, analytic, samples=samples, seed=seed)


def check_lsk(cfg: Optional[LskConfig] = None, size=6, seed=0, samples=None):
    cfg = cfg or LskConfig(channels=3, plan=DecompositionPlan.of(((3, 1), (5, 2))))
    w = init_lsk_weights(cfg, seed, std=0.5, bias_std=0.1)
    x = _normal((2, cfg.channels, size, size), seed, "input")
    upstream = _normal(x.shape, seed, "upstream")
    return _check_tree(
        f"lsk[{cfg.selection_mode},{cfg.flow},N={cfg.branches}]",
        lambda t, ww: lsk_forward(t, cfg, ww)[0],
        lambda t, ww, u: lsk_vjp(t, cfg, ww, u),
        x,
        w,
        upstream,
        seed,
        samples,
        GRADCHECK_RTOL,
    )


def check_block(cfg: Optional[BlockConfig] = None, size=6, seed=0, samples=None):
    cfg = cfg or BlockConfig(lsk=LskConfig(channels=3, plan=DecompositionPlan.of(((3, 1), (5, 2)))), ffn_ratio=2)
    w = init_block_weights(cfg, seed, std=0.5, bias_std=0.1)
    x = _normal((2, cfg.channels, size, size), seed, "input")
    upstream = _normal(x.shape, seed, "upstream")
    return _check_tree(
        "lsk_block",
        lambda t, ww: lsk_block_forward(t, cfg, ww),
        lambda t, ww, u: lsk_block_vjp(t, cfg, ww, u),
        x,
        w,
        upstream,
        seed,
        samples,
        GRADCHECK_RTOL,
    )


def check_backbone(cfg: Optional[BackboneConfig] = None, size=32, seed=0, samples=2):
    cfg = cfg or BackboneConfig.preset("tiny")
    w = build_backbone(cfg, seed, std=0.3)
    x = _normal((1, cfg.in_channels, size, size), seed, "input")
    pyramid = backbone_forward(x, cfg, w)
    upstream = [_normal(stage.shape, seed, f"upstream{i}") for i, stage in enumerate(pyramid.stages)]

    def forward(t, ww):
        return np.concatenate([stage.ravel() for stage in backbone_forward(t, cfg, ww).stages])

    flat_upstream = np.concatenate([u.ravel() for u in upstream])
    return _check_tree(
        "backbone",
        forward,
        lambda t, ww, u: backbone_vjp(t, cfg, ww, upstream),
        x,
        w,
        flat_upstream,
        seed,
        samples,
        BACKBONE_RTOL,
    )


OPS = ("conv2d", "channel_pool", "sigmoid", "gelu", "relu", "global_avg_pool", "channel_affine", "softmax", "lsk", "block", "backbone")


def run_gradcheck(op, seed=0, samples=None, **options) -> GradcheckResult:
    """Dispatch used by the `gradcheck` subcommand."""
    if op == "conv2d":
        return check_conv2d(seed=seed, samples=samples, **options)
    if op == "channel_pool":
        return check_pool(seed=seed, samples=samples, **options)
    if op in ("sigmoid", "gelu", "relu", "global_avg_pool"):
        return check_pointwise(op, seed=seed, samples=samples)
    if op == "channel_affine":
        return check_channel_affine(seed=seed, samples=samples)
    if op == "softmax":
        return check_softmax(seed=seed, samples=samples)
    if op == "lsk":
        return check_lsk(seed=seed, samples=samples, **options)
    if op == "block":
        return check_block(seed=seed, samples=samples, **options)
    if op == "backbone":
        return check_backbone(seed=seed, samples=samples if samples is not None else 2)
    raise ContractViolation(f"unknown gradcheck op {op!r}, expected one of {OPS}")
