# services/lsk_module.py - Large selective kernel module and the LSK block
"""Dataflow of one LSK module on input X (C channels, branch width b):

    U_0 = X, U_{i+1} = dw_i(U_i)             (series; parallel feeds X to every dw_i)
    Ũ_i = proj_i(U_i)                         1x1, C -> b
    SA  = pool([Ũ_1; ...; Ũ_N])               channel avg / max
    S̃A_i = sigmoid(select(SA))_i              P -> N conv, selection_kernel x selection_kernel
    S   = fuse(Σ S̃A_i ⊙ Ũ_i)                  1x1, b -> C
    Y   = X ⊙ S

The channel-selection ablation replaces the spatial masks by an SKNet-style
softmax over branches per channel.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from config import DEFAULT_CHANNEL_REDUCTION, DEFAULT_FFN_RATIO, DEFAULT_SELECTION_KERNEL, INIT_STD
from services import nn_ops
from services.decomposition import FLOWS, PARALLEL, SERIES, DecompositionPlan
from services.nn_ops import DENSE, DEPTHWISE, ChannelAffine, ConvWeights
from services.params import map_params
from services.tensor_core import (
    TruncatedNormal,
    channel_slice,
    concat_channels,
    derive_seed,
    elementwise_mul,
    freeze,
    sample,
)
from utils.errors import ContractViolation, require

logger = logging.getLogger()

SPATIAL = "spatial"
CHANNEL = "channel"
SPATIAL_CHANNEL = "spatial+channel"
NO_SELECTION = "none"
SELECTION_MODES = (SPATIAL, CHANNEL, SPATIAL_CHANNEL, NO_SELECTION)


@dataclass(frozen=True)
class LskConfig:
    channels: int
    plan: DecompositionPlan = field(default_factory=DecompositionPlan.default)
    selection_kernel: int = DEFAULT_SELECTION_KERNEL
    selection_mode: str = SPATIAL
    pooling: str = "both"
    flow: str = SERIES
    branch_channels: Optional[int] = None
    channel_reduction: int = DEFAULT_CHANNEL_REDUCTION

    def __post_init__(self):
        require(self.channels >= 1, f"channels must be positive, got {self.channels}")
        require(
            self.selection_kernel >= 1 and self.selection_kernel % 2 == 1,
            f"selection_kernel must be odd and positive, got {self.selection_kernel}",
        )
        require(self.selection_mode in SELECTION_MODES, f"selection_mode must be one of {SELECTION_MODES}, got {self.selection_mode!r}")
        require(self.pooling in nn_ops.POOL_MODES, f"pooling must be one of {nn_ops.POOL_MODES}, got {self.pooling!r}")
        require(self.flow in FLOWS, f"flow must be one of {FLOWS}, got {self.flow!r}")
        require(self.branch_channels is None or self.branch_channels >= 1, f"branch_channels must be positive, got {self.branch_channels}")
        require(self.channel_reduction >= 1, f"channel_reduction must be >= 1, got {self.channel_reduction}")
        if self.flow == SERIES:
            self.plan.require_valid()

    @property
    def branches(self):
        return len(self.plan)

    @property
    def width(self):
        """Channel count b of every projected branch feature Ũ_i."""
        return self.branch_channels or self.channels

    @property
    def hidden(self):
        return max(self.width // self.channel_reduction, 1)

    @property
    def uses_spatial(self):
        return self.selection_mode in (SPATIAL, SPATIAL_CHANNEL)

    @property
    def uses_channel(self):
        return self.selection_mode in (CHANNEL, SPATIAL_CHANNEL)

    def branch_receptive_fields(self):
        return self.plan.branch_receptive_fields(self.flow)

    def to_dict(self):
        return {
            "channels": self.channels,
            "plan": [list(pair) for pair in self.plan.pairs()],
            "selection_kernel": self.selection_kernel,
            "selection_mode": self.selection_mode,
            "pooling": self.pooling,
            "flow": self.flow,
            "branch_channels": self.branch_channels,
            "channel_reduction": self.channel_reduction,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["plan"] = DecompositionPlan.of(data.get("plan", DecompositionPlan.default().pairs()))
        return cls(**data)


@dataclass(frozen=True, eq=False)
class LskWeights:
    dw: Tuple[ConvWeights, ...]
    proj: Tuple[ConvWeights, ...]
    fuse: ConvWeights
    select: Optional[ConvWeights] = None
    squeeze: Optional[ConvWeights] = None
    expand: Optional[ConvWeights] = None


@dataclass(frozen=True, eq=False)
class ActivationTrace:
    """Selection signals of one LSK module call."""

    spatial_maps: Tuple[np.ndarray, ...]
    channel_weights: Tuple[np.ndarray, ...]
    branch_rf: Tuple[int, ...]


@dataclass(frozen=True, eq=False)
class LskVjp:
    grad_input: np.ndarray
    grad_weights: LskWeights


@dataclass(frozen=True)
class BlockConfig:
    lsk: LskConfig
    ffn_ratio: int = DEFAULT_FFN_RATIO

    def __post_init__(self):
        require(self.ffn_ratio >= 1, f"ffn_ratio must be >= 1, got {self.ffn_ratio}")

    @property
    def channels(self):
        return self.lsk.channels

    @property
    def hidden(self):
        return self.ffn_ratio * self.lsk.channels


@dataclass(frozen=True, eq=False)
class BlockWeights:
    norm1: ChannelAffine
    pre: ConvWeights
    lsk: LskWeights
    post: ConvWeights
    norm2: ChannelAffine
    fc1: ConvWeights
    ffn_dw: ConvWeights
    fc2: ConvWeights


@dataclass(frozen=True, eq=False)
class BlockVjp:
    grad_input: np.ndarray
    grad_weights: BlockWeights


# ➤ Weight construction

def zero_lsk_weights(cfg: LskConfig) -> LskWeights:
    c, b, n = cfg.channels, cfg.width, cfg.branches
    dw = tuple(nn_ops.make_conv(DEPTHWISE, c, c, spec.k, dilation=spec.d) for spec in cfg.plan.specs)
    proj = tuple(nn_ops.make_conv(DENSE, c, b, 1) for _ in range(n))
    select = None
    if cfg.uses_spatial:
        select = nn_ops.make_conv(DENSE, nn_ops.pooled_channels(cfg.pooling), n, cfg.selection_kernel)
    squeeze = expand = None
    if cfg.uses_channel:
        squeeze = nn_ops.make_conv(DENSE, b, cfg.hidden, 1)
        expand = nn_ops.make_conv(DENSE, cfg.hidden, n * b, 1)
    fuse = nn_ops.make_conv(DENSE, b, c, 1)
    return LskWeights(dw=dw, proj=proj, fuse=fuse, select=select, squeeze=squeeze, expand=expand)


def seeded_params(tree, seed, std=INIT_STD, bias_std=0.0):
    """Truncated-normal weights from per-name sub-streams; biases zero unless bias_std > 0.

    Affine scales start at one and shifts at zero.
    """

    def init(name, array):
        stream = derive_seed(seed, name)
        if name.endswith(".scale"):
            return np.ones(array.shape)
        if name.endswith(".shift"):
            return np.zeros(array.shape)
        if name.endswith(".bias"):
            if bias_std == 0.0:
                return np.zeros(array.shape)
            return sample(array.size, stream, TruncatedNormal(0.0, bias_std)).reshape(array.shape)
        return sample(array.size, stream, TruncatedNormal(0.0, std)).reshape(array.shape)

    return map_params(tree, init)


def init_lsk_weights(cfg: LskConfig, seed, std=INIT_STD, bias_std=0.0) -> LskWeights:
    return seeded_params(zero_lsk_weights(cfg), seed, std=std, bias_std=bias_std)


def check_lsk_weights(cfg: LskConfig, w: LskWeights):
    n, c, b = cfg.branches, cfg.channels, cfg.width
    require(len(w.dw) == n and len(w.proj) == n, f"expected {n} dw/proj layers, got {len(w.dw)}/{len(w.proj)}")
    for index, (conv, spec) in enumerate(zip(w.dw, cfg.plan.specs)):
        require(
            conv.kind == DEPTHWISE and conv.in_channels == c and conv.kernel == spec.k and conv.dilation == spec.d,
            f"dw.{index} must be depthwise k={spec.k} d={spec.d} on {c} channels, got {conv.kind} "
            f"k={conv.kernel} d={conv.dilation} on {conv.in_channels}",
        )
    for index, conv in enumerate(w.proj):
        require(conv.in_channels == c and conv.out_channels == b and conv.kernel == 1, f"proj.{index} must be 1x1 {c}->{b}")
    require(w.fuse.in_channels == b and w.fuse.out_channels == c and w.fuse.kernel == 1, f"fuse must be 1x1 {b}->{c}")
    if cfg.uses_spatial:
        pooled = nn_ops.pooled_channels(cfg.pooling)
        require(
            w.select is not None
            and w.select.in_channels == pooled
            and w.select.out_channels == n
            and w.select.kernel == cfg.selection_kernel,
            f"select must be a {cfg.selection_kernel}x{cfg.selection_kernel} conv {pooled}->{n}",
        )
    if cfg.uses_channel:
        require(
            w.squeeze is not None and w.expand is not None
            and w.squeeze.in_channels == b and w.squeeze.out_channels == cfg.hidden
            and w.expand.in_channels == cfg.hidden and w.expand.out_channels == n * b,
            f"channel selection needs squeeze {b}->{cfg.hidden} and expand {cfg.hidden}->{n * b}",
        )


# ➤ Forward

def _sum(tensors):
    total = tensors[0]
    for tensor in tensors[1:]:
        total = total + tensor
    return freeze(np.asarray(total))


def _channel_select(base, cfg, w, cache):
    """SKNet-style softmax over branches per channel; returns Σ a_i ⊙ base_i."""
    n, b = cfg.branches, cfg.width
    height, width = base[0].shape[2], base[0].shape[3]
    total = _sum(base)
    descriptor = nn_ops.global_avg_pool(total)
    hidden_pre = nn_ops.conv2d_forward(descriptor, w.squeeze)
    hidden = nn_ops.relu(hidden_pre)
    logits = nn_ops.conv2d_forward(hidden, w.expand)
    weights = nn_ops.softmax_branches([channel_slice(logits, i * b, (i + 1) * b) for i in range(n)])
    tiled = [nn_ops.expand_spatial(weight, height, width) for weight in weights]
    out = _sum([elementwise_mul(t, part) for t, part in zip(tiled, base)])
    cache.update(
        channel_total=total,
        channel_descriptor=descriptor,
        channel_hidden_pre=hidden_pre,
        channel_hidden=hidden,
        channel_weights=weights,
        channel_tiled=tiled,
        channel_base=base,
    )
    return out


def _lsk_forward_cached(x, cfg: LskConfig, w: LskWeights):
    if x.ndim != 4 or x.shape[1] != cfg.channels:
        raise ContractViolation(f"LSK input must be (N, {cfg.channels}, H, W), got shape {x.shape}")
    check_lsk_weights(cfg, w)
    n, b = cfg.branches, cfg.width
    cache = {"x": x}

    sources, features = [], []
    current = x
    for dw in w.dw:
        source = current if cfg.flow == SERIES else x
        current = nn_ops.conv2d_forward(source, dw)
        sources.append(source)
        features.append(current)
    projected = [nn_ops.conv2d_forward(u, proj) for u, proj in zip(features, w.proj)]
    cache.update(sources=sources, features=features, projected=projected)

    maps = []
    branch_terms = projected
    if cfg.uses_spatial:
        stacked = concat_channels(projected)
        pooled = nn_ops.channel_pool(stacked, cfg.pooling)
        logits = nn_ops.conv2d_forward(pooled, w.select)
        masks = nn_ops.sigmoid(logits)
        maps = [channel_slice(masks, i, i + 1) for i in range(n)]
        expanded = [nn_ops.expand_channels(m, b) for m in maps]
        branch_terms = [elementwise_mul(e, p) for e, p in zip(expanded, projected)]
        cache.update(stacked=stacked, pooled=pooled, logits=logits, maps=maps, expanded=expanded)

    if cfg.uses_channel:
        aggregate = _channel_select(branch_terms, cfg, w, cache)
    else:
        aggregate = _sum(branch_terms)
    attention = nn_ops.conv2d_forward(aggregate, w.fuse)
    y = elementwise_mul(x, attention)
    cache.update(aggregate=aggregate, attention=attention)

    trace = ActivationTrace(
        spatial_maps=tuple(maps),
        channel_weights=tuple(cache.get("channel_weights", ())),
        branch_rf=cfg.branch_receptive_fields(),
    )
    return y, trace, cache


def lsk_forward(x, cfg: LskConfig, w: LskWeights):
    """Returns (y, trace); y has the shape of x."""
    y, trace, _ = _lsk_forward_cached(x, cfg, w)
    return y, trace


# ➤ Reverse mode

def _channel_select_vjp(cfg, w, cache, grad_out):
    """Gradients for the channel-selection inputs and its two 1x1 layers."""
    n, b = cfg.branches, cfg.width
    base = cache["channel_base"]
    tiled = cache["channel_tiled"]
    grad_base = [freeze(grad_out * t) for t in tiled]
    grad_weights = [freeze(np.sum(grad_out * part, axis=(2, 3), keepdims=True)) for part in base]
    grad_logit_parts = nn_ops.softmax_branches_vjp(cache["channel_weights"], grad_weights)
    grad_logits = concat_channels(grad_logit_parts)
    expand_vjp = nn_ops.conv2d_vjp(cache["channel_hidden"], w.expand, grad_logits)
    grad_hidden_pre = nn_ops.relu_vjp(cache["channel_hidden_pre"], expand_vjp.grad_input)
    squeeze_vjp = nn_ops.conv2d_vjp(cache["channel_descriptor"], w.squeeze, grad_hidden_pre)
    grad_total = nn_ops.global_avg_pool_vjp(cache["channel_total"], squeeze_vjp.grad_input)
    grad_base = [freeze(g + grad_total) for g in grad_base]
    return grad_base, squeeze_vjp.grad_weights, expand_vjp.grad_weights


def lsk_vjp(x, cfg: LskConfig, w: LskWeights, upstream) -> LskVjp:
    y, _, cache = _lsk_forward_cached(x, cfg, w)
    if upstream.shape != y.shape:
        raise ContractViolation(f"lsk_vjp: upstream shape {upstream.shape} does not match output {y.shape}")
    n, b = cfg.branches, cfg.width

    grad_x, grad_attention = nn_ops.elementwise_mul_vjp(x, cache["attention"], upstream)
    fuse_vjp = nn_ops.conv2d_vjp(cache["aggregate"], w.fuse, grad_attention)
    grad_aggregate = fuse_vjp.grad_input

    grad_squeeze = grad_expand = None
    if cfg.uses_channel:
        grad_terms, grad_squeeze, grad_expand = _channel_select_vjp(cfg, w, cache, grad_aggregate)
    else:
        grad_terms = [grad_aggregate] * n

    projected = cache["projected"]
    grad_select = None
    if cfg.uses_spatial:
        grad_projected = [freeze(g * e) for g, e in zip(grad_terms, cache["expanded"])]
        grad_maps = [nn_ops.expand_channels_vjp(g * p) for g, p in zip(grad_terms, projected)]
        grad_logits = nn_ops.sigmoid_vjp(cache["logits"], concat_channels(grad_maps))
        select_vjp = nn_ops.conv2d_vjp(cache["pooled"], w.select, grad_logits)
        grad_select = select_vjp.grad_weights
        grad_stacked = nn_ops.channel_pool_vjp(cache["stacked"], cfg.pooling, select_vjp.grad_input)
        grad_projected = [
            freeze(g + channel_slice(grad_stacked, i * b, (i + 1) * b)) for i, g in enumerate(grad_projected)
        ]
    else:
        grad_projected = grad_terms

    grad_proj, grad_features = [], []
    for u, proj, g in zip(cache["features"], w.proj, grad_projected):
        proj_vjp = nn_ops.conv2d_vjp(u, proj, g)
        grad_proj.append(proj_vjp.grad_weights)
        grad_features.append(proj_vjp.grad_input)

    grad_dw = [None] * n
    grad_x = np.array(grad_x)
    carried = None
    for i in reversed(range(n)):
        grad_u = grad_features[i] if carried is None else grad_features[i] + carried
        dw_vjp = nn_ops.conv2d_vjp(cache["sources"][i], w.dw[i], grad_u)
        grad_dw[i] = dw_vjp.grad_weights
        if cfg.flow == SERIES and i > 0:
            carried = dw_vjp.grad_input
        else:
            carried = None
            grad_x += dw_vjp.grad_input

    grads = LskWeights(
        dw=tuple(grad_dw),
        proj=tuple(grad_proj),
        fuse=fuse_vjp.grad_weights,
        select=grad_select,
        squeeze=grad_squeeze,
        expand=grad_expand,
    )
    return LskVjp(grad_input=freeze(grad_x), grad_weights=grads)


def channel_selection_forward(x, cfg: LskConfig, w: LskWeights):
    """Channel-selection ablation of the module (structure only)."""
    if cfg.selection_mode != CHANNEL:
        cfg = replace(cfg, selection_mode=CHANNEL)
    return lsk_forward(x, cfg, w)


# ➤ LSK block

def zero_block_weights(cfg: BlockConfig) -> BlockWeights:
    c, hidden = cfg.channels, cfg.hidden
    return BlockWeights(
        norm1=ChannelAffine(scale=np.zeros(c), shift=np.zeros(c)),
        pre=nn_ops.make_conv(DENSE, c, c, 1),
        lsk=zero_lsk_weights(cfg.lsk),
        post=nn_ops.make_conv(DENSE, c, c, 1),
        norm2=ChannelAffine(scale=np.zeros(c), shift=np.zeros(c)),
        fc1=nn_ops.make_conv(DENSE, c, hidden, 1),
        ffn_dw=nn_ops.make_conv(DEPTHWISE, hidden, hidden, 3),
        fc2=nn_ops.make_conv(DENSE, hidden, c, 1),
    )


def init_block_weights(cfg: BlockConfig, seed, std=INIT_STD, bias_std=0.0) -> BlockWeights:
    return seeded_params(zero_block_weights(cfg), seed, std=std, bias_std=bias_std)


def _block_forward_cached(x, cfg: BlockConfig, w: BlockWeights):
    if x.ndim != 4 or x.shape[1] != cfg.channels:
        raise ContractViolation(f"block input must be (N, {cfg.channels}, H, W), got shape {x.shape}")
    cache = {"x": x}
    cache["n1"] = nn_ops.channel_affine(x, w.norm1)
    cache["pre"] = nn_ops.conv2d_forward(cache["n1"], w.pre)
    cache["act"] = nn_ops.gelu(cache["pre"])
    cache["lsk"], trace = lsk_forward(cache["act"], cfg.lsk, w.lsk)
    cache["post"] = nn_ops.conv2d_forward(cache["lsk"], w.post)
    x1 = nn_ops.residual_add(x, cache["post"])
    cache["x1"] = x1
    cache["n2"] = nn_ops.channel_affine(x1, w.norm2)
    cache["fc1"] = nn_ops.conv2d_forward(cache["n2"], w.fc1)
    cache["dw"] = nn_ops.conv2d_forward(cache["fc1"], w.ffn_dw)
    cache["ffn_act"] = nn_ops.gelu(cache["dw"])
    cache["fc2"] = nn_ops.conv2d_forward(cache["ffn_act"], w.fc2)
    y = nn_ops.residual_add(x1, cache["fc2"])
    return y, trace, cache


def lsk_block_forward(x, cfg: BlockConfig, w: BlockWeights):
    """x1 = x + post(LSK(gelu(pre(norm1(x))))); y = x1 + fc2(gelu(dw3(fc1(norm2(x1)))))."""
    y, _, _ = _block_forward_cached(x, cfg, w)
    return y


def lsk_block_forward_traced(x, cfg: BlockConfig, w: BlockWeights):
    y, trace, _ = _block_forward_cached(x, cfg, w)
    return y, trace


def lsk_block_vjp(x, cfg: BlockConfig, w: BlockWeights, upstream) -> BlockVjp:
    y, _, cache = _block_forward_cached(x, cfg, w)
    if upstream.shape != y.shape:
        raise ContractViolation(f"lsk_block_vjp: upstream shape {upstream.shape} does not match output {y.shape}")

    grad_x1, grad_fc2_out = nn_ops.residual_add_vjp(upstream)
    fc2 = nn_ops.conv2d_vjp(cache["ffn_act"], w.fc2, grad_fc2_out)
    grad_dw_out = nn_ops.gelu_vjp(cache["dw"], fc2.grad_input)
    ffn_dw = nn_ops.conv2d_vjp(cache["fc1"], w.ffn_dw, grad_dw_out)
    fc1 = nn_ops.conv2d_vjp(cache["n2"], w.fc1, ffn_dw.grad_input)
    grad_n2_in, grad_norm2 = nn_ops.channel_affine_vjp(cache["x1"], w.norm2, fc1.grad_input)
    grad_x1 = grad_x1 + grad_n2_in

    grad_x, grad_post_out = nn_ops.residual_add_vjp(grad_x1)
    post = nn_ops.conv2d_vjp(cache["lsk"], w.post, grad_post_out)
    lsk = lsk_vjp(cache["act"], cfg.lsk, w.lsk, post.grad_input)
    grad_pre_out = nn_ops.gelu_vjp(cache["pre"], lsk.grad_input)
    pre = nn_ops.conv2d_vjp(cache["n1"], w.pre, grad_pre_out)
    grad_n1_in, grad_norm1 = nn_ops.channel_affine_vjp(x, w.norm1, pre.grad_input)

    grads = BlockWeights(
        norm1=grad_norm1,
        pre=pre.grad_weights,
        lsk=lsk.grad_weights,
        post=post.grad_weights,
        norm2=grad_norm2,
        fc1=fc1.grad_weights,
        ffn_dw=ffn_dw.grad_weights,
        fc2=fc2.grad_weights,
    )
    return BlockVjp(grad_input=freeze(grad_x + grad_n1_in), grad_weights=grads)


# ➤ Ablation presets (configuration axes only)

ABLATION_PRESETS: Dict[str, Dict] = {
    "rf11": {"plan": ((3, 1), (5, 2))},
    "rf23": {"plan": ((5, 1), (7, 3))},
    "rf29": {"plan": ((5, 1), (7, 4))},
    "rf39": {"plan": ((7, 1), (9, 4))},
    "rf29-single": {"plan": ((29, 1),)},
    "rf29-triple": {"plan": ((3, 1), (5, 2), (7, 3))},
    "sknet": {"plan": ((3, 1), (5, 1)), "flow": PARALLEL, "selection_mode": CHANNEL},
    "lsknet-cs": {"plan": ((5, 1), (7, 3)), "selection_mode": CHANNEL},
    "lsknet-scs": {"plan": ((5, 1), (7, 3)), "selection_mode": SPATIAL_CHANNEL},
    "lsknet": {"plan": ((5, 1), (7, 3)), "selection_mode": SPATIAL},
    "pool-avg": {"plan": ((5, 1), (7, 3)), "pooling": "avg"},
    "pool-max": {"plan": ((5, 1), (7, 3)), "pooling": "max"},
}


def ablation_config(name, channels, **overrides) -> LskConfig:
    if name not in ABLATION_PRESETS:
        raise ContractViolation(f"unknown ablation preset {name!r}, expected one of {sorted(ABLATION_PRESETS)}")
    settings = dict(ABLATION_PRESETS[name])
    settings.update(overrides)
    settings["plan"] = DecompositionPlan.of(settings["plan"])
    return LskConfig(channels=channels, **settings)
