# services/backbone.py - Four-stage LSKNet backbones built from LSK blocks
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from config import BACKBONE_PRESETS, DEFAULT_FFN_RATIO, DEFAULT_SELECTION_KERNEL, INIT_STD
from services import nn_ops
from services.decomposition import SERIES, DecompositionPlan
from services.lsk_module import (
    SPATIAL,
    ActivationTrace,
    BlockConfig,
    BlockWeights,
    LskConfig,
    lsk_block_forward_traced,
    lsk_block_vjp,
    seeded_params,
    zero_block_weights,
)
from services.nn_ops import DENSE, ChannelAffine, ConvWeights
from services.params import count_params
from services.tensor_core import freeze
from utils.errors import ContractViolation, require

logger = logging.getLogger()

STAGE_STRIDES = (4, 8, 16, 32)
STEM_KERNEL = 3
DOWNSAMPLE_KERNEL = 3


@dataclass(frozen=True)
class BackboneConfig:
    channels: Tuple[int, ...]
    depths: Tuple[int, ...]
    plan: DecompositionPlan = field(default_factory=DecompositionPlan.default)
    ffn_ratios: Tuple[int, ...] = (DEFAULT_FFN_RATIO,) * 4
    stem_channels: Optional[int] = None
    in_channels: int = 3
    selection_kernel: int = DEFAULT_SELECTION_KERNEL
    selection_mode: str = SPATIAL
    pooling: str = "both"
    flow: str = SERIES
    branch_divisor: int = 1

    def __post_init__(self):
        require(len(self.channels) == 4, f"a backbone has 4 stages, got {len(self.channels)} channel counts")
        require(len(self.depths) == 4, f"a backbone has 4 stages, got {len(self.depths)} depths")
        require(len(self.ffn_ratios) == 4, f"ffn_ratios needs 4 entries, got {len(self.ffn_ratios)}")
        require(all(c >= 1 for c in self.channels), f"stage channels must be positive, got {self.channels}")
        require(all(d >= 1 for d in self.depths), f"stage depths must be >= 1, got {self.depths}")
        require(self.in_channels >= 1, f"in_channels must be positive, got {self.in_channels}")
        require(self.branch_divisor >= 1, f"branch_divisor must be >= 1, got {self.branch_divisor}")
        require(
            self.stem_channels is None or self.stem_channels >= 1,
            f"stem_channels must be positive, got {self.stem_channels}",
        )
        # Surfaces LSK-level errors (plan, modes) at construction time
        self.stage_block_config(0)

    @property
    def stem_width(self):
        return self.stem_channels or max(self.channels[0] // 2, 1)

    def stage_lsk_config(self, stage) -> LskConfig:
        channels = self.channels[stage]
        width = max(channels // self.branch_divisor, 1)
        return LskConfig(
            channels=channels,
            plan=self.plan,
            selection_kernel=self.selection_kernel,
            selection_mode=self.selection_mode,
            pooling=self.pooling,
            flow=self.flow,
            branch_channels=None if width == channels else width,
        )

    def stage_block_config(self, stage) -> BlockConfig:
        return BlockConfig(lsk=self.stage_lsk_config(stage), ffn_ratio=self.ffn_ratios[stage])

    def to_dict(self):
        return {
            "channels": list(self.channels),
            "depths": list(self.depths),
            "plan": [list(pair) for pair in self.plan.pairs()],
            "ffn_ratios": list(self.ffn_ratios),
            "stem_channels": self.stem_width,
            "in_channels": self.in_channels,
            "selection_kernel": self.selection_kernel,
            "selection_mode": self.selection_mode,
            "pooling": self.pooling,
            "flow": self.flow,
            "branch_divisor": self.branch_divisor,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        for key in ("channels", "depths", "ffn_ratios"):
            if key in data:
                data[key] = tuple(int(v) for v in data[key])
        if "plan" in data:
            data["plan"] = DecompositionPlan.of(data["plan"])
        return cls(**data)

    @classmethod
    def preset(cls, name, **overrides):
        if name not in BACKBONE_PRESETS:
            raise ContractViolation(f"unknown backbone preset {name!r}, expected one of {sorted(BACKBONE_PRESETS)}")
        settings = dict(BACKBONE_PRESETS[name])
        settings.update(overrides)
        return cls.from_dict(settings)


@dataclass(frozen=True, eq=False)
class StageWeights:
    downsample: Optional[ConvWeights]
    down_norm: Optional[ChannelAffine]
    blocks: Tuple[BlockWeights, ...]
    norm: ChannelAffine


@dataclass(frozen=True, eq=False)
class BackboneWeights:
    stem1: ConvWeights
    stem_norm1: ChannelAffine
    stem2: ConvWeights
    stem_norm2: ChannelAffine
    stages: Tuple[StageWeights, ...]


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    stages: Tuple[np.ndarray, ...]
    strides: Tuple[int, ...] = STAGE_STRIDES

    def shapes(self):
        return [tuple(int(d) for d in stage.shape) for stage in self.stages]


@dataclass(frozen=True, eq=False)
class BackboneVjp:
    grad_input: np.ndarray
    grad_weights: BackboneWeights


def _zero_affine(channels):
    return ChannelAffine(scale=np.zeros(channels), shift=np.zeros(channels))


def zero_backbone_weights(cfg: BackboneConfig) -> BackboneWeights:
    stages = []
    for index, channels in enumerate(cfg.channels):
        downsample = down_norm = None
        if index > 0:
            downsample = nn_ops.make_conv(DENSE, cfg.channels[index - 1], channels, DOWNSAMPLE_KERNEL, stride=2)
            down_norm = _zero_affine(channels)
        block_cfg = cfg.stage_block_config(index)
        blocks = tuple(zero_block_weights(block_cfg) for _ in range(cfg.depths[index]))
        stages.append(StageWeights(downsample=downsample, down_norm=down_norm, blocks=blocks, norm=_zero_affine(channels)))
    return BackboneWeights(
        stem1=nn_ops.make_conv(DENSE, cfg.in_channels, cfg.stem_width, STEM_KERNEL, stride=2),
        stem_norm1=_zero_affine(cfg.stem_width),
        stem2=nn_ops.make_conv(DENSE, cfg.stem_width, cfg.channels[0], STEM_KERNEL, stride=2),
        stem_norm2=_zero_affine(cfg.channels[0]),
        stages=tuple(stages),
    )


def build_backbone(cfg: BackboneConfig, seed, std=INIT_STD) -> BackboneWeights:
    """Truncated-normal (std 0.02) conv weights, zero biases, identity norms."""
    weights = seeded_params(zero_backbone_weights(cfg), seed, std=std)
    logger.info(f"Built backbone {list(cfg.channels)}/{list(cfg.depths)} with {count_params(weights)} parameters")
    return weights


def parameter_count(weights: BackboneWeights):
    return count_params(weights)


def _check_input(x, cfg):
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ContractViolation(f"backbone input must be (N, {cfg.in_channels}, H, W), got shape {x.shape}")
    height, width = x.shape[2], x.shape[3]
    if height < 32 or width < 32 or height % 32 or width % 32:
        raise ContractViolation(
            f"backbone input H and W must be positive multiples of 32, got {height}x{width}"
        )


def _backbone_forward_cached(x, cfg: BackboneConfig, w: BackboneWeights):
    _check_input(x, cfg)
    cache = {"x": x}
    cache["stem1"] = nn_ops.conv2d_forward(x, w.stem1)
    cache["stem_n1"] = nn_ops.channel_affine(cache["stem1"], w.stem_norm1)
    cache["stem_act"] = nn_ops.gelu(cache["stem_n1"])
    cache["stem2"] = nn_ops.conv2d_forward(cache["stem_act"], w.stem2)
    current = nn_ops.channel_affine(cache["stem2"], w.stem_norm2)

    outputs = []
    traces: Dict[Tuple[int, int], ActivationTrace] = {}
    stage_caches = []
    for index, stage in enumerate(w.stages):
        stage_cache = {"input": current}
        if stage.downsample is not None:
            stage_cache["down"] = nn_ops.conv2d_forward(current, stage.downsample)
            current = nn_ops.channel_affine(stage_cache["down"], stage.down_norm)
        block_cfg = cfg.stage_block_config(index)
        block_inputs = []
        for block_index, block in enumerate(stage.blocks):
            block_inputs.append(current)
            current, trace = lsk_block_forward_traced(current, block_cfg, block)
            traces[(index + 1, block_index + 1)] = trace
        stage_cache["block_inputs"] = block_inputs
        stage_cache["pre_norm"] = current
        current = nn_ops.channel_affine(current, stage.norm)
        outputs.append(current)
        stage_caches.append(stage_cache)
    cache["stages"] = stage_caches
    return FeaturePyramid(stages=tuple(outputs)), traces, cache


def backbone_forward(x, cfg: BackboneConfig, w: BackboneWeights) -> FeaturePyramid:
    pyramid, _, _ = _backbone_forward_cached(x, cfg, w)
    return pyramid


def backbone_forward_traced(x, cfg: BackboneConfig, w: BackboneWeights):
    """Pyramid plus the per-block selection traces keyed (stage, block), both 1-based."""
    pyramid, traces, _ = _backbone_forward_cached(x, cfg, w)
    return pyramid, traces


def backbone_vjp(x, cfg: BackboneConfig, w: BackboneWeights, upstream) -> BackboneVjp:
    pyramid, _, cache = _backbone_forward_cached(x, cfg, w)
    if len(upstream) != len(pyramid.stages):
        raise ContractViolation(f"backbone_vjp needs {len(pyramid.stages)} upstream tensors, got {len(upstream)}")
    for index, (grad, out) in enumerate(zip(upstream, pyramid.stages)):
        if grad.shape != out.shape:
            raise ContractViolation(f"backbone_vjp: upstream {index} has shape {grad.shape}, expected {out.shape}")

    stage_grads = [None] * len(w.stages)
    carried = None
    for index in reversed(range(len(w.stages))):
        stage, stage_cache = w.stages[index], cache["stages"][index]
        grad_out = upstream[index] if carried is None else upstream[index] + carried
        grad, grad_norm = nn_ops.channel_affine_vjp(stage_cache["pre_norm"], stage.norm, grad_out)
        block_cfg = cfg.stage_block_config(index)
        block_grads = [None] * len(stage.blocks)
        for block_index in reversed(range(len(stage.blocks))):
            block_vjp = lsk_block_vjp(stage_cache["block_inputs"][block_index], block_cfg, stage.blocks[block_index], grad)
            block_grads[block_index] = block_vjp.grad_weights
            grad = block_vjp.grad_input
        grad_down = grad_down_norm = None
        if stage.downsample is not None:
            grad, grad_down_norm = nn_ops.channel_affine_vjp(stage_cache["down"], stage.down_norm, grad)
            down_vjp = nn_ops.conv2d_vjp(stage_cache["input"], stage.downsample, grad)
            grad_down = down_vjp.grad_weights
            grad = down_vjp.grad_input
        stage_grads[index] = StageWeights(
            downsample=grad_down, down_norm=grad_down_norm, blocks=tuple(block_grads), norm=grad_norm
        )
        carried = grad

    grad, grad_stem_norm2 = nn_ops.channel_affine_vjp(cache["stem2"], w.stem_norm2, carried)
    stem2 = nn_ops.conv2d_vjp(cache["stem_act"], w.stem2, grad)
    grad = nn_ops.gelu_vjp(cache["stem_n1"], stem2.grad_input)
    grad, grad_stem_norm1 = nn_ops.channel_affine_vjp(cache["stem1"], w.stem_norm1, grad)
    stem1 = nn_ops.conv2d_vjp(x, w.stem1, grad)

    grads = BackboneWeights(
        stem1=stem1.grad_weights,
        stem_norm1=grad_stem_norm1,
        stem2=stem2.grad_weights,
        stem_norm2=grad_stem_norm2,
        stages=tuple(stage_grads),
    )
    return BackboneVjp(grad_input=freeze(np.asarray(stem1.grad_input)), grad_weights=grads)
