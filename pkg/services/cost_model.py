# services/cost_model.py - Analytic parameter and FLOP ledgers
"""Counting convention.

Every conv layer contributes its weight elements (params_without_bias) and
its bias elements; FLOPs = params_without_bias * H_out * W_out, one
multiply-accumulate counted as one FLOP. Norm layers are listed with their
parameters and zero FLOPs. Ledger row names are the parameter paths of the
constructed weight structures, so every row can be audited against the
arrays it describes.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

from config import DEFAULT_SELECTION_KERNEL, FLOP_INPUT_SIZE, COMPARISON_CHANNELS
from services import nn_ops
from services.backbone import DOWNSAMPLE_KERNEL, STAGE_STRIDES, STEM_KERNEL
from services.decomposition import DecompositionPlan, KernelSpec
from utils.errors import require

logger = logging.getLogger()

CONV = "conv"
NORM = "norm"

CONVENTION_NOTE = (
    "params count conv weights and biases (biases itemized); FLOPs = weight elements x H_out x W_out "
    "per conv layer with one MAC = one FLOP; norms and activations carry zero FLOPs"
)
COMPARISON_NOTE = (
    "the reported comparison does not say which layers its parameter counts include; rows here "
    "use branch width C/2 with projections, spatial selection and fusion, biases counted"
)

# Reported single-vs-decomposed values: (rf, single plan, decomposed plan, single #P, decomposed #P, single FLOPs, decomposed FLOPs)
REPORTED_COMPARISONS = (
    (23, ((23, 1),), ((5, 1), (7, 3)), 40.4e3, 11.3e3, 42.4e9, 11.9e9),
    (29, ((29, 1),), ((3, 1), (5, 2), (7, 3)), 60.4e3, 11.3e3, 63.3e9, 13.6e9),
)


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    weights: int
    biases: int
    flops: int

    @property
    def params(self):
        return self.weights + self.biases

    def to_dict(self):
        return {
            "name": self.name,
            "kind": self.kind,
            "params": self.params,
            "params_without_bias": self.weights,
            "flops": self.flops,
        }


@dataclass(frozen=True)
class CostReport:
    ledger: Tuple[LayerCost, ...]
    notes: Tuple[str, ...] = (CONVENTION_NOTE,)

    @property
    def params_with_bias(self):
        return sum(row.params for row in self.ledger)

    @property
    def params_without_bias(self):
        return sum(row.weights for row in self.ledger)

    @property
    def flops(self):
        return sum(row.flops for row in self.ledger)

    def row(self, name) -> Optional[LayerCost]:
        return next((row for row in self.ledger if row.name == name), None)

    def to_dict(self):
        return {
            "params_with_bias": self.params_with_bias,
            "params_without_bias": self.params_without_bias,
            "flops": self.flops,
            "ledger": [row.to_dict() for row in self.ledger],
            "notes": list(self.notes),
        }


def conv_row(name, in_channels, out_channels, k, height, width, depthwise=False, bias=True) -> LayerCost:
    weights = (1 if depthwise else in_channels) * out_channels * k * k
    return LayerCost(
        name=name,
        kind=CONV,
        weights=weights,
        biases=out_channels if bias else 0,
        flops=weights * height * width,
    )


def norm_row(name, channels) -> LayerCost:
    return LayerCost(name=name, kind=NORM, weights=2 * channels, biases=0, flops=0)


def _specs(plan):
    if isinstance(plan, DecompositionPlan):
        return plan.specs
    return tuple(spec if isinstance(spec, KernelSpec) else KernelSpec(*spec) for spec in plan)


def _lsk_rows(
    prefix,
    specs,
    channels,
    width,
    height,
    spatial_width,
    include_projections=True,
    spatial_selection=True,
    channel_selection=False,
    include_fusion=True,
    selection_kernel=DEFAULT_SELECTION_KERNEL,
    pooling="both",
    hidden=None,
) -> List[LayerCost]:
    n = len(specs)
    rows = [
        conv_row(f"{prefix}dw.{i}", channels, channels, spec.k, height, spatial_width, depthwise=True)
        for i, spec in enumerate(specs)
    ]
    if include_projections:
        rows += [conv_row(f"{prefix}proj.{i}", channels, width, 1, height, spatial_width) for i in range(n)]
    if spatial_selection:
        pooled = nn_ops.pooled_channels(pooling)
        rows.append(conv_row(f"{prefix}select", pooled, n, selection_kernel, height, spatial_width))
    if channel_selection:
        # Both 1x1 layers act on the globally pooled (1x1) descriptor
        rows.append(conv_row(f"{prefix}squeeze", width, hidden, 1, 1, 1))
        rows.append(conv_row(f"{prefix}expand", hidden, n * width, 1, 1, 1))
    if include_fusion:
        rows.append(conv_row(f"{prefix}fuse", width, channels, 1, height, spatial_width))
    return rows


def cost_of_plan(
    plan,
    channels,
    spatial=(FLOP_INPUT_SIZE, FLOP_INPUT_SIZE),
    include_selection=True,
    include_projections=True,
    branch_channels=None,
    selection_kernel=DEFAULT_SELECTION_KERNEL,
    pooling="both",
) -> CostReport:
    """Cost of one LSK module built on `plan` with spatial selection.

    include_selection=False drops the selection conv and the fusion layer;
    include_projections=False drops the per-branch 1x1 projections.
    """
    height, width = spatial
    require(channels >= 1 and height >= 1 and width >= 1, f"cost_of_plan needs C, H, W >= 1, got C={channels}, {height}x{width}")
    specs = _specs(plan)
    require(len(specs) >= 1, "cost_of_plan needs a non-empty plan")
    rows = _lsk_rows(
        "",
        specs,
        channels,
        branch_channels or channels,
        height,
        width,
        include_projections=include_projections,
        spatial_selection=include_selection,
        include_fusion=include_selection,
        selection_kernel=selection_kernel,
        pooling=pooling,
    )
    return CostReport(ledger=tuple(rows))


def lsk_module_rows(cfg, height, width, prefix="") -> List[LayerCost]:
    return _lsk_rows(
        prefix,
        cfg.plan.specs,
        cfg.channels,
        cfg.width,
        height,
        width,
        spatial_selection=cfg.uses_spatial,
        channel_selection=cfg.uses_channel,
        selection_kernel=cfg.selection_kernel,
        pooling=cfg.pooling,
        hidden=cfg.hidden,
    )


def lsk_module_cost(cfg, height, width) -> CostReport:
    return CostReport(ledger=tuple(lsk_module_rows(cfg, height, width)))


def block_rows(cfg, height, width, prefix="") -> List[LayerCost]:
    c, hidden = cfg.channels, cfg.hidden
    rows = [
        norm_row(f"{prefix}norm1", c),
        conv_row(f"{prefix}pre", c, c, 1, height, width),
    ]
    rows += lsk_module_rows(cfg.lsk, height, width, prefix=f"{prefix}lsk.")
    rows += [
        conv_row(f"{prefix}post", c, c, 1, height, width),
        norm_row(f"{prefix}norm2", c),
        conv_row(f"{prefix}fc1", c, hidden, 1, height, width),
        conv_row(f"{prefix}ffn_dw", hidden, hidden, 3, height, width, depthwise=True),
        conv_row(f"{prefix}fc2", hidden, c, 1, height, width),
    ]
    return rows


def block_cost(cfg, height, width) -> CostReport:
    return CostReport(ledger=tuple(block_rows(cfg, height, width)))


def backbone_cost(cfg, height=FLOP_INPUT_SIZE, width=FLOP_INPUT_SIZE) -> CostReport:
    """Ledger of every layer build_backbone constructs, in forward order."""
    half_h, half_w = nn_ops.output_size(height, 2), nn_ops.output_size(width, 2)
    stem = cfg.stem_width
    rows = [
        conv_row("stem1", cfg.in_channels, stem, STEM_KERNEL, half_h, half_w),
        norm_row("stem_norm1", stem),
        conv_row("stem2", stem, cfg.channels[0], STEM_KERNEL, nn_ops.output_size(half_h, 2), nn_ops.output_size(half_w, 2)),
        norm_row("stem_norm2", cfg.channels[0]),
    ]
    for index, channels in enumerate(cfg.channels):
        stride = STAGE_STRIDES[index]
        stage_h = -(-height // stride)
        stage_w = -(-width // stride)
        prefix = f"stages.{index}."
        if index > 0:
            rows.append(conv_row(f"{prefix}downsample", cfg.channels[index - 1], channels, DOWNSAMPLE_KERNEL, stage_h, stage_w))
            rows.append(norm_row(f"{prefix}down_norm", channels))
        block_cfg = cfg.stage_block_config(index)
        for block in range(cfg.depths[index]):
            rows += block_rows(block_cfg, stage_h, stage_w, prefix=f"{prefix}blocks.{block}.")
        rows.append(norm_row(f"{prefix}norm", channels))
    report = CostReport(ledger=tuple(rows))
    logger.debug(f"Backbone ledger: {len(rows)} layers, {report.params_with_bias} params, {report.flops} FLOPs at {height}x{width}")
    return report


@dataclass(frozen=True)
class KernelComparison:
    rf: int
    single: Tuple[Tuple[int, int], ...]
    decomposed: Tuple[Tuple[int, int], ...]
    single_cost: CostReport
    decomposed_cost: CostReport
    reported_single_params: float
    reported_decomposed_params: float
    reported_single_flops: float
    reported_decomposed_flops: float

    @property
    def params_ratio(self):
        return self.single_cost.params_with_bias / self.decomposed_cost.params_with_bias

    @property
    def params_ratio_without_bias(self):
        return self.single_cost.params_without_bias / self.decomposed_cost.params_without_bias

    @property
    def reported_ratio(self):
        return self.reported_single_params / self.reported_decomposed_params

    def to_dict(self):
        return {
            "rf": self.rf,
            "single": [list(pair) for pair in self.single],
            "decomposed": [list(pair) for pair in self.decomposed],
            "single_params": self.single_cost.params_with_bias,
            "decomposed_params": self.decomposed_cost.params_with_bias,
            "single_flops": self.single_cost.flops,
            "decomposed_flops": self.decomposed_cost.flops,
            "params_ratio": self.params_ratio,
            "params_ratio_without_bias": self.params_ratio_without_bias,
            "reported_single_params": self.reported_single_params,
            "reported_decomposed_params": self.reported_decomposed_params,
            "reported_single_flops": self.reported_single_flops,
            "reported_decomposed_flops": self.reported_decomposed_flops,
            "reported_ratio": self.reported_ratio,
        }


def kernel_comparison(channels=COMPARISON_CHANNELS, spatial=(FLOP_INPUT_SIZE, FLOP_INPUT_SIZE)) -> List[KernelComparison]:
    """Single large kernel vs its decomposition at equal RF, branch width C/2."""
    width = max(channels // 2, 1)
    rows = []
    for rf, single, decomposed, p_single, p_dec, f_single, f_dec in REPORTED_COMPARISONS:
        rows.append(
            KernelComparison(
                rf=rf,
                single=single,
                decomposed=decomposed,
                single_cost=cost_of_plan(single, channels, spatial, branch_channels=width),
                decomposed_cost=cost_of_plan(decomposed, channels, spatial, branch_channels=width),
                reported_single_params=p_single,
                reported_decomposed_params=p_dec,
                reported_single_flops=f_single,
                reported_decomposed_flops=f_dec,
            )
        )
    return rows
