# services/analysis.py - Receptive-field and kernel-selection statistics over selection traces
"""Per-image selection traces are aggregated per object category.

R_c relates the RF-weighted selection mass of an image to the area of its
annotated boxes; ΔA_c measures, per block, how far the larger-RF branch map
departs from the smaller-RF one.
"""
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from storage.trace_store import read_trace_dir, write_trace_dir
from utils.errors import ContractViolation, FormatError, require
from utils.helpers import require_file_stem, run_parallel

logger = logging.getLogger()

LINEAR = "linear"
AREA = "area"
RF_WEIGHTINGS = (LINEAR, AREA)

_HEADER_PREFIXES = ("imagesource:", "gsd:")


@dataclass(frozen=True)
class BoxAnnotation:
    image_id: str
    category: str
    polygon: Tuple[Tuple[float, float], ...]
    difficulty: int = 0

    @property
    def area(self):
        """Shoelace area of the polygon."""
        xs = [p[0] for p in self.polygon]
        ys = [p[1] for p in self.polygon]
        n = len(self.polygon)
        twice = math.fsum(xs[i] * ys[(i + 1) % n] - xs[(i + 1) % n] * ys[i] for i in range(n))
        return abs(twice) / 2.0

    def within(self, height, width):
        return all(0.0 <= x <= width and 0.0 <= y <= height for x, y in self.polygon)


def parse_dota_annotations(text, image_id, image_size: Optional[Tuple[int, int]] = None) -> List[BoxAnnotation]:
    """Parse DOTA lines ``x1 y1 ... x4 y4 category difficulty``.

    ``imagesource:`` / ``gsd:`` header lines and blank lines are skipped.
    """
    boxes = []
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.lower().startswith(_HEADER_PREFIXES):
            continue
        parts = line.split()
        if len(parts) < 9:
            raise FormatError(f"{image_id}:{line_number}: expected 8 coordinates and a category, got {line!r}")
        try:
            coords = [float(value) for value in parts[:8]]
            difficulty = int(parts[9]) if len(parts) > 9 else 0
        except ValueError:
            raise FormatError(f"{image_id}:{line_number}: non-numeric coordinate or difficulty in {line!r}")
        # Categories name report files
        try:
            require_file_stem(parts[8], "category")
        except FormatError as e:
            raise FormatError(f"{image_id}:{line_number}: {e}")
        box = BoxAnnotation(
            image_id=str(image_id),
            category=parts[8],
            polygon=tuple(zip(coords[0::2], coords[1::2])),
            difficulty=difficulty,
        )
        if box.area <= 0.0:
            raise ContractViolation(f"{image_id}:{line_number}: box has zero area")
        if image_size is not None and not box.within(*image_size):
            raise ContractViolation(f"{image_id}:{line_number}: box lies outside the {image_size[0]}x{image_size[1]} image")
        boxes.append(box)
    return boxes


def read_annotations(path) -> Dict[str, List[BoxAnnotation]]:
    """A DOTA label file (image id = file stem) or a directory of them."""
    if os.path.isdir(path):
        paths = [os.path.join(path, name) for name in sorted(os.listdir(path)) if name.endswith(".txt")]
    else:
        paths = [path]
    annotations = {}
    for label_path in paths:
        image_id = os.path.splitext(os.path.basename(label_path))[0]
        with open(label_path) as handle:
            annotations[image_id] = parse_dota_annotations(handle.read(), image_id)
    return annotations


def group_images_by_category(annotations: Dict[str, List[BoxAnnotation]]) -> Dict[str, List[str]]:
    """Images whose boxes all belong to one category, keyed by that category."""
    groups: Dict[str, List[str]] = {}
    for image_id in sorted(annotations):
        categories = {box.category for box in annotations[image_id]}
        if len(categories) == 1:
            groups.setdefault(categories.pop(), []).append(image_id)
    return groups


# ➤ Traces

@dataclass(frozen=True, eq=False)
class BlockTrace:
    stage: int
    block: int
    maps: Tuple[np.ndarray, ...]
    branch_rf: Tuple[int, ...]

    def __post_init__(self):
        require(len(self.maps) == len(self.branch_rf), f"block ({self.stage}, {self.block}) has {len(self.maps)} maps for {len(self.branch_rf)} branches")

    @property
    def key(self):
        return (self.stage, self.block)


@dataclass(frozen=True, eq=False)
class ImageTrace:
    image_id: str
    input_hw: Tuple[int, int]
    blocks: Tuple[BlockTrace, ...] = field(default_factory=tuple)


def traces_from_backbone(traces, input_hw, image_ids: Sequence[str]) -> List[ImageTrace]:
    """Split a batched {(stage, block): ActivationTrace} into one ImageTrace per image."""
    images = []
    for index, image_id in enumerate(image_ids):
        blocks = []
        for (stage, block), trace in sorted(traces.items()):
            if not trace.spatial_maps:
                raise ContractViolation(f"block ({stage}, {block}) has no spatial selection maps to analyse")
            maps = tuple(np.asarray(m[index, 0]) for m in trace.spatial_maps)
            blocks.append(BlockTrace(stage=stage, block=block, maps=maps, branch_rf=tuple(trace.branch_rf)))
        images.append(ImageTrace(image_id=str(image_id), input_hw=tuple(input_hw), blocks=tuple(blocks)))
    return images


def _upsample_nearest(grid, height, width):
    h, w = grid.shape
    if height % h or width % w:
        raise ContractViolation(f"map of size {h}x{w} does not tile the {height}x{width} input")
    return np.repeat(np.repeat(grid, height // h, axis=0), width // w, axis=1)


def selective_rf_mass(trace: ImageTrace, rf_weighting=LINEAR):
    """A_i: selection maps upsampled to input size, weighted by RF (or RF²), summed."""
    require(rf_weighting in RF_WEIGHTINGS, f"rf_weighting must be one of {RF_WEIGHTINGS}, got {rf_weighting!r}")
    height, width = trace.input_hw
    terms = []
    for block in trace.blocks:
        for grid, rf in zip(block.maps, block.branch_rf):
            weight = float(rf) if rf_weighting == LINEAR else float(rf) ** 2
            terms.append(weight * math.fsum(np.abs(_upsample_nearest(grid, height, width)).ravel()))
    return math.fsum(terms)


@dataclass(frozen=True)
class RatioReport:
    ratios: Dict[str, float]
    normalized: Dict[str, float]
    image_counts: Dict[str, int]
    absent: Tuple[str, ...]
    rf_weighting: str = LINEAR

    def to_dict(self):
        return {
            "rf_weighting": self.rf_weighting,
            "ratios": dict(self.ratios),
            "normalized": dict(self.normalized),
            "image_counts": dict(self.image_counts),
            "absent": list(self.absent),
        }


def check_boxes_within(traces: Sequence[ImageTrace], annotations: Dict[str, List[BoxAnnotation]]):
    """Every box of a traced image must lie inside that image's input size."""
    for trace in traces:
        height, width = trace.input_hw
        for box in annotations.get(trace.image_id, []):
            if not box.within(height, width):
                raise ContractViolation(
                    f"{trace.image_id}: {box.category} box {box.polygon} lies outside the {height}x{width} image"
                )


def rf_box_ratio(traces: Sequence[ImageTrace], annotations: Dict[str, List[BoxAnnotation]], rf_weighting=LINEAR) -> RatioReport:
    """R_c = mean over single-category images of A_i / B_i."""
    check_boxes_within(traces, annotations)
    by_id = {trace.image_id: trace for trace in traces}
    categories = sorted({box.category for boxes in annotations.values() for box in boxes})
    groups = group_images_by_category(annotations)

    ratios, counts, absent = {}, {}, []
    for category in categories:
        image_ids = [image_id for image_id in groups.get(category, []) if image_id in by_id]
        if not image_ids:
            absent.append(category)
            continue

        def image_ratio(image_id):
            box_area = math.fsum(box.area for box in annotations[image_id])
            return selective_rf_mass(by_id[image_id], rf_weighting) / box_area

        values = run_parallel(image_ratio, image_ids)
        ratios[category] = math.fsum(values) / len(values)
        counts[category] = len(values)

    if absent:
        logger.warning(f"No single-category traced images for: {', '.join(absent)}")
    peak = max(ratios.values(), default=0.0)
    normalized = {category: (value / peak if peak > 0.0 else 0.0) for category, value in ratios.items()}
    return RatioReport(
        ratios=ratios,
        normalized=normalized,
        image_counts=counts,
        absent=tuple(absent),
        rf_weighting=rf_weighting,
    )


@dataclass(frozen=True)
class SelectionDifference:
    per_block: Dict[Tuple[int, int], float]
    normalized: Dict[Tuple[int, int], float]
    ranking: Tuple[Tuple[int, int], ...]

    def to_dict(self):
        def label(key):
            return f"B_{key[0]}_{key[1]}"

        return {
            "per_block": {label(key): value for key, value in self.per_block.items()},
            "normalized": {label(key): value for key, value in self.normalized.items()},
            "ranking": [label(key) for key in self.ranking],
        }


def block_selection_difference(block: BlockTrace):
    """Mean |larger-RF map - smaller-RF map| over pixels of one block."""
    if len(block.maps) != 2:
        raise ContractViolation(
            f"kernel selection difference needs exactly 2 branches, block ({block.stage}, {block.block}) has {len(block.maps)}"
        )
    order = sorted(range(2), key=lambda i: block.branch_rf[i])
    smaller, larger = block.maps[order[0]], block.maps[order[1]]
    return math.fsum(np.abs(larger - smaller).ravel()) / smaller.size


def kernel_selection_difference(traces: Sequence[ImageTrace]) -> SelectionDifference:
    """ΔA per block, averaged over the given images, with a max-normalized view and ranking."""
    require(len(traces) >= 1, "kernel_selection_difference needs at least one trace")
    per_image: Dict[Tuple[int, int], List[float]] = {}
    for trace in traces:
        for block in trace.blocks:
            per_image.setdefault(block.key, []).append(block_selection_difference(block))
    per_block = {key: math.fsum(values) / len(values) for key, values in sorted(per_image.items())}
    peak = max(per_block.values(), default=0.0)
    normalized = {key: (value / peak if peak > 0.0 else 0.0) for key, value in per_block.items()}
    ranking = tuple(sorted(per_block, key=lambda key: (-per_block[key], key)))
    return SelectionDifference(per_block=per_block, normalized=normalized, ranking=ranking)


def kernel_selection_by_category(traces: Sequence[ImageTrace], annotations) -> Dict[str, SelectionDifference]:
    check_boxes_within(traces, annotations)
    by_id = {trace.image_id: trace for trace in traces}
    results = {}
    for category, image_ids in sorted(group_images_by_category(annotations).items()):
        selected = [by_id[image_id] for image_id in image_ids if image_id in by_id]
        if selected:
            results[category] = kernel_selection_difference(selected)
    return results


# ➤ Export

def export_activation_maps(trace: ImageTrace, output_dir, render=True):
    """LSKT file (plus PGM preview) per branch per block, and trace.json."""
    blocks = [
        {"stage": block.stage, "block": block.block, "branch_rf": block.branch_rf, "maps": block.maps}
        for block in trace.blocks
    ]
    return write_trace_dir(output_dir, trace.image_id, trace.input_hw, blocks, render=render)


def load_trace_dir(path) -> List[ImageTrace]:
    images = []
    for image_id, input_hw, blocks in read_trace_dir(path):
        images.append(
            ImageTrace(
                image_id=image_id,
                input_hw=input_hw,
                blocks=tuple(
                    BlockTrace(stage=b["stage"], block=b["block"], maps=tuple(b["maps"]), branch_rf=b["branch_rf"])
                    for b in blocks
                ),
            )
        )
    return images
