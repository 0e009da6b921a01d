# storage/trace_store.py - On-disk layout of exported selection maps
"""One directory per image::

    <root>/<image_id>/trace.json
    <root>/<image_id>/stage{s}_block{b}_branch{n}.lskt   (1, 1, h, w)
    <root>/<image_id>/stage{s}_block{b}_branch{n}.pgm    8-bit preview

trace.json lists every block with its branch receptive fields and file names.
"""
import io
import json
import logging
import os

import numpy as np
from PIL import Image, UnidentifiedImageError

from storage.tensor_io import read_lskt, write_lskt
from utils.errors import FormatError
from utils.helpers import require_file_stem

logger = logging.getLogger()

TRACE_FILE = "trace.json"


def map_stem(stage, block, branch):
    return f"stage{stage}_block{block}_branch{branch}"


def render_pgm(grid):
    """Binary PGM (P5) of a 2-D map, min-max scaled to 0..255.

    A map with zero range renders as constant 255.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise FormatError(f"PGM rendering needs a 2-D map, got shape {grid.shape}")
    low, high = float(np.min(grid)), float(np.max(grid))
    if high - low > 0.0:
        scaled = np.rint((grid - low) / (high - low) * 255.0)
    else:
        scaled = np.full(grid.shape, 255.0)
    buffer = io.BytesIO()
    Image.fromarray(scaled.astype(np.uint8)).save(buffer, format="PPM")
    return buffer.getvalue()


def read_pgm(path):
    try:
        with Image.open(path) as image:
            image.load()
            if image.format != "PPM" or image.mode != "L":
                raise FormatError(f"{path}: not an 8-bit binary PGM")
            return np.asarray(image, dtype=np.uint8).copy()
    except (UnidentifiedImageError, SyntaxError, ValueError) as e:
        raise FormatError(f"{path}: unreadable PGM ({e})")


def write_trace_dir(root, image_id, input_hw, blocks, render=True):
    """Write one image's maps; `blocks` holds dicts with stage, block, branch_rf and maps (2-D arrays).

    Returns the list of written file paths, manifest last.
    """
    directory = os.path.join(root, require_file_stem(image_id, "image id"))
    os.makedirs(directory, exist_ok=True)
    written = []
    entries = []
    for entry in blocks:
        files = []
        for branch, grid in enumerate(entry["maps"], start=1):
            stem = map_stem(entry["stage"], entry["block"], branch)
            tensor_path = os.path.join(directory, f"{stem}.lskt")
            write_lskt(tensor_path, np.asarray(grid)[None, None, :, :])
            written.append(tensor_path)
            if render:
                pgm_path = os.path.join(directory, f"{stem}.pgm")
                with open(pgm_path, "wb") as handle:
                    handle.write(render_pgm(grid))
                written.append(pgm_path)
            files.append(f"{stem}.lskt")
        entries.append(
            {
                "stage": int(entry["stage"]),
                "block": int(entry["block"]),
                "branch_rf": [int(rf) for rf in entry["branch_rf"]],
                "files": files,
            }
        )
    manifest = {"image_id": str(image_id), "input_hw": [int(v) for v in input_hw], "blocks": entries}
    manifest_path = os.path.join(directory, TRACE_FILE)
    with open(manifest_path, "w") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    written.append(manifest_path)
    logger.info(f"Exported {sum(len(e['files']) for e in entries)} selection maps for image {image_id} to {directory}")
    return written


def read_trace_dir(root):
    """Every image under `root` as (image_id, input_hw, blocks), sorted by directory name."""
    if not os.path.isdir(root):
        raise FileNotFoundError(f"trace directory {root} does not exist")
    records = []
    for name in sorted(os.listdir(root)):
        manifest_path = os.path.join(root, name, TRACE_FILE)
        if not os.path.isfile(manifest_path):
            continue
        try:
            with open(manifest_path) as handle:
                manifest = json.load(handle)
            input_hw = tuple(int(v) for v in manifest["input_hw"])
            blocks = []
            for entry in manifest["blocks"]:
                maps = []
                for file_name in entry["files"]:
                    tensor = read_lskt(os.path.join(root, name, file_name))
                    maps.append(np.asarray(tensor[0, 0]))
                blocks.append(
                    {
                        "stage": int(entry["stage"]),
                        "block": int(entry["block"]),
                        "branch_rf": tuple(int(rf) for rf in entry["branch_rf"]),
                        "maps": maps,
                    }
                )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{manifest_path}: malformed trace manifest ({e})")
        records.append((str(manifest.get("image_id", name)), input_hw, blocks))
    logger.info(f"Loaded {len(records)} image traces from {root}")
    return records
