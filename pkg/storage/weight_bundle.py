# storage/weight_bundle.py - Weight bundles: manifest.json plus one LSKT file per parameter
import json
import logging
import os

import numpy as np

from services.params import flatten_params, rebuild_params
from storage.tensor_io import read_lskt, write_lskt
from utils.errors import FormatError

logger = logging.getLogger()

MANIFEST = "manifest.json"


def _as_rank4(array):
    return np.asarray(array).reshape((1,) * (4 - array.ndim) + array.shape)


def save_bundle(directory, kind, cfg, weights):
    """Write `weights` under `directory`; `cfg` is echoed for validation on load."""
    os.makedirs(directory, exist_ok=True)
    params = {}
    for name, array in flatten_params(weights).items():
        file_name = f"{name}.lskt"
        write_lskt(os.path.join(directory, file_name), _as_rank4(array))
        params[name] = {"file": file_name, "shape": list(array.shape)}
    manifest = {"kind": kind, "config": cfg.to_dict(), "params": params}
    with open(os.path.join(directory, MANIFEST), "w") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    logger.info(f"Saved {kind} bundle with {len(params)} parameters to {directory}")
    return os.path.join(directory, MANIFEST)


def load_bundle(directory, kind, cfg, template):
    """Weights shaped like `template` (e.g. zero weights for cfg) read from `directory`."""
    manifest_path = os.path.join(directory, MANIFEST)
    with open(manifest_path) as handle:
        try:
            manifest = json.load(handle)
        except ValueError as e:
            raise FormatError(f"{manifest_path}: invalid JSON ({e})")
    if manifest.get("kind") != kind:
        raise FormatError(f"{manifest_path}: bundle holds {manifest.get('kind')!r} weights, expected {kind!r}")
    if manifest.get("config") != json.loads(json.dumps(cfg.to_dict())):
        raise FormatError(f"{manifest_path}: bundle config {manifest.get('config')} does not match {cfg.to_dict()}")

    entries = manifest.get("params", {})
    flat = {}
    for name, array in flatten_params(template).items():
        if name not in entries:
            raise FormatError(f"{manifest_path}: parameter {name} is missing")
        entry = entries[name]
        if list(entry.get("shape", [])) != list(array.shape):
            raise FormatError(f"{manifest_path}: parameter {name} has shape {entry.get('shape')}, expected {list(array.shape)}")
        tensor = read_lskt(os.path.join(directory, entry["file"]))
        flat[name] = np.asarray(tensor).reshape(array.shape)
    extra = sorted(set(entries) - set(flat))
    if extra:
        raise FormatError(f"{manifest_path}: unexpected parameters {extra}")
    return rebuild_params(template, flat)
