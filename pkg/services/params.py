# services/params.py - Flat, name-addressed views of nested weight structures
"""Weight structures (ConvWeights, ChannelAffine and the dataclasses that
nest them) are walked field by field. Every ndarray field becomes one named
parameter, e.g. ``stages.0.blocks.1.lsk.dw.0.weight``.
"""
from dataclasses import fields, is_dataclass, replace

import numpy as np

from utils.errors import ContractViolation


def _children(tree):
    if is_dataclass(tree):
        for field in fields(tree):
            yield field.name, getattr(tree, field.name)
    elif isinstance(tree, (tuple, list)):
        for index, item in enumerate(tree):
            yield str(index), item


def flatten_params(tree, prefix=""):
    """Ordered {name: array} for every array inside `tree`."""
    flat = {}
    for name, value in _children(tree):
        key = f"{prefix}{name}"
        if isinstance(value, np.ndarray):
            flat[key] = value
        elif is_dataclass(value) or isinstance(value, (tuple, list)):
            flat.update(flatten_params(value, prefix=f"{key}."))
    return flat


def rebuild_params(tree, flat, prefix=""):
    """Copy of `tree` with arrays taken from `flat` (missing names are kept)."""
    if isinstance(tree, (tuple, list)):
        return type(tree)(
            rebuild_params(item, flat, prefix=f"{prefix}{index}.") for index, item in enumerate(tree)
        )
    if not is_dataclass(tree):
        return tree
    changes = {}
    for name, value in _children(tree):
        key = f"{prefix}{name}"
        if isinstance(value, np.ndarray):
            if key in flat:
                new_value = np.asarray(flat[key], dtype=np.float64)
                if new_value.shape != value.shape:
                    raise ContractViolation(
                        f"parameter {key} has shape {new_value.shape}, expected {value.shape}"
                    )
                changes[name] = new_value
        elif is_dataclass(value) or isinstance(value, (tuple, list)):
            changes[name] = rebuild_params(value, flat, prefix=f"{key}.")
    return replace(tree, **changes)


def map_params(tree, fn):
    """Apply fn(name, array) -> array to every parameter."""
    return rebuild_params(tree, {name: fn(name, array) for name, array in flatten_params(tree).items()})


def count_params(tree):
    return sum(int(array.size) for array in flatten_params(tree).values())
