# storage/tensor_io.py - LSKT tensor files and shorthand tensor literals
"""LSKT layout: magic ``4C 53 4B 54``, version u16 = 1, dtype u8 = 1 (f64),
rank u8 = 4, four u64 dims, then the raw payload. Everything little-endian.
"""
import logging
import os
import struct

import numpy as np

from services.tensor_core import Normal, Uniform, as_tensor, ones, seeded_fill, zeros
from utils.errors import ContractViolation, FormatError
from utils.helpers import parse_dims

logger = logging.getLogger()

MAGIC = b"LSKT"
VERSION = 1
DTYPE_F64 = 1
HEADER = struct.Struct("<4sHBB4Q")


def encode_lskt(x):
    if x.ndim != 4:
        raise ContractViolation(f"LSKT stores rank-4 tensors, got shape {x.shape}")
    header = HEADER.pack(MAGIC, VERSION, DTYPE_F64, 4, *(int(d) for d in x.shape))
    return header + np.ascontiguousarray(x, dtype="<f8").tobytes()


def decode_lskt(blob, source="<bytes>"):
    if len(blob) < HEADER.size:
        raise FormatError(f"{source}: truncated LSKT header ({len(blob)} bytes)")
    magic, version, dtype, rank, *dims = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported LSKT version {version}, expected {VERSION}")
    if dtype != DTYPE_F64 or rank != 4:
        raise FormatError(f"{source}: unsupported dtype {dtype} / rank {rank}")
    count = dims[0] * dims[1] * dims[2] * dims[3]
    expected = HEADER.size + 8 * count
    if len(blob) != expected:
        raise FormatError(f"{source}: payload is {len(blob) - HEADER.size} bytes, expected {8 * count}")
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=HEADER.size)
    return as_tensor(data.reshape(dims), name=source)


def write_lskt(path, x):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(encode_lskt(x))
    logger.debug(f"Wrote tensor {tuple(x.shape)} to {path}")


def read_lskt(path):
    with open(path, "rb") as handle:
        blob = handle.read()
    return decode_lskt(blob, source=path)


def load_tensor_arg(text):
    """Resolve a CLI tensor argument.

    Accepted forms: ``zeros:1x3x64x64``, ``ones:1x3x8x8``,
    ``seed:7:normal:1x3x64x64``, ``seed:7:uniform:1x3x64x64`` or a path to an
    LSKT file.
    """
    parts = text.split(":")
    kind = parts[0].lower()
    if kind == "zeros" and len(parts) == 2:
        return zeros(parse_dims(parts[1]))
    if kind == "ones" and len(parts) == 2:
        return ones(parse_dims(parts[1]))
    if kind == "seed" and len(parts) == 4:
        try:
            seed = int(parts[1])
        except ValueError:
            raise FormatError(f"invalid seed {parts[1]!r} in tensor literal {text!r}")
        distributions = {"normal": Normal(0.0, 1.0), "uniform": Uniform(0.0, 1.0)}
        if parts[2].lower() not in distributions:
            raise FormatError(f"unknown distribution {parts[2]!r} in tensor literal {text!r}")
        return seeded_fill(parse_dims(parts[3]), seed, distributions[parts[2].lower()])
    if os.path.exists(text):
        return read_lskt(text)
    raise FormatError(
        f"cannot interpret tensor argument {text!r}: expected zeros:NxCxHxW, "
        "seed:S:normal|uniform:NxCxHxW or an existing .lskt file"
    )
