# services/tensor_core.py - Dense NCHW tensors, elementwise arithmetic and seeded fills
"""A Tensor is a read-only, C-contiguous float64 ``numpy.ndarray`` of rank 4
laid out as (batch, channel, height, width).

Library results are frozen (``writeable = False``) so that a tensor handed to
another thread can never change underneath it.
"""
import hashlib
import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Union

import numpy as np

from utils.errors import ContractViolation

logger = logging.getLogger()

# SplitMix64 constants
_GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX_1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX_2 = np.uint64(0x94D049BB133111EB)
_MASK_64 = (1 << 64) - 1


class Shape(NamedTuple):
    n: int
    c: int
    h: int
    w: int

    @classmethod
    def of(cls, dims):
        dims = tuple(int(d) for d in dims)
        if len(dims) != 4:
            raise ContractViolation(f"shape must have 4 components (N, C, H, W), got {dims}")
        if any(d < 0 for d in dims):
            raise ContractViolation(f"shape components must be >= 0, got {dims}")
        return cls(*dims)

    @property
    def size(self):
        return self.n * self.c * self.h * self.w


@dataclass(frozen=True)
class Uniform:
    lo: float = 0.0
    hi: float = 1.0


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    std: float = 1.0


@dataclass(frozen=True)
class TruncatedNormal:
    mean: float = 0.0
    std: float = 1.0
    # in units of std
    bound: float = 2.0


Distribution = Union[Uniform, Normal, TruncatedNormal]


def freeze(array):
    array.flags.writeable = False
    return array


def as_tensor(data, name="tensor"):
    """Copy `data` into a frozen float64 NCHW tensor."""
    array = np.array(data, dtype=np.float64, order="C", copy=True)
    if array.ndim != 4:
        raise ContractViolation(f"{name} must be rank 4 (N, C, H, W), got shape {array.shape}")
    return freeze(array)


def shape_of(x):
    return Shape.of(x.shape)


def check_finite(x, name="tensor"):
    if not np.all(np.isfinite(x)):
        raise ContractViolation(f"{name} contains NaN or Inf values")
    return x


def require_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ContractViolation(
            f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}"
        )


def zeros(shape):
    shape = Shape.of(shape)
    return freeze(np.zeros(shape, dtype=np.float64))


def ones(shape):
    shape = Shape.of(shape)
    return freeze(np.ones(shape, dtype=np.float64))


def elementwise_mul(a, b):
    require_same_shape(a, b, "elementwise_mul")
    return freeze(np.multiply(a, b))


def concat_channels(parts: Sequence[np.ndarray]):
    if not parts:
        raise ContractViolation("concat_channels: list of parts must be non-empty")
    first = parts[0]
    for index, part in enumerate(parts):
        if part.ndim != 4:
            raise ContractViolation(f"concat_channels: part {index} has rank {part.ndim}, expected 4")
        if (part.shape[0], part.shape[2], part.shape[3]) != (first.shape[0], first.shape[2], first.shape[3]):
            raise ContractViolation(
                f"concat_channels: part {index} has N,H,W {part.shape[0], part.shape[2], part.shape[3]}"
                f" but part 0 has {first.shape[0], first.shape[2], first.shape[3]}"
            )
    return freeze(np.concatenate(parts, axis=1))


def channel_slice(x, start, stop):
    if not 0 <= start <= stop <= x.shape[1]:
        raise ContractViolation(
            f"channel_slice: invalid band [{start}, {stop}) for {x.shape[1]} channels"
        )
    return freeze(np.ascontiguousarray(x[:, start:stop]))


def splitmix64(seed, count):
    """First `count` outputs of the SplitMix64 stream started at `seed`.

    state_i = seed + (i + 1) * 0x9E3779B97F4A7C15 (mod 2**64), then the
    standard 30/27/31 xor-shift multiply finalizer.
    """
    base = np.uint64(int(seed) & _MASK_64)
    steps = np.arange(1, count + 1, dtype=np.uint64)
    z = base + steps * _GOLDEN_GAMMA
    z = (z ^ (z >> np.uint64(30))) * _MIX_1
    z = (z ^ (z >> np.uint64(27))) * _MIX_2
    return z ^ (z >> np.uint64(31))


def uniform_stream(seed, count):
    """Doubles in [0, 1) from the top 53 bits of each SplitMix64 output."""
    return (splitmix64(seed, count) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def normal_stream(seed, count):
    """Standard normal samples via Box-Muller over consecutive uniform pairs."""
    pairs = (count + 1) // 2
    u = uniform_stream(seed, 2 * pairs)
    # 1 - u lies in (0, 1], keeping the log finite
    u1 = 1.0 - u[0::2]
    u2 = u[1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = radius * np.cos(angle)
    out[1::2] = radius * np.sin(angle)
    return out[:count]


def derive_seed(seed, label):
    """Stable 64-bit seed for a named sub-stream (e.g. a weight role)."""
    digest = hashlib.blake2b(
        f"{int(seed) & _MASK_64}:{label}".encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def sample(count, seed, distribution: Distribution):
    """Flat float64 array of `count` deterministic samples."""
    if isinstance(distribution, Uniform):
        if distribution.lo > distribution.hi:
            raise ContractViolation(
                f"uniform requires lo <= hi, got lo={distribution.lo} hi={distribution.hi}"
            )
        u = uniform_stream(seed, count)
        return distribution.lo + (distribution.hi - distribution.lo) * u
    if isinstance(distribution, Normal):
        if distribution.std < 0:
            raise ContractViolation(f"normal requires std >= 0, got {distribution.std}")
        return distribution.mean + distribution.std * normal_stream(seed, count)
    if isinstance(distribution, TruncatedNormal):
        if distribution.std < 0 or distribution.bound <= 0:
            raise ContractViolation(
                f"truncated normal requires std >= 0 and bound > 0, got {distribution}"
            )
        z = normal_stream(seed, count)
        rejected = np.abs(z) > distribution.bound
        round_index = 0
        while rejected.any():
            round_index += 1
            redraw = normal_stream(derive_seed(seed, f"resample-{round_index}"), int(rejected.sum()))
            z[rejected] = redraw
            rejected = np.abs(z) > distribution.bound
        return distribution.mean + distribution.std * z
    raise ContractViolation(f"unknown distribution {distribution!r}")


def seeded_fill(shape, seed, distribution: Distribution):
    shape = Shape.of(shape)
    values = sample(shape.size, seed, distribution)
    return freeze(values.reshape(shape))


def checksum(x):
    """Hex SHA-256 of the tensor's little-endian float64 payload."""
    payload = np.ascontiguousarray(x, dtype="<f8").tobytes()
    return hashlib.sha256(payload).hexdigest()
