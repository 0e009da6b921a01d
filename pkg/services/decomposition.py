# services/decomposition.py - Kernel specs, decomposition plans and receptive-field arithmetic
"""A large depthwise kernel is replaced by a chain of (k_i, d_i) kernels.

Legal chains satisfy k_{i-1} <= k_i, d_1 = 1 and d_{i-1} < d_i <= RF_{i-1};
the receptive field follows RF_1 = k_1, RF_i = d_i (k_i - 1) + RF_{i-1}.
"""
import logging
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

from config import DEFAULT_PLAN
from utils.errors import ContractViolation, require

logger = logging.getLogger()

SERIES = "series"
PARALLEL = "parallel"
FLOWS = (SERIES, PARALLEL)


@dataclass(frozen=True, order=True)
class KernelSpec:
    k: int
    d: int

    def __post_init__(self):
        require(self.k >= 1 and self.k % 2 == 1, f"kernel size must be odd and >= 1, got k={self.k}")
        require(self.d >= 1, f"dilation must be >= 1, got d={self.d}")

    @property
    def extent(self):
        return self.d * (self.k - 1) + 1

    def as_tuple(self):
        return (self.k, self.d)


@dataclass(frozen=True)
class Violation:
    rule: str
    index: int
    message: str


def receptive_field(specs):
    """RF of the whole serial chain (specs may be KernelSpecs or (k, d) pairs)."""
    pairs = [_pair(spec) for spec in specs]
    if not pairs:
        raise ContractViolation("receptive_field needs a non-empty plan")
    return prefix_receptive_fields(pairs)[-1]


def prefix_receptive_fields(specs) -> List[int]:
    rfs = []
    for index, spec in enumerate(specs):
        k, d = _pair(spec)
        rfs.append(k if index == 0 else d * (k - 1) + rfs[-1])
    return rfs


def validate_plan(specs) -> List[Violation]:
    """Every violated decomposition constraint, with the offending index."""
    pairs = [_pair(spec) for spec in specs]
    if not pairs:
        return [Violation("non-empty", 0, "plan must contain at least one kernel")]
    violations = []
    for index, (k, d) in enumerate(pairs):
        label = index + 1
        if k < 1 or k % 2 == 0:
            violations.append(Violation("k-odd", index, f"k{label}={k} must be an odd positive integer"))
        if d < 1:
            violations.append(Violation("d-positive", index, f"d{label}={d} must be >= 1"))
    if pairs[0][1] != 1:
        violations.append(Violation("d1-equals-1", 0, f"d1={pairs[0][1]} must equal 1"))
    rfs = prefix_receptive_fields(pairs)
    for index in range(1, len(pairs)):
        (k_prev, d_prev), (k, d) = pairs[index - 1], pairs[index]
        label = index + 1
        if k_prev > k:
            violations.append(
                Violation("k-nondecreasing", index, f"k{label - 1}={k_prev} > k{label}={k}")
            )
        if not d_prev < d:
            violations.append(
                Violation("d-increasing", index, f"d{label - 1}={d_prev} must be < d{label}={d}")
            )
        if d > rfs[index - 1]:
            violations.append(
                Violation("d-within-rf", index, f"d{label}={d} > RF{label - 1}={rfs[index - 1]}")
            )
    return violations


@dataclass(frozen=True)
class DecompositionPlan:
    specs: Tuple[KernelSpec, ...]

    def __post_init__(self):
        require(len(self.specs) >= 1, "a decomposition plan needs at least one kernel")

    @classmethod
    def of(cls, pairs: Iterable[Sequence[int]]):
        specs = tuple(spec if isinstance(spec, KernelSpec) else KernelSpec(*spec) for spec in pairs)
        return cls(specs)

    @classmethod
    def default(cls):
        return cls.of(DEFAULT_PLAN)

    def __len__(self):
        return len(self.specs)

    @property
    def rf(self) -> Tuple[int, ...]:
        """Cumulative receptive field of every prefix of the serial chain."""
        return tuple(prefix_receptive_fields(self.specs))

    def branch_receptive_fields(self, flow=SERIES) -> Tuple[int, ...]:
        if flow == PARALLEL:
            return tuple(spec.extent for spec in self.specs)
        return self.rf

    def violations(self):
        return validate_plan(self.specs)

    def require_valid(self):
        violations = self.violations()
        if violations:
            details = "; ".join(v.message for v in violations)
            raise ContractViolation(f"invalid decomposition plan {self.pairs()}: {details}")
        return self

    def pairs(self):
        return tuple(spec.as_tuple() for spec in self.specs)


def _pair(spec):
    if isinstance(spec, KernelSpec):
        return spec.as_tuple()
    k, d = spec
    return int(k), int(d)
