# services/planner.py - Exhaustive search over legal kernel decompositions
import logging
from dataclasses import dataclass, field
from typing import List, Tuple

from config import (
    DEFAULT_SELECTION_KERNEL,
    FLOP_INPUT_SIZE,
    SEARCH_KERNEL_CANDIDATES,
    SEARCH_MAX_BRANCHES,
    SEARCH_MAX_KERNEL,
    SEARCH_MAX_RF,
    COMPARISON_CHANNELS,
)
from services.cost_model import CostReport, cost_of_plan
from services.decomposition import DecompositionPlan, validate_plan
from utils.errors import require
from utils.helpers import run_parallel

logger = logging.getLogger()

MIN_PARAMS = "min_params"
MIN_FLOPS = "min_flops"
OBJECTIVES = (MIN_PARAMS, MIN_FLOPS)


@dataclass(frozen=True)
class SearchQuery:
    target_rf: int
    max_branches: int = SEARCH_MAX_BRANCHES
    k_candidates: Tuple[int, ...] = SEARCH_KERNEL_CANDIDATES
    objective: str = MIN_PARAMS
    channels: int = COMPARISON_CHANNELS
    spatial: Tuple[int, int] = (FLOP_INPUT_SIZE, FLOP_INPUT_SIZE)
    branch_channels: int = None
    selection_kernel: int = DEFAULT_SELECTION_KERNEL
    max_kernel: int = SEARCH_MAX_KERNEL
    max_rf: int = SEARCH_MAX_RF

    def __post_init__(self):
        candidates = tuple(sorted(set(int(k) for k in self.k_candidates)))
        object.__setattr__(self, "k_candidates", candidates)
        require(len(candidates) >= 1, "k_candidates must not be empty")
        require(all(k >= 1 and k % 2 == 1 for k in candidates), f"k_candidates must be odd positive integers, got {candidates}")
        require(
            candidates[-1] <= self.max_kernel,
            f"k_candidates exceed the kernel cap {self.max_kernel}: {candidates}",
        )
        require(self.max_branches >= 1, f"max_branches must be >= 1, got {self.max_branches}")
        require(self.objective in OBJECTIVES, f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        require(
            self.target_rf >= candidates[0],
            f"target_rf={self.target_rf} must be >= min(k_candidates)={candidates[0]}",
        )
        require(self.target_rf <= self.max_rf, f"target_rf={self.target_rf} exceeds the RF cap {self.max_rf}")
        require(self.channels >= 1, f"channels must be positive, got {self.channels}")

    def to_dict(self):
        return {
            "target_rf": self.target_rf,
            "max_branches": self.max_branches,
            "k_candidates": list(self.k_candidates),
            "objective": self.objective,
            "channels": self.channels,
            "spatial": list(self.spatial),
            "branch_channels": self.branch_channels,
            "selection_kernel": self.selection_kernel,
        }


@dataclass(frozen=True)
class RankedPlan:
    plan: DecompositionPlan
    cost: CostReport

    def to_dict(self):
        return {
            "plan": [list(pair) for pair in self.plan.pairs()],
            "branches": len(self.plan),
            "rf": self.plan.rf[-1],
            "params_with_bias": self.cost.params_with_bias,
            "params_without_bias": self.cost.params_without_bias,
            "flops": self.cost.flops,
        }


@dataclass(frozen=True)
class SearchResult:
    query: SearchQuery
    ranked: Tuple[RankedPlan, ...] = field(default_factory=tuple)

    @property
    def empty(self):
        return not self.ranked

    def to_dict(self):
        return {
            "query": self.query.to_dict(),
            "empty": self.empty,
            "results": [entry.to_dict() for entry in self.ranked],
        }


def _extend(prefix, rf, query: SearchQuery, out: List[Tuple[Tuple[int, int], ...]]):
    """Depth-first growth of a legal chain; RF never decreases, so overshoot prunes."""
    if rf == query.target_rf:
        out.append(prefix)
    if len(prefix) == query.max_branches:
        return
    k_prev, d_prev = prefix[-1]
    for k in query.k_candidates:
        if k < k_prev or k == 1:
            continue
        for d in range(d_prev + 1, rf + 1):
            grown = d * (k - 1) + rf
            if grown > query.target_rf:
                break
            _extend(prefix + ((k, d),), grown, query, out)


def _plans_from(first_k, query: SearchQuery):
    plans = []
    _extend(((first_k, 1),), first_k, query, plans)
    return plans


def enumerate_plans(query: SearchQuery):
    """Every legal chain with RF exactly target_rf, grouped by first kernel."""
    firsts = [k for k in query.k_candidates if k <= query.target_rf]
    groups = run_parallel(lambda k: _plans_from(k, query), firsts)
    return [plan for group in groups for plan in group]


def _objective(entry: RankedPlan, objective):
    value = entry.cost.params_with_bias if objective == MIN_PARAMS else entry.cost.flops
    return (value, len(entry.plan), entry.plan.pairs())


def search_decompositions(query: SearchQuery) -> SearchResult:
    ranked = []
    for pairs in enumerate_plans(query):
        # Generation already respects the constraints; this keeps results closed under validation
        if validate_plan(pairs):
            continue
        plan = DecompositionPlan.of(pairs)
        cost = cost_of_plan(
            plan,
            query.channels,
            query.spatial,
            branch_channels=query.branch_channels,
            selection_kernel=query.selection_kernel,
        )
        ranked.append(RankedPlan(plan=plan, cost=cost))
    ranked.sort(key=lambda entry: _objective(entry, query.objective))
    result = SearchResult(query=query, ranked=tuple(ranked))
    if result.empty:
        logger.warning(f"No legal decomposition reaches RF {query.target_rf} within {query.max_branches} branches")
    else:
        logger.info(f"Search for RF {query.target_rf}: {len(ranked)} legal plans")
    return result
