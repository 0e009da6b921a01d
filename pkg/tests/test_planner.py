import itertools

import pytest

from services.cost_model import cost_of_plan
from services.decomposition import validate_plan
from services.planner import MIN_FLOPS, MIN_PARAMS, SearchQuery, enumerate_plans, search_decompositions
from utils.errors import ContractViolation
from utils.helpers import set_thread_count


def brute_force(target_rf, max_branches, candidates):
    """Every legal chain reaching target_rf, by plain itertools enumeration."""
    # d (k - 1) <= target_rf - 1 bounds every dilation
    dilations = range(1, (target_rf - 1) // 2 + 1)
    found = []
    for length in range(1, max_branches + 1):
        for kernels in itertools.product(candidates, repeat=length):
            for steps in itertools.product(dilations, repeat=length):
                rf = kernels[0] + sum(d * (k - 1) for k, d in zip(kernels[1:], steps[1:]))
                pairs = tuple(zip(kernels, steps))
                if rf == target_rf and not validate_plan(pairs):
                    found.append(pairs)
    return found


class TestSearch:
    def test_rf23_two_branches(self):
        result = search_decompositions(SearchQuery(target_rf=23, max_branches=2, k_candidates=(3, 5, 7)))
        plans = [entry.plan.pairs() for entry in result.ranked]
        assert ((5, 1), (7, 3)) in plans
        assert all(len(plan) <= 2 for plan in plans)

    def test_rf3_single_branch(self):
        result = search_decompositions(SearchQuery(target_rf=3, max_branches=1, k_candidates=(3, 5, 7)))
        assert [entry.plan.pairs() for entry in result.ranked] == [((3, 1),)]

    def test_rf29_matches_brute_force(self):
        query = SearchQuery(target_rf=29, max_branches=3, k_candidates=(3, 5, 7, 9))
        result = search_decompositions(query)
        oracle = brute_force(29, 3, (3, 5, 7, 9))
        assert sorted(entry.plan.pairs() for entry in result.ranked) == sorted(oracle)

        def key(pairs):
            report = cost_of_plan(pairs, 64)
            return (report.params_with_bias, len(pairs), pairs)

        assert result.ranked[0].plan.pairs() == min(oracle, key=key)

    def test_ranking_is_sorted(self):
        result = search_decompositions(SearchQuery(target_rf=23, max_branches=3))
        values = [entry.cost.params_with_bias for entry in result.ranked]
        assert values == sorted(values)

    def test_flops_objective(self):
        query = SearchQuery(target_rf=23, max_branches=3, objective=MIN_FLOPS, spatial=(64, 64))
        values = [entry.cost.flops for entry in search_decompositions(query).ranked]
        assert values == sorted(values)

    def test_results_are_legal(self):
        for target in (5, 11, 19, 29, 39):
            result = search_decompositions(SearchQuery(target_rf=target, max_branches=3))
            for entry in result.ranked:
                assert validate_plan(entry.plan.pairs()) == []
                assert entry.plan.rf[-1] == target

    def test_unreachable_target_is_flagged(self):
        # even receptive fields are impossible with odd kernels
        result = search_decompositions(SearchQuery(target_rf=8, max_branches=3, k_candidates=(3, 5)))
        assert result.empty
        assert result.to_dict()["empty"] is True

    def test_serial_and_parallel_agree(self, parallel):
        query = SearchQuery(target_rf=31, max_branches=3)
        threaded = [entry.plan.pairs() for entry in search_decompositions(query).ranked]
        set_thread_count(1)
        assert [entry.plan.pairs() for entry in search_decompositions(query).ranked] == threaded

    def test_enumeration_has_no_duplicates(self):
        plans = enumerate_plans(SearchQuery(target_rf=29, max_branches=4, k_candidates=(3, 5, 7)))
        assert len(plans) == len(set(plans))


class TestQuery:
    @pytest.mark.parametrize(
        "settings",
        [
            {"target_rf": 23, "k_candidates": (3, 4)},
            {"target_rf": 23, "k_candidates": ()},
            {"target_rf": 23, "k_candidates": (33,)},
            {"target_rf": 23, "max_branches": 0},
            {"target_rf": 23, "objective": "min_latency"},
            {"target_rf": 1, "k_candidates": (3, 5)},
            {"target_rf": 65},
        ],
    )
    def test_rejected(self, settings):
        with pytest.raises(ContractViolation):
            SearchQuery(**settings)

    def test_candidates_sorted_and_deduplicated(self):
        assert SearchQuery(target_rf=11, k_candidates=(7, 3, 3, 5)).k_candidates == (3, 5, 7)

    def test_to_dict(self):
        data = search_decompositions(SearchQuery(target_rf=11, max_branches=2, objective=MIN_PARAMS)).to_dict()
        assert data["query"]["target_rf"] == 11
        assert data["results"][0]["rf"] == 11
