import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import kendalltau

from loocite import SurrogateBackend, leave_group_out, loo_exact, loo_kv
from loocite.backends import CapabilityError
from loocite.context import layout_from_lengths
from loocite.core import AttributionError, BaseCache, CostRecord
from conftest import random_layout

RESP = (104, 105)


def test_additive_example():
    lay = layout_from_lengths([3, 3, 3])
    be = SurrogateBackend.additive([2.0, 0.0, 1.0], bias=-10.0)
    res = loo_exact(be, lay, RESP)
    assert res.scores.tolist() == [2.0, 0.0, 1.0]
    assert res.cost.passes == 3 and res.cost.base_passes == 1
    assert res.cost.evaluations == 4
    assert res.ranking() == [0, 2, 1]


def test_interaction_surrogate():
    # v(S) = [0 in S and 1 in S]; removing either kills the pair
    lay = layout_from_lengths([2, 2, 2])
    be = SurrogateBackend(lambda ids: float({0, 1} <= ids))
    assert loo_exact(be, lay, RESP).scores.tolist() == [1.0, 1.0, 0.0]


def brute_force_loo(value, n):
    full = frozenset(range(n))
    return [value(full) - value(full - {i}) for i in range(n)]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_matches_brute_force_on_arbitrary_value_functions(n, seed):
    table = {}
    rng = np.random.default_rng(seed)

    def value(ids):
        if ids not in table:
            table[ids] = float(rng.integers(-64, 64)) / 8.0
        return table[ids]

    lay = layout_from_lengths([3] * n, preamble=2, suffix=2)
    be = SurrogateBackend(value)
    expected = brute_force_loo(value, n)
    assert loo_exact(be, lay, RESP).scores.tolist() == expected
    assert loo_kv(be, lay, RESP).scores.tolist() == expected


@given(st.lists(st.integers(-100, 100), min_size=1, max_size=10), st.integers(-50, 50))
def test_additive_recovers_weights(ws, bias):
    lay = layout_from_lengths([2] * len(ws))
    be = SurrogateBackend.additive(ws, bias)
    assert loo_exact(be, lay, RESP).scores.tolist() == [float(w) for w in ws]


def test_constant_value_gives_zero():
    lay = layout_from_lengths([4] * 6)
    be = SurrogateBackend(lambda ids: -3.25)
    assert not loo_exact(be, lay, RESP).scores.any()


def test_single_source():
    lay = layout_from_lengths([5])
    be = SurrogateBackend(lambda ids: -1.0 if ids else -4.0)
    res = loo_exact(be, lay, RESP)
    assert res.scores.tolist() == [3.0]
    assert res.cost.passes == 1


def test_group_scores_are_sums_for_additive():
    ws = [1.0, 2.0, 4.0, 8.0, 16.0]
    lay = layout_from_lengths([2] * 5, group_sizes=[2, 3])
    be = SurrogateBackend.additive(ws)
    res = leave_group_out(be, lay, RESP)
    assert res.scores.tolist() == [3.0, 28.0]
    res = leave_group_out(be, lay, RESP, grouping=[[4], [0, 2], [1, 3]])
    assert res.scores.tolist() == [16.0, 5.0, 10.0]


@pytest.mark.parametrize("grouping", [[[0, 1], [1, 2]], [[0], [2]], [[0, 1, 2], []], [[0, 1, 2, 3]]])
def test_invalid_grouping(grouping):
    lay = layout_from_lengths([2, 2, 2])
    with pytest.raises(AttributionError):
        leave_group_out(SurrogateBackend.additive([1, 2, 3]), lay, RESP, grouping=grouping)


def test_errors():
    lay = layout_from_lengths([2, 2])
    be = SurrogateBackend.additive([1, 2])
    with pytest.raises(AttributionError):
        loo_exact(be, lay, ())
    with pytest.raises(CapabilityError):
        loo_kv(SurrogateBackend.additive([1, 2], kv=False), lay, RESP)


@pytest.mark.parametrize("n,T,pre,suf", [(1, 5, 0, 0), (4, 3, 7, 2), (9, 6, 11, 4), (16, 1, 0, 3)])
def test_token_accounting_closed_forms(n, T, pre, suf):
    lay = layout_from_lengths([T] * n, preamble=pre, suffix=suf)
    be = SurrogateBackend.additive(range(n))
    R = len(RESP)
    kv = loo_kv(be, lay, RESP).cost
    assert kv.context_tokens == T * n * (n - 1) // 2
    assert kv.uncached_tokens == T * n * (n - 1) // 2 + n * (suf + R)
    assert kv.cached_tokens == sum(pre + i * T for i in range(n))
    ex = loo_exact(be, lay, RESP).cost
    assert ex.context_tokens == T * n * (n - 1)
    assert ex.uncached_tokens == n * (pre + (n - 1) * T + suf + R)
    assert ex.cached_tokens == 0
    assert kv.base_tokens == ex.base_tokens == pre + n * T + suf + R


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 20), min_size=1, max_size=15), st.integers(0, 10), st.integers(0, 10))
def test_kv_never_bills_more(lengths, pre, suf):
    lay = layout_from_lengths(lengths, preamble=pre, suffix=suf)
    be = SurrogateBackend.additive(range(len(lengths)))
    kv, ex = loo_kv(be, lay, RESP).cost, loo_exact(be, lay, RESP).cost
    assert kv.uncached_tokens <= ex.uncached_tokens
    assert kv.uncached_tokens + kv.cached_tokens == ex.uncached_tokens
    assert kv.passes == ex.passes == len(lengths)


def test_base_cache_shares_full_context():
    lay = layout_from_lengths([2, 2, 2], group_sizes=[1, 2])
    be = SurrogateBackend.additive([1, 2, 3])
    bases = BaseCache()
    a = loo_exact(be, lay, RESP, bases=bases)
    b = leave_group_out(be, lay, RESP, bases=bases)
    assert a.cost.base_passes == 1 and b.cost.base_passes == 0


def test_cost_record_round_trip():
    lay = layout_from_lengths([2, 3])
    res = loo_kv(SurrogateBackend.additive([1, 2]), lay, RESP)
    d = res.cost.to_dict(include_time=False)
    assert "wall_ns" not in d["stages"][0]
    back = CostRecord.from_dict(res.cost.to_dict())
    assert back.uncached_tokens == res.cost.uncached_tokens and back.passes == 2


def test_reference_model_kv_matches_exact(tiny_backend, rng):
    for n in (1, 3, 7):
        lay = random_layout(rng, n)
        resp = list(b"an answer")
        a = loo_exact(tiny_backend, lay, resp)
        b = loo_kv(tiny_backend, lay, resp)
        assert np.abs(a.scores - b.scores).max() <= 1e-4
        assert b.cost.uncached_tokens < a.cost.uncached_tokens or n == 1


def test_reference_model_group_of_singletons_equals_loo(tiny_backend, rng):
    lay = random_layout(rng, 5)
    resp = list(b"ok")
    a = loo_exact(tiny_backend, lay, resp)
    b = leave_group_out(tiny_backend, lay, resp, grouping=[[i] for i in range(5)])
    assert np.array_equal(a.scores, b.scores)


def test_ranking_agreement_kv_vs_exact(tiny_backend):
    rng = np.random.default_rng(3)
    lay = random_layout(rng, 10)
    resp = list(b"stone")
    a = loo_exact(tiny_backend, lay, resp).scores
    b = loo_kv(tiny_backend, lay, resp).scores
    assert kendalltau(a, b).statistic >= 0.95
