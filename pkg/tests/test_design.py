import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beacon.design import (BudgetExhausted, Mask, WellDesignState, apply_mask, design_gradient, inclusion_probs,
                           sample_mask, select_well, softmax)


def test_uniform_probs():
    pr = inclusion_probs(WellDesignState.uniform(4, budget=1))
    np.testing.assert_allclose(pr.p, 0.25)
    assert not pr.clip_active.any()


def test_probs_hand_case_with_clipping():
    # w = (1/2, 1/6, 1/6, 1/6); s = 2 -> p = (1, 1/3, 1/3, 1/3)
    pr = inclusion_probs(WellDesignState(np.array([np.log(3.0), 0, 0, 0]), budget=2))
    np.testing.assert_allclose(pr.w, [0.5, 1 / 6, 1 / 6, 1 / 6])
    np.testing.assert_allclose(pr.p, [1.0, 1 / 3, 1 / 3, 1 / 3])
    np.testing.assert_array_equal(pr.clip_active, [True, False, False, False])


def test_higher_weight_means_higher_probability():
    pr = inclusion_probs(WellDesignState(np.array([2.0, 1.0, 0.0]), budget=1))
    assert pr.p[0] > pr.p[1] > pr.p[2]


def test_budget_equal_to_candidates_selects_all():
    pr = inclusion_probs(WellDesignState.uniform(5, budget=5))
    np.testing.assert_allclose(pr.p, 1.0)


def test_softmax_stable():
    w = softmax(np.array([1000.0, 1000.0]))
    np.testing.assert_allclose(w, [0.5, 0.5])


@pytest.mark.parametrize("budget", [1, 3])
def test_expected_active_count_binomial(budget):
    rng = np.random.default_rng(0)
    logits = 0.3 * rng.standard_normal(32)
    pr = inclusion_probs(WellDesignState(logits, budget=budget))
    assert not pr.clip_active.any()
    counts = np.array([sample_mask(pr, [], rng).columns.sum() for _ in range(10_000)])
    sigma = np.sqrt(np.sum(pr.p * (1 - pr.p)) / counts.size)
    assert abs(counts.mean() - budget) <= 3 * sigma


def test_drilled_always_present():
    pr = inclusion_probs(WellDesignState(np.array([5.0, -30, -30, -30]), budget=1, drilled=[2]))
    rng = np.random.default_rng(1)
    for _ in range(500):
        m = sample_mask(pr, [2], rng, rows=3)
        assert m.columns[2] == 1
        assert m.field[:, 2].all()


def test_mask_field_and_apply():
    m = Mask.from_columns(3, 2, [0, 2])
    y = np.arange(6.0).reshape(2, 3) + 1
    c = apply_mask(m, y)
    np.testing.assert_array_equal(c.mask, [[1, 0, 1], [1, 0, 1]])
    np.testing.assert_array_equal(c.masked_obs, [[1, 0, 3], [4, 0, 6]])
    with pytest.raises(ValueError):
        apply_mask(m, np.zeros((3, 3)))


def test_state_validation():
    with pytest.raises(ValueError):
        WellDesignState(np.zeros(3), budget=0)
    with pytest.raises(ValueError):
        WellDesignState(np.zeros(3), drilled=[1, 1])
    with pytest.raises(ValueError):
        WellDesignState(np.zeros(3), drilled=[3])


def test_select_well_argmax_and_ties():
    assert select_well(WellDesignState(np.array([0.0, 2.0, 1.0]))) == 1
    assert select_well(WellDesignState(np.array([0.0, 2.0, 1.0]), drilled=[1])) == 2
    assert select_well(WellDesignState(np.zeros(4))) == 0
    with pytest.raises(BudgetExhausted, match="budget exhausted"):
        select_well(WellDesignState(np.zeros(2), drilled=[0, 1]))


def test_design_gradient_chain_matches_fd():
    rng = np.random.default_rng(3)
    logits = 0.2 * rng.standard_normal(5)
    c = rng.standard_normal(5)
    rows = 2
    y = rng.standard_normal((rows, 5))
    mask = Mask(np.ones(5, dtype=np.int8), rows)

    def p_of(l):
        return inclusion_probs(WellDesignState(l, budget=2)).p

    # L = sum_c c_c * p_c routed through the masked-observation channel
    gmo = np.repeat(c[None, :], rows, axis=0) / (rows * y)
    g = design_gradient(gmo, np.zeros((rows, 5)), y, inclusion_probs(WellDesignState(logits, budget=2)), mask)
    for i in range(5):
        e = np.zeros(5)
        e[i] = 1e-6
        fd = (c @ p_of(logits + e) - c @ p_of(logits - e)) / 2e-6
        assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_design_gradient_zero_for_clipped_and_drilled():
    pr = inclusion_probs(WellDesignState(np.array([np.log(3.0), 0, 0, 0]), budget=2))
    mask = Mask(np.ones(4, dtype=np.int8), 1, frozenset([1]))
    ones = np.ones((1, 4))
    g_direct = design_gradient(np.zeros((1, 4)), np.array([[1.0, 1.0, 0, 0]]), ones, pr, mask)
    # only clipped column 0 and drilled column 1 received signal, so nothing passes
    np.testing.assert_allclose(g_direct, 0.0, atol=1e-15)


def test_design_gradient_sums_to_zero():
    rng = np.random.default_rng(0)
    pr = inclusion_probs(WellDesignState(rng.standard_normal(6), budget=1))
    g = design_gradient(rng.standard_normal((3, 6)), rng.standard_normal((3, 6)), rng.standard_normal((3, 6)),
                        pr, Mask(np.ones(6, dtype=np.int8), 3))
    # softmax logits are shift invariant
    assert abs(g.sum()) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=40), st.integers(1, 8))
def test_probs_valid_property(logits, budget):
    pr = inclusion_probs(WellDesignState(np.array(logits), budget=budget))
    assert np.all(pr.p >= 0) and np.all(pr.p <= 1)
    assert pr.w.sum() == pytest.approx(1.0, abs=1e-12)
    assert pr.p.sum() <= budget + 1e-9
