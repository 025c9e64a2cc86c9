import math

import numpy as np
import pytest
from scipy import integrate, stats

from src.errors import ConfigError
from src.model_core import (
    GroupSpec,
    LearningParams,
    MarketSpec,
    OrderPriceModel,
    check_group_weights,
    choice_probability,
    execution_probs,
    expected_price,
    expected_scores,
    market_conditions,
    market_score_curve,
    partial_return_moments,
    softmax_pair,
    validity_probs,
)


@pytest.mark.parametrize(
    "theta, mu_a, mu_b, expected",
    [(0.3, 0.0, 1.0, 0.3), (0.5, 0.0, 1.0, 0.5), (0.7, 1.0, 2.0, 1.7)],
)
def test_expected_price(theta, mu_a, mu_b, expected):
    prices = OrderPriceModel(mu_a=mu_a, mu_b=mu_b)
    assert expected_price(MarketSpec(theta), prices) == pytest.approx(expected)


def test_validity_probs_match_gaussian_tails(prices):
    q_buy, q_sell = validity_probs(MarketSpec(0.3), prices)
    assert q_buy == pytest.approx(stats.norm.cdf(0.7), abs=1e-12)
    assert q_sell == pytest.approx(stats.norm.cdf(0.3), abs=1e-12)
    assert q_buy == pytest.approx(0.7580, abs=1e-4)
    assert q_sell == pytest.approx(0.6179, abs=1e-4)

    q_buy, q_sell = validity_probs(MarketSpec(0.5), prices)
    assert q_buy == pytest.approx(q_sell)
    assert q_buy == pytest.approx(0.6915, abs=1e-4)


def test_validity_is_one_half_when_price_equals_mean_bid(prices):
    q_buy, _ = validity_probs(MarketSpec(1.0), prices)
    assert q_buy == pytest.approx(0.5)


def test_validity_becomes_a_step_without_spread():
    prices = OrderPriceModel(sigma_a=0.0, sigma_b=0.0)
    assert validity_probs(MarketSpec(0.3), prices) == (1.0, 1.0)


@pytest.mark.parametrize(
    "q_buy, q_sell, d, expected",
    [
        (0.5, 0.5, 1.0, (1.0, 1.0)),
        (0.5, 0.5, 4.0, (0.25, 1.0)),
        (0.7580, 0.6179, 4.0, (0.2038, 1.0)),
    ],
)
def test_execution_probs(q_buy, q_sell, d, expected):
    t_buy, t_sell = execution_probs(q_buy, q_sell, d)
    assert t_buy == pytest.approx(expected[0], abs=1e-4)
    assert t_sell == pytest.approx(expected[1], abs=1e-4)


@pytest.mark.parametrize("d", [0.1, 0.5, 1.0, 2.0, 10.0])
def test_matched_volumes_balance(d):
    q_buy, q_sell = 0.7580, 0.6179
    t_buy, t_sell = execution_probs(q_buy, q_sell, d)
    assert t_buy * q_buy * d == pytest.approx(t_sell * q_sell)
    assert max(t_buy, t_sell) == pytest.approx(1.0)


def test_execution_probs_vectorize():
    d = np.array([0.5, 1.0, 4.0])
    t_buy, t_sell = execution_probs(0.5, 0.5, d)
    np.testing.assert_allclose(t_buy, [1.0, 1.0, 0.25])
    np.testing.assert_allclose(t_sell, [0.5, 1.0, 1.0])


def test_execution_probs_reject_empty_market():
    with pytest.raises(ValueError):
        execution_probs(0.5, 0.5, 0.0)


def test_partial_moments_at_zero_mean():
    moments = partial_return_moments(0.0, 1.0)
    assert moments.m1 == pytest.approx(1.0 / math.sqrt(2.0 * math.pi), abs=1e-10)
    assert moments.m2 == pytest.approx(0.5, abs=1e-10)


def test_partial_moments_closed_form_matches_quadrature():
    moments = partial_return_moments(0.7, 1.0)
    density = stats.norm(0.7, 1.0).pdf
    m1, _ = integrate.quad(lambda s: s * density(s), 0.0, np.inf)
    m2, _ = integrate.quad(lambda s: s * s * density(s), 0.0, np.inf)
    assert moments.m1 == pytest.approx(0.8429, abs=1e-4)
    assert moments.m1 == pytest.approx(m1, rel=1e-9)
    assert moments.m2 == pytest.approx(m2, rel=1e-9)


def test_partial_moments_deterministic_limit():
    moments = partial_return_moments(0.3, 0.0)
    assert (moments.m1, moments.m2) == pytest.approx((0.3, 0.09))
    near = partial_return_moments(0.3, 1e-9)
    assert near.m1 == pytest.approx(0.3, abs=1e-8)


def test_partial_moments_vanish_deep_in_the_tail():
    moments = partial_return_moments(-8.0, 1.0)
    assert 0.0 <= moments.m1 < 1e-10
    assert 0.0 <= moments.m2 < 1e-10


def test_softmax_pair_examples():
    assert softmax_pair(3.0, 0.0) == pytest.approx((0.5, 0.5))
    assert softmax_pair(2.0, 0.5) == pytest.approx((0.7311, 0.2689), abs=1e-4)
    assert softmax_pair(np.inf, 0.5) == pytest.approx((1.0, 0.0))
    assert softmax_pair(np.inf, 0.0) == pytest.approx((0.5, 0.5))


def test_softmax_pair_is_complementary():
    delta = np.linspace(-3.0, 3.0, 61)
    for beta in (0.0, 0.5, 4.0, 1e4):
        p_plus, p_minus = softmax_pair(beta, delta)
        np.testing.assert_allclose(p_plus + p_minus, 1.0, atol=1e-15)
        assert np.all(np.isfinite(p_plus))


def test_softmax_rejects_negative_beta():
    with pytest.raises(ValueError):
        softmax_pair(-1.0, 0.2)


def test_choice_probability_of_market_minus_mirrors_plus():
    assert choice_probability(2.0, 0.4, -1) == pytest.approx(choice_probability(2.0, -0.4, 1))


def test_market_score_curve_matches_expected_scores(markets, prices):
    d_values = np.array([0.5, 1.0, 4.0])
    g_curve, h_curve = market_score_curve(markets[0], prices, 0.8, d_values)
    for index, d in enumerate(d_values):
        conditions = market_conditions(markets, prices, (d, 1.0))
        g, h = expected_scores(conditions, 0.8)
        assert g_curve[index] == pytest.approx(g[1])
        assert h_curve[index] == pytest.approx(h[1])


def test_market_conditions_accept_maps_and_pairs(markets, prices):
    by_pair = market_conditions(markets, prices, (1.1, 0.9))
    by_map = market_conditions(markets, prices, {1: 1.1, -1: 0.9})
    assert by_pair.t_buy == by_map.t_buy
    assert by_pair.d == {1: 1.1, -1: 0.9}


def test_expected_scores_mirror_across_markets(markets, prices):
    conditions = market_conditions(markets, prices, (1.0, 1.0))
    g, h = expected_scores(conditions, 0.5)
    assert g[1] == pytest.approx(g[-1])
    assert h[1] == pytest.approx(h[-1])


@pytest.mark.parametrize(
    "build",
    [
        lambda: MarketSpec(1.5),
        lambda: MarketSpec(0.3, id=2),
        lambda: OrderPriceModel(mu_a=1.0, mu_b=0.0),
        lambda: OrderPriceModel(sigma_b=-1.0),
        lambda: GroupSpec(1.2),
        lambda: LearningParams(r=0.0, beta=1.0),
        lambda: LearningParams(r=0.1, beta=-1.0),
    ],
)
def test_invalid_parameters_are_rejected(build):
    with pytest.raises(ConfigError):
        build()


def test_group_weights_must_sum_to_one():
    check_group_weights([GroupSpec(0.8, 0.5), GroupSpec(0.2, 0.5)])
    with pytest.raises(ConfigError):
        check_group_weights([GroupSpec(0.8, 0.5), GroupSpec(0.2, 0.4)])
