import numpy as np
import pandas as pd
import pytest

from src.errors import ConfigError
from src.constants import Columns
from src.model_core import GroupSpec, LearningParams, OrderPriceModel
from src.abm import (
    InitialCondition,
    Population,
    SimConfig,
    TimeSeries,
    attraction_autocorrelation,
    binder_series,
    correlation_time,
    lifetime_estimate,
    lifetime_sweep,
    median_lifetimes,
    run_simulation,
    step_round,
)

SHARP = OrderPriceModel(sigma_a=0.0, sigma_b=0.0)
BUYER_SELLER = (GroupSpec(1.0, 0.5), GroupSpec(0.0, 0.5))


def _config(n_agents=2, groups=BUYER_SELLER, prices=SHARP, beta=100.0, r=0.1, **kwargs):
    return SimConfig(
        n_agents=n_agents,
        groups=groups,
        learning=LearningParams(r=r, beta=beta),
        prices=prices,
        **kwargs,
    )


def _population(deltas, p_buy):
    deltas = np.asarray(deltas, dtype=float)
    return Population(
        attractions=np.column_stack([deltas / 2, -deltas / 2]),
        group=np.zeros(len(deltas), dtype=int),
        p_buy=np.asarray(p_buy, dtype=float),
    )


def test_buyer_and_seller_trade_at_the_biased_price():
    population = _population([1.0, 1.0], [1.0, 0.0])
    outcome = step_round(population, _config(), np.random.default_rng(0))
    assert outcome.prices[1] == pytest.approx(0.3)
    assert outcome.trades[1] == 1
    np.testing.assert_allclose(outcome.scores, [0.7, 0.3])
    np.testing.assert_allclose(population.attractions[:, 0], [0.45 + 0.07, 0.45 + 0.03])
    np.testing.assert_allclose(population.attractions[:, 1], [-0.45, -0.45])


def test_traders_alone_in_their_markets_score_nothing():
    population = _population([1.0, -1.0], [1.0, 0.0])
    outcome = step_round(population, _config(), np.random.default_rng(0))
    assert np.isnan(outcome.prices[1]) and np.isnan(outcome.prices[-1])
    np.testing.assert_array_equal(outcome.scores, [0.0, 0.0])
    np.testing.assert_allclose(population.delta, [0.9, -0.9])


def test_surplus_buyer_is_left_without_a_trade():
    population = _population([1.0, 1.0, 1.0], [1.0, 1.0, 0.0])
    config = _config(n_agents=3)
    outcome = step_round(population, config, np.random.default_rng(5))
    assert outcome.trades[1] == 1
    assert sorted(outcome.scores[:2].tolist()) == pytest.approx([0.0, 0.7])
    assert outcome.scores[2] == pytest.approx(0.3)


def test_matched_orders_conserve_counts():
    rng = np.random.default_rng(42)
    size = 500
    population = _population(rng.normal(0, 0.2, size), rng.random(size))
    outcome = step_round(population, _config(n_agents=size, prices=OrderPriceModel(), beta=2.0), rng)
    assert np.all(outcome.scores >= 0)
    for m in (1, -1):
        inside = outcome.choices == m
        buyers = np.sum(inside & outcome.buys & (outcome.scores > 0))
        sellers = np.sum(inside & ~outcome.buys & (outcome.scores > 0))
        assert buyers == sellers == outcome.trades[m]
        assert outcome.trades[m] <= min(outcome.valid_buys[m], outcome.valid_sells[m])
        assert outcome.buy_orders[m] + outcome.sell_orders[m] == inside.sum()


def test_scores_are_invariant_under_price_shifts():
    deltas, p_buy = np.linspace(-0.5, 0.5, 200), np.full(200, 0.6)
    results = []
    for shift in (0.0, 3.0):
        prices = OrderPriceModel(mu_a=shift, mu_b=1.0 + shift)
        config = _config(n_agents=200, prices=prices, beta=2.0)
        outcome = step_round(_population(deltas, p_buy), config, np.random.default_rng(9))
        results.append(outcome)
    np.testing.assert_allclose(results[0].scores, results[1].scores, atol=1e-9)
    assert results[1].prices[1] == pytest.approx(results[0].prices[1] + 3.0)


def test_indifferent_agents_split_evenly():
    size = 20_000
    population = _population(np.zeros(size), np.full(size, 0.5))
    outcome = step_round(population, _config(n_agents=size, beta=0.0), np.random.default_rng(1))
    share = np.mean(outcome.choices == 1)
    assert abs(share - 0.5) < 4 * np.sqrt(0.25 / size)


def test_group_sizes_use_largest_remainder():
    assert _config(n_agents=5).group_sizes() == [3, 2]
    groups = (GroupSpec(0.8, 0.25), GroupSpec(0.2, 0.75))
    assert _config(n_agents=10, groups=groups).group_sizes() == [3, 7]


def test_sim_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        _config(n_agents=1)
    with pytest.raises(ConfigError):
        _config(stride=0)
    with pytest.raises(ConfigError):
        InitialCondition(kind="uniform")


def test_runs_are_reproducible():
    config = _config(
        n_agents=40,
        groups=(GroupSpec(0.8, 0.5), GroupSpec(0.2, 0.5)),
        prices=OrderPriceModel(),
        beta=4.0,
        r=0.05,
        seed=7,
        rounds=200,
        stride=10,
        snapshot_every=100,
    )
    first, second = run_simulation(config), run_simulation(config)
    pd.testing.assert_frame_equal(first.series.frame, second.series.frame)
    pd.testing.assert_frame_equal(first.snapshots, second.snapshots)
    assert len(first.series.frame) == 2 * 21
    assert sorted(first.snapshots[Columns.TIME].unique()) == pytest.approx([0.0, 5.0, 10.0])


def test_different_seeds_diverge():
    base = dict(
        n_agents=40, groups=(GroupSpec(0.8, 0.5), GroupSpec(0.2, 0.5)),
        prices=OrderPriceModel(), beta=4.0, r=0.05, rounds=50,
    )
    first = run_simulation(_config(seed=1, **base)).series.frame
    second = run_simulation(_config(seed=2, **base)).series.frame
    assert not first[Columns.MEAN_DELTA].equals(second[Columns.MEAN_DELTA])


def test_binder_series_of_a_split_group():
    snapshots = pd.DataFrame(
        {
            Columns.TIME: [0.0] * 4 + [1.0] * 4,
            Columns.GROUP: 0,
            Columns.AGENT: list(range(4)) * 2,
            Columns.DELTA: [-0.4, 0.4, -0.4, 0.4, 0.2, 0.2, 0.2, 0.2],
        }
    )
    series = binder_series(snapshots, r=0.1)
    assert series.frame[Columns.BINDER].tolist() == pytest.approx([2 / 3, 2 / 3])
    assert series.stride == 10


def test_binder_series_needs_two_agents():
    snapshots = pd.DataFrame(
        {Columns.TIME: [0.0], Columns.GROUP: [0], Columns.AGENT: [0], Columns.DELTA: [0.1]}
    )
    with pytest.raises(ConfigError):
        binder_series(snapshots)


def _series(binder):
    times = np.arange(len(binder), dtype=float)
    frame = pd.DataFrame(
        {Columns.TIME: times, Columns.GROUP: 0, Columns.BINDER: binder}
    )
    return TimeSeries(frame, stride=1, r=1.0)


def test_lifetime_ends_at_the_escape():
    binder = np.r_[np.full(50, 0.6), np.zeros(51)]
    assert lifetime_estimate(_series(binder), [0.6], [[0.0]], dwell=10.0) == (50.0, False)


def test_brief_excursions_do_not_count():
    binder = np.full(101, 0.6)
    binder[30:35] = 0.0
    lifetime, censored = lifetime_estimate(_series(binder), [0.6], [[0.0]], dwell=10.0)
    assert censored
    assert lifetime == 100.0


def test_runs_that_never_fragment_have_zero_lifetime():
    assert lifetime_estimate(_series(np.zeros(20)), [0.6], [[0.0]]) == (0.0, False)


def test_lifetime_targets_must_match_groups():
    with pytest.raises(ConfigError):
        lifetime_estimate(_series(np.zeros(5)), [0.6, 0.6], [[0.0]])


def test_autocorrelation_starts_at_the_variance():
    rng = np.random.default_rng(3)
    values = rng.normal(0.0, 0.3, (5, 50))
    snapshots = pd.DataFrame(
        {
            Columns.TIME: np.repeat(np.arange(5.0), 50),
            Columns.GROUP: 0,
            Columns.AGENT: np.tile(np.arange(50), 5),
            Columns.DELTA: values.ravel(),
        }
    )
    curve = attraction_autocorrelation(snapshots, origin=1.0)
    assert curve[Columns.LAG].tolist() == [0.0, 1.0, 2.0, 3.0]
    assert curve[Columns.CORRELATION].iloc[0] == pytest.approx(values[1].var())
    with pytest.raises(ConfigError):
        attraction_autocorrelation(snapshots, origin=10.0)


def test_correlation_time_is_the_e_folding_lag():
    lags = np.arange(21, dtype=float)
    curve = pd.DataFrame({Columns.LAG: lags, Columns.CORRELATION: np.exp(-lags / 5.0)})
    assert correlation_time(curve) == 6.0
    flat = curve.assign(**{Columns.CORRELATION: 1.0})
    assert np.isnan(correlation_time(flat))


def test_lifetime_sweep_is_independent_of_workers():
    configs = [
        _config(
            n_agents=10,
            groups=(GroupSpec(0.8, 0.5), GroupSpec(0.2, 0.5)),
            prices=OrderPriceModel(),
            beta=6.0,
            r=0.1,
            seed=seed,
            rounds=100,
        )
        for seed in (1, 2, 3)
    ]
    targets = ([2 / 3, 2 / 3], [[0.0], [0.0]])
    serial = lifetime_sweep(configs, *targets, workers=1)
    parallel = lifetime_sweep(configs, *targets, workers=2)
    pd.testing.assert_frame_equal(serial, parallel)
    assert serial[Columns.SEED].tolist() == [1, 2, 3]

    summary = median_lifetimes(serial, Columns.N_AGENTS)
    assert len(summary) == 1
    assert summary[Columns.LIFETIME].iloc[0] == pytest.approx(serial[Columns.LIFETIME].median())
