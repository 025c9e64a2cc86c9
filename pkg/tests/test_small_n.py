import numpy as np
import pytest

from src.errors import ConfigError
from src.constants import Columns, FixedPointClass
from src.small_n import (
    FourPlayerState,
    TwoPlayerState,
    classify_four_player,
    coordination_threshold,
    four_player_fixed_points,
    four_player_flow,
    four_player_thresholds,
    two_player_fixed_points,
    two_player_flow,
    two_player_flow_field,
    two_player_returns,
    two_player_stability,
    two_player_trajectory,
    uncoordinated_rho,
)


def test_two_player_flow_examples():
    assert two_player_flow(TwoPlayerState(0.0, 0.0), 7.0, 0.5) == pytest.approx((0.0, 0.0))
    assert two_player_flow(TwoPlayerState(0.0, 0.0), 2.0, 0.3) == pytest.approx((0.0, 0.1))
    _, d_rho = two_player_flow(TwoPlayerState(0.2, 0.0), 3.0, 0.5)
    assert d_rho == pytest.approx(0.0)


def test_two_player_flow_rejects_bad_theta():
    with pytest.raises(ConfigError):
        two_player_flow(TwoPlayerState(0.0, 0.0), 2.0, 1.3)


def test_single_uncoordinated_fixed_point_at_low_beta():
    records = two_player_fixed_points(2.0, 0.3)
    assert len(records) == 1
    (record,) = records
    assert record.state.xi == pytest.approx(0.0, abs=1e-8)
    assert record.state.rho == pytest.approx(0.0991, abs=1e-3)
    assert record.state.rho == pytest.approx(uncoordinated_rho(2.0, 0.3), abs=1e-8)
    assert record.kind == FixedPointClass.UNCOORDINATED
    assert record.stable


def test_coordinated_fixed_points_appear_above_threshold():
    records = two_player_fixed_points(6.0, 0.3)
    assert len(records) == 3
    coordinated = [r for r in records if r.kind == FixedPointClass.COORDINATED]
    assert len(coordinated) == 2
    assert all(r.stable for r in coordinated)
    assert coordinated[0].state.xi == pytest.approx(-coordinated[1].state.xi, abs=1e-6)
    (uncoordinated,) = [r for r in records if r.kind == FixedPointClass.UNCOORDINATED]
    assert not uncoordinated.stable


def test_fixed_points_have_zero_flow():
    for record in two_player_fixed_points(6.0, 0.3, 0.9):
        flow = two_player_flow(record.state, 6.0, 0.3, 0.9)
        assert max(abs(v) for v in flow) <= 1e-8


def test_unbiased_markets_have_origin_as_only_fixed_point():
    (record,) = two_player_fixed_points(2.0, 0.5)
    assert (record.state.xi, record.state.rho) == pytest.approx((0.0, 0.0), abs=1e-8)


def test_coordination_threshold_values():
    assert coordination_threshold(0.5) == pytest.approx(4.0, abs=1e-6)
    assert coordination_threshold(0.3) == pytest.approx(4.16, abs=0.02)
    assert coordination_threshold(0.3, 0.8) > coordination_threshold(0.3, 1.0)


def test_indecisive_unbiased_threshold_doubles():
    assert two_player_stability(7.99, 0.5, 0.5, 0.0)
    assert not two_player_stability(8.01, 0.5, 0.5, 0.0)


def test_coordination_threshold_rejects_out_of_range_inputs():
    with pytest.raises(ConfigError):
        coordination_threshold(0.7)
    with pytest.raises(ConfigError):
        coordination_threshold(0.3, 0.5)


def test_stability_matches_threshold():
    beta_c = coordination_threshold(0.3)
    below, above = beta_c - 0.05, beta_c + 0.05
    assert two_player_stability(below, 0.3, 1.0, uncoordinated_rho(below, 0.3))
    assert not two_player_stability(above, 0.3, 1.0, uncoordinated_rho(above, 0.3))


def test_uncoordinated_return_at_vanishing_beta():
    (record,) = two_player_fixed_points(1e-4, 0.3)
    assert record.avg_return == pytest.approx(0.25, abs=1e-6)


def test_coordinated_returns_at_high_beta():
    records = two_player_fixed_points(100.0, 0.3)
    coordinated = [r for r in records if r.kind == FixedPointClass.COORDINATED and r.stable]
    assert coordinated
    for record in coordinated:
        returns = sorted(two_player_returns(record.state, 100.0, 0.3))
        assert returns == pytest.approx([0.3, 0.7], abs=1e-3)


def test_flow_field_layout():
    frame = two_player_flow_field(6.0, 0.3, points=5)
    assert list(frame.columns) == [Columns.XI, Columns.RHO, Columns.D_XI, Columns.D_RHO]
    assert len(frame) == 25
    row = frame[(frame[Columns.XI] == 0.0) & (frame[Columns.RHO] == 0.5)].iloc[0]
    expected = two_player_flow(TwoPlayerState(0.0, 0.5), 6.0, 0.3)
    assert (row[Columns.D_XI], row[Columns.D_RHO]) == pytest.approx(expected)


def test_trajectory_approaches_a_stable_fixed_point():
    path = two_player_trajectory(TwoPlayerState(0.3, 0.0), 6.0, 0.3, t_max=40.0)
    end = path.iloc[-1]
    targets = [r.state for r in two_player_fixed_points(6.0, 0.3) if r.stable]
    distance = min(abs(end[Columns.XI] - s.xi) + abs(end[Columns.RHO] - s.rho) for s in targets)
    assert distance < 1e-4


def test_four_player_flow_vanishes_at_full_symmetry():
    derivative = four_player_flow(FourPlayerState(np.zeros((2, 2))), 5.0, 0.5)
    np.testing.assert_allclose(derivative.delta, 0.0, atol=1e-14)


def test_four_player_flow_keeps_groups_symmetric():
    state = FourPlayerState(np.array([[0.2, 0.2], [-0.1, -0.1]]))
    derivative = four_player_flow(state, 5.0, 0.3)
    assert derivative.delta[0, 0] == pytest.approx(derivative.delta[0, 1])
    assert derivative.delta[1, 0] == pytest.approx(derivative.delta[1, 1])


def test_four_player_state_rejects_non_finite_values():
    with pytest.raises(ValueError):
        FourPlayerState(np.array([[np.nan, 0.0], [0.0, 0.0]]))


@pytest.mark.parametrize(
    "delta, expected",
    [
        ([[0.5, -0.5], [0.5, -0.5]], FixedPointClass.FRAGMENTED),
        ([[0.5, -0.5], [0.1, 0.1]], FixedPointClass.PARTIALLY_FRAGMENTED),
        ([[0.5, 0.5], [0.4, 0.4]], FixedPointClass.COORDINATED),
        ([[0.1, 0.1], [-0.1, -0.1]], FixedPointClass.UNCOORDINATED),
    ],
)
def test_classify_four_player(delta, expected):
    assert classify_four_player(np.array(delta)) == expected


@pytest.mark.slow
def test_four_player_structure_at_high_beta():
    records = four_player_fixed_points(100.0, 0.3)
    stable = [r for r in records if r.stable]
    fragmented = [r for r in stable if r.kind == FixedPointClass.FRAGMENTED]
    coordinated = [r for r in stable if r.kind == FixedPointClass.COORDINATED]
    assert len(fragmented) == 4
    assert len(coordinated) == 2
    for record in fragmented + coordinated:
        assert record.avg_return == pytest.approx(coordinated[0].avg_return, abs=1e-3)
    partial = [r for r in records if r.kind == FixedPointClass.PARTIALLY_FRAGMENTED]
    assert not any(r.stable for r in partial)


def test_four_player_thresholds_reject_unknown_parameter():
    with pytest.raises(ConfigError):
        four_player_thresholds("beta", [1.0])


@pytest.mark.slow
def test_four_player_thresholds_rise_as_markets_become_biased():
    frame = four_player_thresholds(Columns.THETA, [0.5, 0.3], scan_points=12, tolerance=0.05)
    coordination = frame[frame[Columns.KIND] == "coordination"].set_index(Columns.VALUE)
    assert not frame[Columns.FAILED].any()
    assert coordination.loc[0.3, Columns.BETA] > coordination.loc[0.5, Columns.BETA]


@pytest.mark.parametrize("p_buy", [1.0, 0.8])
def test_relabeling_markets_maps_two_player_fixed_points(p_buy):
    original = two_player_fixed_points(6.0, 0.3, p_buy)
    relabeled = two_player_fixed_points(6.0, 0.7, p_buy)
    assert len(original) == len(relabeled)
    targets = np.array([r.state.as_array() for r in relabeled])
    for record in original:
        distance = np.max(np.abs(targets + record.state.as_array()), axis=1)
        assert distance.min() < 1e-6
        assert relabeled[int(distance.argmin())].stable == record.stable


def test_relabeling_markets_reverses_the_four_player_flow():
    rng = np.random.default_rng(4)
    for _ in range(5):
        delta = rng.uniform(-1.0, 1.0, (2, 2))
        forward = four_player_flow(FourPlayerState(delta), 7.0, 0.3, 0.9).delta
        mirrored = four_player_flow(FourPlayerState(-delta), 7.0, 0.7, 0.9).delta
        np.testing.assert_allclose(mirrored, -forward, atol=1e-10)


@pytest.mark.slow
def test_relabeling_markets_maps_four_player_fixed_points():
    original = four_player_fixed_points(8.0, 0.3)
    relabeled = four_player_fixed_points(8.0, 0.7)
    assert len(original) == len(relabeled)
    targets = np.array([r.state.as_array() for r in relabeled])
    for record in original:
        distance = np.max(np.abs(targets + record.state.as_array()), axis=1)
        assert distance.min() < 1e-6
        assert relabeled[int(distance.argmin())].stable == record.stable


@pytest.mark.slow
def test_four_player_thresholds_rise_as_preferences_even_out():
    frame = four_player_thresholds(
        Columns.P_BUY, [1.0, 0.8], theta=0.3, scan_points=12, tolerance=0.05
    )
    assert not frame[Columns.FAILED].any()
    for kind in ("coordination", "fragmentation"):
        onset = frame[frame[Columns.KIND] == kind].set_index(Columns.VALUE)[Columns.BETA]
        assert np.isfinite(onset.loc[1.0])
        assert onset.loc[0.8] > onset.loc[1.0]
