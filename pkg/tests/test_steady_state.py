from collections import Counter

import numpy as np
import pytest
from scipy import integrate

from src.errors import ConfigError
from src.constants import Columns, Solver, StateType
from src.fokker_planck import AttractionGrid, StateClass
from src.model_core import GroupSpec, default_markets
from src.steady_state import (
    DWindow,
    PHASE_AXES,
    PhaseDiagramCell,
    PopulationModel,
    SteadyState,
    homogeneous_solver,
    market_fractions,
    maxwell_locus,
    multiplicity_threshold_r,
    order_param_map,
    phase_boundaries,
    random_choice_return,
    self_consistency_loci,
    solve_cell,
    states_to_frame,
    steady_states,
    theory_binder,
)


def _letters(types: str) -> str:
    return "".join(sorted(types.strip("()").replace(",", "")))


def _gaussian(center: float, width: float = 0.1) -> AttractionGrid:
    x = np.linspace(-1.5, 1.5, 3001)
    values = np.exp(-0.5 * ((x - center) / width) ** 2)
    values /= integrate.trapezoid(values, x)
    return AttractionGrid(x, values)


def test_single_group_order_parameters_follow_preference():
    group = GroupSpec(0.8, 1.0)
    for center in (-0.5, 0.0, 0.4):
        d_plus, d_minus = order_param_map([_gaussian(center)], [group], 5.0)
        assert d_plus == pytest.approx(4.0)
        assert d_minus == pytest.approx(4.0)


def test_mirrored_groups_in_opposite_markets_balance():
    groups = [GroupSpec(0.8, 0.5), GroupSpec(0.2, 0.5)]
    d_plus, d_minus = order_param_map([_gaussian(0.3), _gaussian(-0.3)], groups, 5.0)
    assert d_plus * d_minus == pytest.approx(1.0)
    assert d_plus > 1.0


def test_order_param_map_checks_its_inputs():
    groups = [GroupSpec(0.8, 0.5), GroupSpec(0.2, 0.5)]
    with pytest.raises(ConfigError):
        order_param_map([_gaussian(0.0)], groups, 1.0)
    bad = _gaussian(0.0)
    with pytest.raises(ConfigError):
        order_param_map([AttractionGrid(bad.delta, 2 * bad.values)], [GroupSpec(0.8, 1.0)], 1.0)


def test_population_model_checks_groups():
    with pytest.raises(ConfigError):
        PopulationModel(groups=(GroupSpec(0.8, 0.5), GroupSpec(0.2, 0.4)))
    with pytest.raises(ConfigError):
        PopulationModel(groups=tuple(GroupSpec(0.5, 1 / 3) for _ in range(3)))


def test_random_choice_return_is_positive():
    model = PopulationModel.symmetric(0.8)
    assert random_choice_return(model) > 0


def test_theory_binder_of_a_single_peak():
    state = SteadyState(
        d=(1.0, 1.0),
        classes=(StateClass(StateType.UNFRAGMENTED, [(0.5, 1.0)]),),
        beta=5.0,
        solver=Solver.HOMOGENEOUS,
    )
    assert theory_binder(state, 0) == pytest.approx(2.0 / 3.0)


def test_homogeneous_state_is_antisymmetric_at_low_beta():
    model = PopulationModel.symmetric(0.8)
    states = [state for state in homogeneous_solver(model, 1 / 0.31) if state.valid]
    assert len(states) == 1
    (state,) = states
    assert state.d[0] * state.d[1] == pytest.approx(1.0, rel=1e-6)
    assert state.peaks(0)[0][0] == pytest.approx(-state.peaks(1)[0][0], abs=1e-8)


def test_homogeneous_states_are_closed_under_mirroring():
    model = PopulationModel.symmetric(0.8)
    states = [state for state in homogeneous_solver(model, 1 / 0.2) if state.valid]
    points = np.log([state.d for state in states])
    for d_plus, d_minus in points:
        mirrored = np.array([-d_minus, -d_plus])
        assert np.min(np.max(np.abs(points - mirrored), axis=1)) < 1e-6


def test_maxwell_locus_of_identical_markets_is_the_diagonal():
    model = PopulationModel(
        groups=(GroupSpec(0.5, 1.0),), markets=default_markets(0.5, 0.5)
    )
    beta = 30.0
    profile = model.profile(0, (2.0, 2.0), beta)
    assert len(profile.minima) == 2
    assert profile.minima[0][1] == pytest.approx(profile.minima[1][1], abs=1e-9)

    lines = maxwell_locus(model, 0, beta, DWindow(points=60))
    assert lines
    for line in lines:
        assert np.all(np.abs(np.log(line[:, 0]) - np.log(line[:, 1])) < 0.2)


def test_phase_boundaries_label_a_pitchfork():
    cells = [
        PhaseDiagramCell({Columns.BETA: beta, Columns.P_BUY: 0.8}, solutions)
        for beta, solutions in (
            (3.0, ("(U,U)",)),
            (3.5, ("(U,U)",)),
            (4.0, ("(W,W)", "(W,W)", "(U,U)")),
        )
    ]
    frame = phase_boundaries(cells, Columns.BETA)
    assert len(frame) == 1
    row = frame.iloc[0]
    assert row[Columns.BETA] == pytest.approx(3.75)
    assert row[Columns.TRANSITION] == "pitchfork"
    assert row[Columns.NEXT_TYPES] == "(U,U);(W,W);(W,W)"


def test_phase_boundaries_refine_with_a_solver():
    def solve(parameters):
        count = 3 if parameters[Columns.BETA] > 3.3 else 1
        return PhaseDiagramCell(parameters, ("(U,U)",) * count)

    cells = [solve({Columns.BETA: beta, Columns.P_BUY: 0.8}) for beta in (3.0, 4.0)]
    frame = phase_boundaries(cells, Columns.BETA, solve, tolerance=1e-4)
    assert frame.iloc[0][Columns.BETA] == pytest.approx(3.3, abs=1e-4)


def test_phase_boundaries_skip_failed_cells():
    cells = [PhaseDiagramCell({Columns.BETA: 1.0, Columns.P_BUY: 0.8}, (), failed=True)]
    assert phase_boundaries(cells, Columns.BETA).empty


def test_solve_cell_records_failures():
    cell = solve_cell(
        PHASE_AXES[0],
        {Columns.BETA: 4.0, Columns.P_BUY: 1.5},
        PopulationModel.symmetric(0.8),
        DWindow(points=20),
    )
    assert cell.failed
    assert cell.count == 0
    assert "p_buy" in cell.error


def test_states_to_frame_drops_peaks():
    model = PopulationModel.symmetric(0.8)
    frame = states_to_frame(homogeneous_solver(model, 1 / 0.31))
    assert Columns.PEAKS not in frame.columns
    assert set(frame[Columns.SOLVER]) == {Solver.HOMOGENEOUS}


def test_loci_need_positive_r():
    with pytest.raises(ConfigError):
        self_consistency_loci(PopulationModel.symmetric(0.8), 4.0, 0.0)


@pytest.mark.slow
@pytest.mark.parametrize(
    "inverse_beta, expected",
    [
        (0.31, None),
        (0.29, None),
        (0.265, ["UU", "UU", "SS"]),
        (0.2, ["WW", "SS", "WW"]),
    ],
)
def test_finite_r_loci_solutions(inverse_beta, expected):
    loci = self_consistency_loci(PopulationModel.symmetric(0.8), 1 / inverse_beta, 1e-3)
    counts = {0.31: 1, 0.29: 3, 0.265: 3, 0.2: 3}
    assert len(loci.solutions) == counts[inverse_beta]
    assert all(state.valid for state in loci.solutions)
    if expected is not None:
        assert Counter(_letters(s.types) for s in loci.solutions) == Counter(expected)


@pytest.mark.slow
@pytest.mark.parametrize(
    "inverse_beta, expected",
    [
        (0.31, None),
        (0.285, {"WW": 1, "SU": 4}),
        (0.1, {"SS": 1, "SW": 2}),
    ],
)
def test_limit_solvers_on_indecisive_groups(inverse_beta, expected):
    states = steady_states(PopulationModel.symmetric(0.55), 1 / inverse_beta)
    if expected is None:
        assert len(states) == 1
    else:
        assert Counter(_letters(state.types) for state in states) == Counter(expected)


@pytest.mark.slow
def test_multiplicity_threshold_in_r():
    threshold = multiplicity_threshold_r(
        PopulationModel.symmetric(0.8), 1 / 0.15, r_range=(0.01, 0.1), tolerance=2e-3
    )
    assert threshold == pytest.approx(0.055, abs=0.01)


@pytest.mark.slow
def test_coordinated_return_matches_random_choice():
    model = PopulationModel.symmetric(0.8)
    states = [s for s in homogeneous_solver(model, 50.0) if s.valid and s.coordinated]
    assert states
    for state in states:
        assert state.avg_return == pytest.approx(random_choice_return(model), rel=1e-3)


def test_market_fractions_split_weight_by_order_type():
    fractions = market_fractions(_gaussian(0.0), GroupSpec(0.8, 0.5), 5.0)
    assert fractions.n_buy[1] == pytest.approx(0.2)
    assert fractions.n_sell[-1] == pytest.approx(0.05)
    total = sum(fractions.n_buy.values()) + sum(fractions.n_sell.values())
    assert total == pytest.approx(0.5)
