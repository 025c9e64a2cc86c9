import logging
import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import contourpy
import numpy as np
import pandas as pd
from scipy import integrate, optimize
from tqdm import tqdm

from src.errors import ConfigError, NumericalError
from src.constants import Columns, GridDefaults, Solver, StateType, Tolerances
from src.fokker_planck import AttractionGrid, FreeEnergyProfile, GridSpec
from src.fokker_planck import StateClass, binder_cumulant, classify_state
from src.fokker_planck import densities_from_scores, diffusion_from_scores
from src.fokker_planck import distribution_from_profile, drift_from_scores
from src.fokker_planck import profile_from_scores
from src.model_core import MARKETS, GroupSpec, MarketSpec, OrderPriceModel
from src.model_core import check_group_weights, choice_probability
from src.model_core import default_markets, expected_scores, market_conditions
from src.model_core import market_score_curve
from src.small_n import find_roots

logger = logging.getLogger(__name__)

PHASE_AXES: Tuple[Tuple[str, str], ...] = (
    (Columns.BETA, Columns.P_BUY),
    (Columns.R, Columns.BETA),
)
_D_FLOOR: float = 1e-12  # Clamp for order parameters inside root searches.
_D_CEIL: float = 1e12


@dataclass(frozen=True)
class DWindow:
    """Log-spaced window of demand-to-supply ratios, per axis."""

    lo: float = GridDefaults.D_LO
    hi: float = GridDefaults.D_HI
    points: int = GridDefaults.D_POINTS

    def __post_init__(self) -> None:
        problems = []
        if not 0 < self.lo < self.hi:
            problems.append(f"window: need 0 < lo < hi, got [{self.lo}, {self.hi}]")
        if self.points < 3:
            problems.append(f"points: {self.points} is fewer than 3")
        if problems:
            raise ConfigError("invalid D window", problems)

    def log_values(self) -> np.ndarray:
        return np.linspace(np.log(self.lo), np.log(self.hi), self.points)


@dataclass(frozen=True)
class PopulationModel:
    """
    One or two agent groups trading at two markets with a common order
    price model. Groups differ only in their buying preference and weight.
    """

    groups: Tuple[GroupSpec, ...]
    markets: Tuple[MarketSpec, MarketSpec] = field(default_factory=default_markets)
    prices: OrderPriceModel = field(default_factory=OrderPriceModel)
    grid: GridSpec = field(default_factory=GridSpec)

    def __post_init__(self) -> None:
        if not 1 <= len(self.groups) <= 2:
            raise ConfigError(
                "invalid population", [f"groups: {len(self.groups)} given, need 1 or 2"]
            )
        check_group_weights(self.groups)
        if sorted(market.id for market in self.markets) != [-1, 1]:
            raise ConfigError("invalid markets", ["markets: need labels +1 and -1"])

    @classmethod
    def symmetric(
        cls,
        p_buy: float,
        markets: Optional[Tuple[MarketSpec, MarketSpec]] = None,
        prices: Optional[OrderPriceModel] = None,
        grid: Optional[GridSpec] = None,
    ) -> "PopulationModel":
        """Two equal groups with mirrored buying preferences p and 1 - p."""
        return cls(
            groups=(GroupSpec(p_buy, 0.5), GroupSpec(1.0 - p_buy, 0.5)),
            markets=markets or default_markets(),
            prices=prices or OrderPriceModel(),
            grid=grid or GridSpec(),
        )

    def market(self, m: int) -> MarketSpec:
        return next(market for market in self.markets if market.id == m)

    def scores(
        self, index: int, d: Sequence[float]
    ) -> Tuple[float, float, float, float]:
        """Expected scores (G_plus, G_minus, H_plus, H_minus) of one group."""
        conditions = market_conditions(self.markets, self.prices, {1: d[0], -1: d[1]})
        g, h = expected_scores(conditions, self.groups[index].p_buy)
        return g[1], g[-1], h[1], h[-1]

    def score_curves(
        self, index: int, d_values: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        p_buy = self.groups[index].p_buy
        g_plus, h_plus = market_score_curve(self.market(1), self.prices, p_buy, d_values)
        g_minus, h_minus = market_score_curve(self.market(-1), self.prices, p_buy, d_values)
        return g_plus, g_minus, h_plus, h_minus

    def profile(self, index: int, d: Sequence[float], beta: float) -> FreeEnergyProfile:
        return profile_from_scores(beta, self.scores(index, d), self.grid)


@dataclass(frozen=True)
class GroupMarketFractions:
    """Fractions of the whole population buying and selling at each market."""

    n_buy: Dict[int, float]
    n_sell: Dict[int, float]


@dataclass(frozen=True)
class FragmentedMixture:
    """Two-peak group state: weight omega at the first location."""

    locations: Tuple[float, float]
    omega: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.omega <= 1.0:
            raise ConfigError("invalid mixture", [f"omega: {self.omega} outside [0, 1]"])

    def peaks(self) -> List[Tuple[float, float]]:
        first, second = self.locations
        return [(first, self.omega), (second, 1.0 - self.omega)]


@dataclass(frozen=True)
class SteadyState:
    """
    A self-consistent population state. `classes` holds one StateClass per
    group with its peak locations and weights; `r` is None for states of
    the r -> 0 solvers.
    """

    d: Tuple[float, float]
    classes: Tuple[StateClass, ...]
    beta: float
    solver: str
    r: Optional[float] = None
    coordinated: Optional[bool] = None
    avg_return: float = float("nan")
    valid: bool = True
    residual: float = 0.0

    @property
    def types(self) -> str:
        return "(" + ",".join(state.kind for state in self.classes) + ")"

    def peaks(self, group: int) -> List[Tuple[float, float]]:
        return list(self.classes[group].peaks)

    def to_record(self) -> Dict:
        return {
            Columns.SOLVER: self.solver,
            Columns.TYPES: self.types,
            Columns.D_PLUS: self.d[0],
            Columns.D_MINUS: self.d[1],
            Columns.BETA: self.beta,
            Columns.R: self.r,
            Columns.COORDINATED: self.coordinated,
            Columns.RETURN: self.avg_return,
            Columns.VALID: self.valid,
            Columns.RESIDUAL: self.residual,
            Columns.PEAKS: [
                [[float(loc), float(weight)] for loc, weight in state.peaks]
                for state in self.classes
            ],
        }


@dataclass(frozen=True)
class PhaseDiagramCell:
    """Parameters of one sweep cell and the types of its steady states."""

    parameters: Dict[str, float]
    solutions: Tuple[str, ...]
    failed: bool = False
    error: str = ""

    @property
    def count(self) -> int:
        return len(self.solutions)

    @property
    def signature(self) -> Tuple[str, ...]:
        return tuple(sorted(self.solutions))

    def to_row(self) -> Dict:
        return {
            **self.parameters,
            Columns.COUNT: self.count,
            Columns.TYPES: ";".join(self.signature),
            Columns.FAILED: self.failed,
            Columns.ERROR: self.error,
        }


@dataclass(frozen=True, eq=False)
class SelfConsistencyLoci:
    """Polylines where D_plus' = D_plus and D_minus' = D_minus, in D units."""

    plus: List[np.ndarray]
    minus: List[np.ndarray]
    solutions: List[SteadyState]

    def to_frame(self) -> pd.DataFrame:
        frames = []
        for label, lines in ((1, self.plus), (-1, self.minus)):
            for segment, line in enumerate(lines):
                frames.append(
                    pd.DataFrame(
                        {
                            Columns.LOCUS: label,
                            Columns.SEGMENT: segment,
                            Columns.D_PLUS: line[:, 0],
                            Columns.D_MINUS: line[:, 1],
                        }
                    )
                )
        columns = [Columns.LOCUS, Columns.SEGMENT, Columns.D_PLUS, Columns.D_MINUS]
        if not frames:
            return pd.DataFrame(columns=columns)
        return pd.concat(frames, ignore_index=True)[columns]


def _broadcast_groups(values: np.ndarray, ndim: int) -> np.ndarray:
    return values.reshape((-1,) + (1,) * (ndim - 1))


def _order_params(shares: np.ndarray, groups: Sequence[GroupSpec]) -> np.ndarray:
    """
    D_m from the market shares I_g(m) of each group; shares has shape
    (groups, 2, ...). A market without sellers gets an infinite ratio.
    """
    weights = _broadcast_groups(np.array([g.weight for g in groups]), shares.ndim)
    p_buy = _broadcast_groups(np.array([g.p_buy for g in groups]), shares.ndim)
    buy = np.sum(weights * p_buy * shares, axis=0)
    sell = np.sum(weights * (1.0 - p_buy) * shares, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(sell > 0, buy / np.where(sell > 0, sell, 1.0), np.inf)
    d[np.isnan(buy) | np.isnan(sell)] = np.nan
    return d


def _peak_shares(beta: float, peaks: Sequence[Tuple[float, float]]) -> np.ndarray:
    return np.array(
        [
            sum(weight * choice_probability(beta, loc, m) for loc, weight in peaks)
            for m in MARKETS
        ]
    )


def _grid_shares(beta: float, dist: AttractionGrid) -> np.ndarray:
    return np.array(
        [
            integrate.trapezoid(
                choice_probability(beta, dist.delta, m) * dist.values, dist.delta
            )
            for m in MARKETS
        ]
    )


def market_fractions(
    dist: AttractionGrid, group: GroupSpec, beta: float
) -> GroupMarketFractions:
    """Splits a group's weight over markets and order types."""
    shares = _grid_shares(beta, dist)
    return GroupMarketFractions(
        n_buy={m: group.weight * group.p_buy * s for m, s in zip(MARKETS, shares)},
        n_sell={m: group.weight * (1 - group.p_buy) * s for m, s in zip(MARKETS, shares)},
    )


def order_param_map(
    dists: Sequence[AttractionGrid], groups: Sequence[GroupSpec], beta: float
) -> Tuple[float, float]:
    """
    Maps group distributions to the demand-to-supply ratios they produce,
    D_m' = sum_g w_g p_g I_g(m) / sum_g w_g (1 - p_g) I_g(m) with
    I_g(m) the integral of sigma_beta(m delta) P_g(delta).

    Args:
        dists (Sequence[AttractionGrid]): Normalized density per group.
        groups (Sequence[GroupSpec]): The groups, in the same order.
        beta (float): Intensity of choice.

    Returns:
        Tuple[float, float]: (D_plus', D_minus'); a market without sellers
                             reports infinity.
    """
    if len(dists) != len(groups):
        raise ConfigError("mismatched groups", [f"{len(dists)} densities, {len(groups)} groups"])
    for index, dist in enumerate(dists):
        total = integrate.trapezoid(dist.values, dist.delta)
        if abs(total - 1.0) > Tolerances.NORMALIZATION:
            raise ConfigError("density not normalized", [f"dists[{index}]: integral {total}"])

    d = _order_params(np.array([_grid_shares(beta, dist) for dist in dists]), groups)
    for m, value in zip(MARKETS, d):
        if np.isinf(value):
            logger.warning("no sellers at market %+d; D is unbounded", m)
    return float(d[0]), float(d[1])


def random_choice_return(model: PopulationModel) -> float:
    """Average return per round when every agent picks a market at random."""
    d = _order_params(np.full((len(model.groups), 2), 0.5), model.groups)
    if not np.all(np.isfinite(d)):
        raise NumericalError("random choice leaves a market without sellers")
    total = 0.0
    for index, group in enumerate(model.groups):
        g_plus, g_minus, _, _ = model.scores(index, d)
        total += group.weight * 0.5 * (g_plus + g_minus)
    return float(total)


def _finite_r_shares(
    model: PopulationModel, index: int, d: Sequence[float], beta: float, r: float
) -> np.ndarray:
    x = model.grid.points()
    density = densities_from_scores(x, beta, r, *model.scores(index, d))
    return np.array(
        [integrate.trapezoid(density * choice_probability(beta, x, m), x) for m in MARKETS]
    )


def average_population_return(state: SteadyState, model: PopulationModel) -> float:
    """
    Expected score per agent and round, zeros included:
    sum_g w_g sum_m I_g(m) G_m^g at the state's order parameters.
    """
    total = 0.0
    for index, group in enumerate(model.groups):
        if state.r is not None:
            shares = _finite_r_shares(model, index, state.d, state.beta, state.r)
        else:
            shares = _peak_shares(state.beta, state.peaks(index))
        g_plus, g_minus, _, _ = model.scores(index, state.d)
        total += group.weight * (shares[0] * g_plus + shares[1] * g_minus)
    return float(total)


def theory_binder(
    state: SteadyState, group: int, model: Optional[PopulationModel] = None
) -> float:
    """
    Binder cumulant predicted for one group of a steady state: from the
    stationary density when the state has a finite r and a model is given,
    otherwise from its peaks.
    """
    if state.r is not None and model is not None:
        profile = model.profile(group, state.d, state.beta)
        return binder_cumulant(distribution_from_profile(profile, state.r))
    peaks = np.array(state.peaks(group), dtype=float)
    second = np.sum(peaks[:, 1] * peaks[:, 0] ** 2)
    fourth = np.sum(peaks[:, 1] * peaks[:, 0] ** 4)
    if not second > 0:
        raise NumericalError("Binder cumulant undefined for a state centred at zero")
    return float(1.0 - fourth / (3.0 * second**2))


def _coordination(classes: Sequence[StateClass]) -> Optional[bool]:
    if len(classes) < 2 or any(c.kind == StateType.STRONG for c in classes):
        return None
    main = [max(c.peaks, key=lambda peak: peak[1])[0] for c in classes]
    return bool(main[0] * main[1] > 0 and min(abs(loc) for loc in main) > Tolerances.SIGN)


def _finalize(state: SteadyState, model: PopulationModel) -> SteadyState:
    return replace(state, avg_return=average_population_return(state, model))


def _merge_states(states: Sequence[SteadyState]) -> List[SteadyState]:
    merged: List[SteadyState] = []
    for state in states:
        point = np.log(state.d)
        duplicate = any(
            other.types == state.types
            and np.max(np.abs(np.log(other.d) - point)) < Tolerances.LOG_D_MERGE
            for other in merged
        )
        if not duplicate:
            merged.append(state)
    return sorted(merged, key=lambda s: (s.d[0], s.d[1]))


def _merge_points(points: np.ndarray, tolerance: float) -> List[np.ndarray]:
    merged: List[np.ndarray] = []
    for point in points:
        if not any(np.max(np.abs(point - other)) < tolerance for other in merged):
            merged.append(point)
    return merged


def _zero_contours(log_d: np.ndarray, values: np.ndarray) -> List[np.ndarray]:
    """Zero-level polylines of a field indexed [log D_minus, log D_plus]."""
    generator = contourpy.contour_generator(
        log_d, log_d, np.ma.masked_invalid(values), line_type=contourpy.LineType.Separate
    )
    return [np.asarray(line, dtype=float) for line in generator.lines(0.0) if len(line) > 1]


def _cross(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def _polyline_intersections(
    first: Sequence[np.ndarray], second: Sequence[np.ndarray]
) -> np.ndarray:
    points = []
    for a in first:
        start_a, step_a = a[:-1, None, :], np.diff(a, axis=0)[:, None, :]
        for b in second:
            start_b, step_b = b[None, :-1, :], np.diff(b, axis=0)[None, :, :]
            offset = start_b - start_a
            denom = _cross(step_a, step_b)
            with np.errstate(divide="ignore", invalid="ignore"):
                s = _cross(offset, step_b) / denom
                t = _cross(offset, step_a) / denom
            hit = (denom != 0) & (s >= 0) & (s <= 1) & (t >= 0) & (t <= 1)
            ia, ib = np.nonzero(hit)
            points.extend(a[ia] + s[ia, ib, None] * np.diff(a, axis=0)[ia])
    return np.array(points).reshape(-1, 2)


def order_param_field(
    model: PopulationModel,
    beta: float,
    r: float,
    window: DWindow = DWindow(),
    progress: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Evaluates the order-parameter map at finite r over a log-spaced window.

    A group's scores at market m depend only on D_m, so each column of
    fixed D_plus is solved for all D_minus at once.

    Returns:
        Tuple[np.ndarray, np.ndarray]: D_plus' and D_minus', indexed
                                       [D_minus, D_plus]; NaN where the
                                       density could not be formed.
    """
    d_values = np.exp(window.log_values())
    x = model.grid.points()
    up, down = choice_probability(beta, x, 1), choice_probability(beta, x, -1)
    curves = [model.score_curves(g, d_values) for g in range(len(model.groups))]
    k = d_values.size
    shares = np.empty((len(model.groups), 2, k, k))
    for i in tqdm(range(k), disable=not progress, desc="order parameters"):
        for g, (g_plus, g_minus, h_plus, h_minus) in enumerate(curves):
            density = densities_from_scores(
                x, beta, r, g_plus[i], g_minus[:, None], h_plus[i], h_minus[:, None]
            )
            shares[g, 0, :, i] = integrate.trapezoid(density * up, x, axis=-1)
            shares[g, 1, :, i] = integrate.trapezoid(density * down, x, axis=-1)

    d_new = _order_params(shares, model.groups)
    masked = int(np.sum(~np.all(np.isfinite(d_new), axis=0)))
    if masked:
        logger.warning("%d of %d cells masked in the order-parameter map", masked, k * k)
    return d_new[0], d_new[1]


def _finite_r_residual(
    model: PopulationModel, beta: float, r: float, log_d: np.ndarray
) -> np.ndarray:
    d = np.exp(np.clip(log_d, np.log(_D_FLOOR), np.log(_D_CEIL)))
    shares = np.array(
        [_finite_r_shares(model, g, d, beta, r) for g in range(len(model.groups))]
    )
    with np.errstate(divide="ignore"):
        return np.log(_order_params(shares, model.groups)) - np.log(d)


def _finite_r_state(
    model: PopulationModel, beta: float, r: float, point: np.ndarray
) -> SteadyState:
    residual = lambda z: _finite_r_residual(model, beta, r, z)
    best, best_residual = point, float(np.max(np.abs(residual(point))))
    solution = optimize.root(residual, point, method="hybr")
    if np.all(np.isfinite(solution.x)):
        refined = float(np.max(np.abs(residual(solution.x))))
        if refined < best_residual:
            best, best_residual = solution.x, refined

    d = np.exp(best)
    classes = tuple(
        classify_state(model.profile(g, d, beta), r) for g in range(len(model.groups))
    )
    state = SteadyState(
        d=(float(d[0]), float(d[1])),
        classes=classes,
        beta=beta,
        solver=Solver.LOCI,
        r=r,
        coordinated=_coordination(classes),
        valid=best_residual <= Tolerances.SELF_FINITE,
        residual=best_residual,
    )
    return _finalize(state, model)


def self_consistency_loci(
    model: PopulationModel,
    beta: float,
    r: float,
    window: DWindow = DWindow(),
    progress: bool = False,
) -> SelfConsistencyLoci:
    """
    Traces the loci D_plus' = D_plus and D_minus' = D_minus at finite r and
    returns their intersections as candidate steady states.

    The fields log D_m' - log D_m are contoured at zero with linear
    interpolation inside cells; each intersection is then refined by a
    root search on the map itself and merged with its neighbours.

    Args:
        model (PopulationModel): Groups, markets and grids.
        beta (float): Intensity of choice.
        r (float): Learning rate, positive.
        window (DWindow): Window and resolution of the D grid.
        progress (bool): Shows a progress bar over grid columns.

    Returns:
        SelfConsistencyLoci: The two loci in D units and the typed
                             candidate states.
    """
    if not r > 0:
        raise ConfigError("invalid learning rate", [f"r: {r} must be positive"])
    log_d = window.log_values()
    d_plus_new, d_minus_new = order_param_field(model, beta, r, window, progress)
    with np.errstate(divide="ignore", invalid="ignore"):
        field_plus = np.log(d_plus_new) - log_d[None, :]
        field_minus = np.log(d_minus_new) - log_d[:, None]
    lines_plus = _zero_contours(log_d, field_plus)
    lines_minus = _zero_contours(log_d, field_minus)

    candidates = _merge_points(
        _polyline_intersections(lines_plus, lines_minus), Tolerances.LOG_D_MERGE
    )
    solutions = _merge_states(
        [_finite_r_state(model, beta, r, point) for point in candidates]
    )
    logger.info(
        "beta=%.4g r=%.4g: %d loci intersections, %d distinct states",
        beta, r, len(candidates), len(solutions),
    )
    return SelfConsistencyLoci(
        plus=[np.exp(line) for line in lines_plus],
        minus=[np.exp(line) for line in lines_minus],
        solutions=solutions,
    )


def _is_global_minimum(profile: FreeEnergyProfile, delta: float) -> bool:
    if not profile.minima:
        return False
    location, height = min(profile.minima, key=lambda minimum: abs(minimum[0] - delta))
    if abs(location - delta) > Tolerances.SELF_LIMIT:
        return False
    lowest = min(value for _, value in profile.minima)
    return height <= lowest + Tolerances.STRONG_LIMIT


def _homogeneous_d(model: PopulationModel, beta: float, deltas: np.ndarray) -> np.ndarray:
    shares = np.array([_peak_shares(beta, [(delta, 1.0)]) for delta in deltas])
    return np.clip(_order_params(shares, model.groups), _D_FLOOR, _D_CEIL)


def homogeneous_solver(
    model: PopulationModel,
    beta: float,
    seeds_per_axis: int = GridDefaults.HOMOGENEOUS_SEEDS,
) -> List[SteadyState]:
    """
    Solves the peak equations M1^(g)(delta_g) = 0 of all groups together,
    with D_m given by the peak positions, from a grid of starting points.

    A root is valid when each group's global free-energy minimum sits at
    its peak; invalid roots are returned flagged.

    Args:
        model (PopulationModel): Groups, markets and grids.
        beta (float): Intensity of choice.
        seeds_per_axis (int): Starting values per group in [-1, 1].

    Returns:
        List[SteadyState]: One state per distinct root, ordered by D.
    """
    groups = range(len(model.groups))

    def rhs(deltas: np.ndarray) -> np.ndarray:
        d = _homogeneous_d(model, beta, deltas)
        return np.array(
            [drift_from_scores(deltas[g], beta, *model.scores(g, d)[:2]) for g in groups]
        )

    axis = np.linspace(-1.0, 1.0, seeds_per_axis)
    roots, failed = find_roots(rhs, list(itertools.product(axis, repeat=len(groups))))
    for seed in failed:
        logger.debug("homogeneous seed %s did not converge", seed)

    states = []
    for root in roots:
        d = _homogeneous_d(model, beta, root)
        valid, classes = True, []
        for g in groups:
            profile = model.profile(g, d, beta)
            valid &= _is_global_minimum(profile, root[g])
            kind = classify_state(profile).kind
            classes.append(StateClass(kind, [(float(root[g]), 1.0)]))
        coordinated = None
        if len(root) == 2:
            coordinated = bool(root[0] * root[1] > 0 and np.min(np.abs(root)) > Tolerances.SIGN)
        state = SteadyState(
            d=(float(d[0]), float(d[1])),
            classes=tuple(classes),
            beta=beta,
            solver=Solver.HOMOGENEOUS,
            coordinated=coordinated,
            valid=bool(valid),
            residual=float(np.max(np.abs(rhs(root)))),
        )
        states.append(_finalize(state, model))

    logger.info(
        "beta=%.4g: %d homogeneous roots, %d consistent",
        beta, len(states), sum(state.valid for state in states),
    )
    return sorted(states, key=lambda s: (s.d[0], s.d[1]))


def _minima_gap(x: np.ndarray, m1: np.ndarray, m2: np.ndarray) -> np.ndarray:
    """
    Row-wise f(last minimum) - f(first minimum) from gridded M1 and M2,
    NaN where a row has fewer than two minima.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        f = integrate.cumulative_trapezoid(-2.0 * m1 / m2, x, initial=0.0, axis=-1)
    falling = (m1[:, :-1] > 0) & (m1[:, 1:] <= 0)
    count = falling.sum(axis=1)
    rows = np.arange(m1.shape[0])
    first = np.argmax(falling, axis=1)
    last = falling.shape[1] - 1 - np.argmax(falling[:, ::-1], axis=1)

    def height(index: np.ndarray) -> np.ndarray:
        a, b = m1[rows, index], m1[rows, index + 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            share = a / (a - b)
        return f[rows, index] + share * (f[rows, index + 1] - f[rows, index])

    gap = np.where(count >= 2, height(last) - height(first), np.nan)
    gap[np.any(m2 <= 0, axis=1)] = np.nan
    return gap


def maxwell_field(
    model: PopulationModel,
    group: int,
    beta: float,
    window: DWindow = DWindow(),
    progress: bool = False,
) -> np.ndarray:
    """
    Free-energy difference between the outer minima of one group over the
    D window, indexed [D_minus, D_plus]; NaN where the group is unimodal.
    """
    d_values = np.exp(window.log_values())
    x = model.grid.points()
    g_plus, g_minus, h_plus, h_minus = model.score_curves(group, d_values)
    gaps = np.empty((d_values.size, d_values.size))
    for i in tqdm(range(d_values.size), disable=not progress, desc="maxwell"):
        m1 = drift_from_scores(x, beta, g_plus[i], g_minus[:, None])
        m2 = diffusion_from_scores(
            x, beta, g_plus[i], g_minus[:, None], h_plus[i], h_minus[:, None]
        )
        gaps[:, i] = _minima_gap(x, m1, m2)
    return gaps


def _maxwell_lines(
    model: PopulationModel, group: int, beta: float, window: DWindow
) -> List[np.ndarray]:
    return _zero_contours(window.log_values(), maxwell_field(model, group, beta, window))


def maxwell_locus(
    model: PopulationModel,
    group: int,
    beta: float,
    window: DWindow = DWindow(),
) -> List[np.ndarray]:
    """
    Polylines of (D_plus, D_minus) at which a group's free energy has two
    equal minima, the strong-fragmentation condition.
    """
    return [np.exp(line) for line in _maxwell_lines(model, group, beta, window)]


def _exact_gap(model: PopulationModel, group: int, beta: float, log_d: np.ndarray) -> float:
    profile = model.profile(group, np.exp(log_d), beta)
    if len(profile.minima) < 2:
        return float("nan")
    return profile.minima[-1][1] - profile.minima[0][1]


def _global_minimum(profile: FreeEnergyProfile) -> Optional[float]:
    """Location of the unique lowest minimum, or None on a tie."""
    if not profile.minima:
        return None
    ranked = sorted(profile.minima, key=lambda minimum: minimum[1])
    if len(ranked) > 1 and ranked[1][1] - ranked[0][1] <= Tolerances.STRONG_LIMIT:
        return None
    return ranked[0][0]


def _balance(model: PopulationModel, d: Sequence[float]) -> np.ndarray:
    """Coefficients c_gm = w_g (D_m (1 - p_g) - p_g) of the D_m equations."""
    return np.array(
        [[g.weight * (d_m * (1.0 - g.p_buy) - g.p_buy) for d_m in d] for g in model.groups]
    )


def _require_two_groups(model: PopulationModel) -> None:
    if len(model.groups) != 2:
        raise ConfigError("fragmented solvers need two groups", [f"groups: {len(model.groups)}"])


def _fragmented_state(
    model: PopulationModel,
    beta: float,
    log_d: np.ndarray,
    mixtures: Dict[int, FragmentedMixture],
    solver: str,
) -> SteadyState:
    d = np.exp(log_d)
    classes = []
    for g in range(len(model.groups)):
        if g in mixtures:
            classes.append(StateClass(StateType.STRONG, mixtures[g].peaks()))
        else:
            classes.append(classify_state(model.profile(g, d, beta)))
    shares = np.array([_peak_shares(beta, c.peaks) for c in classes])
    residual = float(np.max(np.abs(np.log(_order_params(shares, model.groups)) - log_d)))
    state = SteadyState(
        d=(float(d[0]), float(d[1])),
        classes=tuple(classes),
        beta=beta,
        solver=solver,
        valid=residual <= Tolerances.SELF_LIMIT,
        residual=residual,
    )
    return _finalize(state, model)


def _clip_omega(omega: float) -> Optional[float]:
    if -Tolerances.OMEGA <= omega <= 1.0 + Tolerances.OMEGA:
        return float(np.clip(omega, 0.0, 1.0))
    return None


def cofragmented_solver(
    model: PopulationModel,
    beta: float,
    window: DWindow = DWindow(),
) -> Optional[SteadyState]:
    """
    Finds the (S,S) state where both groups are strongly fragmented.

    Intersections of the two Maxwell loci are refined on the exact
    free-energy differences; the peak weights then follow from the linear
    D_m equations and must lie in [0, 1].

    Args:
        model (PopulationModel): Two groups, markets and grids.
        beta (float): Intensity of choice.
        window (DWindow): Window and resolution for the loci.

    Returns:
        Optional[SteadyState]: The state, or None when it does not exist.
    """
    _require_two_groups(model)
    lines = [_maxwell_lines(model, g, beta, window) for g in (0, 1)]
    seeds = _merge_points(_polyline_intersections(lines[0], lines[1]), Tolerances.LOG_D_MERGE)

    states = []
    for seed in seeds:
        gaps = lambda z: np.array([_exact_gap(model, g, beta, z) for g in (0, 1)])
        solution = optimize.root(gaps, seed, method="hybr")
        values = gaps(solution.x)
        if not np.all(np.isfinite(values)) or np.max(np.abs(values)) > Tolerances.SELF_LIMIT:
            logger.debug("Maxwell intersection near %s did not refine", np.exp(seed))
            continue

        d = np.exp(solution.x)
        peaks, coefficients = [], _balance(model, d)
        for g in (0, 1):
            minima = model.profile(g, d, beta).minima
            peaks.append((minima[0][0], minima[-1][0]))
        matrix, rhs = np.empty((2, 2)), np.empty(2)
        for k, m in enumerate(MARKETS):
            a = [choice_probability(beta, peaks[g][0], m) for g in (0, 1)]
            b = [choice_probability(beta, peaks[g][1], m) for g in (0, 1)]
            matrix[k] = [coefficients[g, k] * (a[g] - b[g]) for g in (0, 1)]
            rhs[k] = -sum(coefficients[g, k] * b[g] for g in (0, 1))
        try:
            omegas = np.linalg.solve(matrix, rhs)
        except np.linalg.LinAlgError:
            logger.debug("singular weight system at D=%s", d)
            continue
        clipped = [_clip_omega(omega) for omega in omegas]
        if any(omega is None for omega in clipped):
            continue
        mixtures = {g: FragmentedMixture(peaks[g], clipped[g]) for g in (0, 1)}
        states.append(_fragmented_state(model, beta, solution.x, mixtures, Solver.COFRAGMENTED))

    states = [state for state in _merge_states(states) if state.valid]
    if not states:
        return None
    if len(states) > 1:
        logger.info("%d co-fragmented states; keeping the most symmetric", len(states))
    return min(states, key=lambda s: abs(np.log(s.d[0]) + np.log(s.d[1])))


def _partial_scan(
    model: PopulationModel, beta: float, split: int, whole: int, log_d: np.ndarray
) -> Tuple[float, float]:
    """Weight solving the D_plus equation and the D_minus imbalance it leaves."""
    d = np.exp(log_d)
    minima = model.profile(split, d, beta).minima
    peak = _global_minimum(model.profile(whole, d, beta))
    if len(minima) < 2 or peak is None:
        return float("nan"), float("nan")
    coefficients = _balance(model, d)
    a = [choice_probability(beta, minima[0][0], m) for m in MARKETS]
    b = [choice_probability(beta, minima[-1][0], m) for m in MARKETS]
    u = [choice_probability(beta, peak, m) for m in MARKETS]
    denom = coefficients[split, 0] * (a[0] - b[0])
    if abs(denom) < 1e-15:
        return float("nan"), float("nan")
    omega = -(coefficients[whole, 0] * u[0] + coefficients[split, 0] * b[0]) / denom
    imbalance = (
        coefficients[split, 1] * (b[1] + omega * (a[1] - b[1]))
        + coefficients[whole, 1] * u[1]
    )
    return omega, imbalance


def _refine_partial(
    model: PopulationModel,
    beta: float,
    split: int,
    whole: int,
    log_d: np.ndarray,
    omega: float,
) -> Optional[SteadyState]:
    def equations(z: np.ndarray) -> np.ndarray:
        d = np.exp(z[:2])
        minima = model.profile(split, d, beta).minima
        peak = _global_minimum(model.profile(whole, d, beta))
        if len(minima) < 2 or peak is None:
            return np.full(3, np.nan)
        shares = np.empty((2, 2))
        shares[split] = _peak_shares(
            beta, [(minima[0][0], z[2]), (minima[-1][0], 1.0 - z[2])]
        )
        shares[whole] = _peak_shares(beta, [(peak, 1.0)])
        mismatch = np.log(_order_params(shares, model.groups)) - z[:2]
        return np.array([minima[-1][1] - minima[0][1], mismatch[0], mismatch[1]])

    solution = optimize.root(equations, np.append(log_d, omega), method="hybr")
    values = equations(solution.x)
    if not np.all(np.isfinite(values)) or np.max(np.abs(values)) > Tolerances.SELF_LIMIT:
        return None
    weight = _clip_omega(solution.x[2])
    if weight is None:
        return None
    minima = model.profile(split, np.exp(solution.x[:2]), beta).minima
    mixture = FragmentedMixture((minima[0][0], minima[-1][0]), weight)
    return _fragmented_state(model, beta, solution.x[:2], {split: mixture}, Solver.PARTIAL)


def partial_fragmented_solver(
    model: PopulationModel,
    beta: float,
    window: DWindow = DWindow(),
) -> List[SteadyState]:
    """
    Finds states with one strongly fragmented group and one unimodal
    group, trying both role assignments.

    Along the fragmented group's Maxwell locus the D_plus equation fixes
    the weight; sign changes of the remaining D_minus imbalance bracket
    solutions, which are refined jointly in (D, omega).
    """
    _require_two_groups(model)
    states = []
    for split in (0, 1):
        whole = 1 - split
        for line in _maxwell_lines(model, split, beta, window):
            scan = np.array([_partial_scan(model, beta, split, whole, point) for point in line])
            for index in range(len(line) - 1):
                (omega_a, left), (omega_b, right) = scan[index], scan[index + 1]
                if not (np.isfinite(left) and np.isfinite(right)) or left * right > 0:
                    continue
                share = left / (left - right) if left != right else 0.0
                point = line[index] + share * (line[index + 1] - line[index])
                omega = omega_a + share * (omega_b - omega_a)
                state = _refine_partial(model, beta, split, whole, point, omega)
                if state is not None and state.valid:
                    states.append(state)
    merged = _merge_states(states)
    logger.info("beta=%.4g: %d partially fragmented states", beta, len(merged))
    return merged


def steady_states(
    model: PopulationModel,
    beta: float,
    r: Optional[float] = None,
    window: DWindow = DWindow(),
    progress: bool = False,
) -> List[SteadyState]:
    """
    All steady states at one parameter point: the consistent results of
    the three r -> 0 solvers when r is None, else the finite-r loci
    intersections.
    """
    if r is not None:
        return self_consistency_loci(model, beta, r, window, progress).solutions
    states = [s for s in homogeneous_solver(model, beta) if s.valid]
    if len(model.groups) == 2:
        cofragmented = cofragmented_solver(model, beta, window)
        if cofragmented is not None:
            states.append(cofragmented)
        states.extend(partial_fragmented_solver(model, beta, window))
    return states


def multiplicity_threshold_r(
    model: PopulationModel,
    beta: float,
    r_range: Tuple[float, float] = (1e-3, 0.2),
    window: DWindow = DWindow(),
    tolerance: float = 1e-3,
) -> float:
    """
    Largest learning rate at which the finite-r map still has more than
    one self-consistent solution, by bisection over r.

    Returns:
        float: The threshold; NaN when even the smallest r has a single
               solution and infinity when the largest still has several.
    """
    def multiple(r: float) -> bool:
        return len(self_consistency_loci(model, beta, r, window).solutions) > 1

    lo, hi = r_range
    if not multiple(lo):
        logger.warning("single solution already at r=%s", lo)
        return float("nan")
    if multiple(hi):
        return float("inf")
    while hi - lo > tolerance:
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if multiple(mid) else (lo, mid)
    return 0.5 * (lo + hi)


def solve_cell(
    axes: Tuple[str, str],
    parameters: Dict[str, float],
    model: PopulationModel,
    window: DWindow = DWindow(),
) -> PhaseDiagramCell:
    """Solves one phase-diagram cell, recording failures instead of raising."""
    try:
        if tuple(axes) == PHASE_AXES[0]:
            cell_model = PopulationModel.symmetric(
                parameters[Columns.P_BUY], model.markets, model.prices, model.grid
            )
            states = steady_states(cell_model, parameters[Columns.BETA], None, window)
        else:
            states = steady_states(
                model, parameters[Columns.BETA], parameters[Columns.R], window
            )
    except (NumericalError, ConfigError, ArithmeticError) as error:
        logger.warning("cell %s failed: %s", parameters, error)
        return PhaseDiagramCell(parameters, (), failed=True, error=str(error))
    return PhaseDiagramCell(parameters, tuple(sorted(state.types for state in states)))


def _cell_worker(task: Tuple) -> PhaseDiagramCell:
    return solve_cell(*task)


def phase_diagram_sweep(
    axes: Tuple[str, str],
    first_values: Sequence[float],
    second_values: Sequence[float],
    model: PopulationModel,
    window: DWindow = DWindow(),
    workers: int = 1,
    progress: bool = False,
) -> List[PhaseDiagramCell]:
    """
    Solves every cell of a two-parameter grid.

    Axes (beta, p_buy) use the r -> 0 solvers on symmetric groups
    (p, 1 - p); axes (r, beta) count finite-r loci solutions of the given
    model. Cells are independent and returned in grid order, whatever the
    number of worker processes.

    Args:
        axes (Tuple[str, str]): One of PHASE_AXES.
        first_values (Sequence[float]): Values of the first axis.
        second_values (Sequence[float]): Values of the second axis.
        model (PopulationModel): Markets, prices and grid; groups too on the
                                 (r, beta) axes.
        window (DWindow): D window of the solvers.
        workers (int): Worker processes; 1 runs in-process.
        progress (bool): Shows a progress bar over cells.

    Returns:
        List[PhaseDiagramCell]: Cells in row-major order of the axes.
    """
    if tuple(axes) not in PHASE_AXES:
        raise ConfigError("unsupported axes", [f"axes: {tuple(axes)} not in {PHASE_AXES}"])
    tasks = [
        (tuple(axes), {axes[0]: float(a), axes[1]: float(b)}, model, window)
        for a in first_values
        for b in second_values
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            cells = list(
                tqdm(
                    executor.map(_cell_worker, tasks, chunksize=max(1, len(tasks) // (4 * workers))),
                    total=len(tasks),
                    disable=not progress,
                    desc="cells",
                )
            )
    else:
        cells = [_cell_worker(task) for task in tqdm(tasks, disable=not progress, desc="cells")]

    failed = sum(cell.failed for cell in cells)
    if failed:
        logger.warning("%d of %d cells failed", failed, len(cells))
    return cells


def _transition(before: int, after: int) -> str:
    if {before, after} == {1, 3}:
        return "pitchfork"
    if {before, after} == {3, 5}:
        return "saddle_node"
    return "type_change" if before == after else "count_change"


def phase_boundaries(
    cells: Sequence[PhaseDiagramCell],
    axis: str,
    solve: Optional[Callable[[Dict[str, float]], PhaseDiagramCell]] = None,
    tolerance: float = 1e-3,
) -> pd.DataFrame:
    """
    Locates changes of the solution multiset between neighbouring cells
    along one axis, refined by bisection when a cell solver is supplied.

    Returns:
        pd.DataFrame: One row per boundary with the fixed parameter, the
                      boundary position, the types on both sides and the
                      transition label.
    """
    usable = [cell for cell in cells if not cell.failed]
    if not usable:
        return pd.DataFrame()
    other = next(name for name in usable[0].parameters if name != axis)
    rows = []
    for fixed in sorted({cell.parameters[other] for cell in usable}):
        line = sorted(
            (cell for cell in usable if cell.parameters[other] == fixed),
            key=lambda cell: cell.parameters[axis],
        )
        for left, right in zip(line[:-1], line[1:]):
            if left.signature == right.signature:
                continue
            lo, hi = left.parameters[axis], right.parameters[axis]
            while solve is not None and hi - lo > tolerance:
                mid = 0.5 * (lo + hi)
                cell = solve({axis: mid, other: fixed})
                if cell.failed:
                    break
                lo, hi = (mid, hi) if cell.signature == left.signature else (lo, mid)
            rows.append(
                {
                    other: fixed,
                    axis: 0.5 * (lo + hi),
                    Columns.TYPES: ";".join(left.signature),
                    Columns.NEXT_TYPES: ";".join(right.signature),
                    Columns.TRANSITION: _transition(left.count, right.count),
                }
            )
    return pd.DataFrame(
        rows, columns=[other, axis, Columns.TYPES, Columns.NEXT_TYPES, Columns.TRANSITION]
    )


def states_to_frame(states: Sequence[SteadyState]) -> pd.DataFrame:
    """Tabulates states without their peak lists."""
    records = [state.to_record() for state in states]
    for record in records:
        record.pop(Columns.PEAKS)
    columns = [
        Columns.SOLVER, Columns.TYPES, Columns.D_PLUS, Columns.D_MINUS, Columns.BETA,
        Columns.R, Columns.COORDINATED, Columns.RETURN, Columns.VALID, Columns.RESIDUAL,
    ]
    return pd.DataFrame(records, columns=columns)
