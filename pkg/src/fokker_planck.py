import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import integrate, optimize, stats

from src.errors import ConfigError, NumericalError
from src.constants import Columns, Defaults, GridDefaults, StateType
from src.constants import Tolerances
from src.model_core import LearningParams, MarketConditions, MarketSpec
from src.model_core import OrderPriceModel, choice_probability, expected_price
from src.model_core import expected_scores, market_conditions

logger = logging.getLogger(__name__)

ScorePair = Tuple[float, float]


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid of attraction differences; must straddle zero."""

    lo: float = GridDefaults.DELTA_LO
    hi: float = GridDefaults.DELTA_HI
    n: int = GridDefaults.DELTA_POINTS

    def __post_init__(self) -> None:
        problems = []
        if not self.lo < 0 < self.hi:
            problems.append(f"bounds: need lo < 0 < hi, got [{self.lo}, {self.hi}]")
        if self.n < 3:
            problems.append(f"n: {self.n} points is fewer than 3")
        if problems:
            raise ConfigError("invalid grid", problems)

    def points(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n)


@dataclass(frozen=True, eq=False)
class AttractionGrid:
    """Density P(delta) of one group's attraction differences on a grid."""

    delta: np.ndarray
    values: np.ndarray

    @property
    def lo(self) -> float:
        return float(self.delta[0])

    @property
    def hi(self) -> float:
        return float(self.delta[-1])

    @property
    def n(self) -> int:
        return int(self.delta.size)

    def moment(self, order: int) -> float:
        return float(integrate.trapezoid(self.values * self.delta**order, self.delta))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({Columns.DELTA: self.delta, Columns.DENSITY: self.values})


@dataclass(frozen=True, eq=False)
class FreeEnergyProfile:
    """
    Free energy f(delta) with f(0) = 0, the diffusion strength on the same
    grid, and the located extrema as (location, f) pairs sorted by location.
    """

    grid: np.ndarray
    f: np.ndarray
    m2: np.ndarray
    minima: List[Tuple[float, float]]
    maxima: List[Tuple[float, float]] = field(default_factory=list)
    marginal: bool = False


@dataclass(frozen=True)
class StateClass:
    """Shape label of a distribution with its peaks as (location, weight)."""

    kind: str
    peaks: List[Tuple[float, float]]
    strong_tol: float = Tolerances.STRONG_LIMIT


@dataclass(frozen=True, eq=False)
class KernelSample:
    """Trajectories of the single-agent kernel, shape (steps + 1, walkers)."""

    trajectory: np.ndarray
    r: float

    def samples(self, burn_in: int = 0) -> np.ndarray:
        return self.trajectory[burn_in:].ravel()


def drift_from_scores(
    delta, beta: float, g_plus, g_minus
) -> np.ndarray:
    """M1 written with per-market expected scores G; broadcasts."""
    return (
        g_plus * choice_probability(beta, delta, 1)
        - g_minus * choice_probability(beta, delta, -1)
        - delta
    )


def diffusion_from_scores(
    delta, beta: float, g_plus, g_minus, h_plus, h_minus
) -> np.ndarray:
    """M2 written with expected scores G and second moments H; broadcasts."""
    return (
        np.square(delta)
        + choice_probability(beta, delta, 1) * (h_plus - 2 * delta * g_plus)
        + choice_probability(beta, delta, -1) * (h_minus + 2 * delta * g_minus)
    )


def drift_m1(
    delta, p_buy: float, conditions: MarketConditions, beta: float
):
    """
    Evaluates the drift of a group's attraction differences,
    M1 = sum over m, tau of m p_tau T_tau,m <S_tau,m> sigma_beta(m delta)
    minus delta.
    """
    g, _ = expected_scores(conditions, p_buy)
    return drift_from_scores(delta, beta, g[1], g[-1])


def diffusion_m2(
    delta, p_buy: float, conditions: MarketConditions, beta: float
):
    """
    Evaluates the diffusion strength M2, the mean squared scaled step. It
    must be positive wherever it is evaluated.
    """
    g, h = expected_scores(conditions, p_buy)
    m2 = diffusion_from_scores(delta, beta, g[1], g[-1], h[1], h[-1])
    if np.any(np.asarray(m2) <= 0):
        raise NumericalError("diffusion M2 is not positive on the grid")
    return m2


def _anchor_at_zero(f: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Shifts cumulative integrals along the last axis so that f(0) = 0."""
    right = int(np.searchsorted(x, 0.0))
    if x[right] == 0.0:
        return f - f[..., right : right + 1]
    left = right - 1
    share = (0.0 - x[left]) / (x[right] - x[left])
    zero = f[..., left] + share * (f[..., right] - f[..., left])
    return f - zero[..., None]


def _extrema(
    m1: Callable[[float], float], x: np.ndarray, values: np.ndarray
) -> Tuple[List[float], List[float], bool]:
    """Zeros of M1: falling crossings are minima of f, rising ones maxima."""
    minima, maxima, marginal = [], [], False
    signs = np.sign(values)
    for index in range(len(x) - 1):
        if signs[index] * signs[index + 1] < 0:
            root = optimize.brentq(m1, x[index], x[index + 1], xtol=Tolerances.ROOT_X)
            (minima if signs[index] > 0 else maxima).append(root)
        elif signs[index] == 0 and 0 < index < len(x) - 1:
            left, right = signs[index - 1], signs[index + 1]
            if left > 0 > right:
                minima.append(float(x[index]))
            elif left < 0 < right:
                maxima.append(float(x[index]))
            else:
                marginal = True

    magnitude = np.abs(values)
    interior = (magnitude[1:-1] <= magnitude[:-2]) & (magnitude[1:-1] <= magnitude[2:])
    touching = interior & (magnitude[1:-1] < 1e-9)
    if np.any(touching & (signs[:-2] == signs[2:])):
        marginal = True
    return minima, maxima, marginal


def profile_from_scores(
    beta: float,
    scores: Tuple[float, float, float, float],
    grid: GridSpec = GridSpec(),
) -> FreeEnergyProfile:
    """
    Builds the free-energy profile from the expected scores
    (G_plus, G_minus, H_plus, H_minus) of a group.
    """
    g_plus, g_minus, h_plus, h_minus = scores
    x = grid.points()
    m1_values = drift_from_scores(x, beta, g_plus, g_minus)
    m2_values = diffusion_from_scores(x, beta, g_plus, g_minus, h_plus, h_minus)
    if np.any(m2_values <= 0):
        raise NumericalError("diffusion M2 is not positive on the grid")

    def slope(d: float) -> float:
        return -2.0 * drift_from_scores(d, beta, g_plus, g_minus) / (
            diffusion_from_scores(d, beta, g_plus, g_minus, h_plus, h_minus)
        )

    f = integrate.cumulative_trapezoid(-2.0 * m1_values / m2_values, x, initial=0.0)
    f = _anchor_at_zero(f, x)

    def height(location: float) -> float:
        value, _ = integrate.quad(slope, 0.0, location, epsabs=1e-13, epsrel=1e-12)
        return value

    m1 = lambda d: float(drift_from_scores(d, beta, g_plus, g_minus))
    minima, maxima, marginal = _extrema(m1, x, m1_values)
    if marginal:
        logger.debug("marginal double root of M1 at beta=%s", beta)
    return FreeEnergyProfile(
        grid=x,
        f=f,
        m2=m2_values,
        minima=[(loc, height(loc)) for loc in minima],
        maxima=[(loc, height(loc)) for loc in maxima],
        marginal=marginal,
    )


def _scores(conditions: MarketConditions, p_buy: float) -> Tuple[float, ...]:
    g, h = expected_scores(conditions, p_buy)
    return g[1], g[-1], h[1], h[-1]


def free_energy(
    p_buy: float,
    conditions: MarketConditions,
    beta: float,
    grid: GridSpec = GridSpec(),
) -> FreeEnergyProfile:
    """
    Computes f(delta) = -2 times the integral from 0 to delta of M1 / M2.

    The profile is a cumulative trapezoid on the grid; minima are the
    falling zeros of M1 bracketed on the grid and refined by bisection,
    with their heights integrated adaptively.

    Args:
        p_buy (float): Buying preference of the group.
        conditions (MarketConditions): Conditions faced by the group.
        beta (float): Intensity of choice.
        grid (GridSpec): Grid of attraction differences.

    Returns:
        FreeEnergyProfile: The profile and its extrema.
    """
    return profile_from_scores(beta, _scores(conditions, p_buy), grid)


def distribution_from_profile(
    profile: FreeEnergyProfile, r: float
) -> AttractionGrid:
    """Normalizes (1 / M2) exp(-f / r) in the log domain."""
    if not r > 0:
        raise ConfigError("invalid learning rate", [f"r: {r} must be positive"])
    log_density = -profile.f / r - np.log(profile.m2)
    values = np.exp(log_density - np.max(log_density))
    values /= integrate.trapezoid(values, profile.grid)
    return AttractionGrid(delta=profile.grid, values=values)


def densities_from_scores(
    x: np.ndarray,
    beta: float,
    r: float,
    g_plus: np.ndarray,
    g_minus: np.ndarray,
    h_plus: np.ndarray,
    h_minus: np.ndarray,
) -> np.ndarray:
    """
    Stationary densities for many score sets at once.

    Score arrays of shape (k, 1) give densities of shape (k, len(x)).
    Rows whose diffusion is not positive are returned as NaN.
    """
    m1 = drift_from_scores(x, beta, g_plus, g_minus)
    m2 = diffusion_from_scores(x, beta, g_plus, g_minus, h_plus, h_minus)
    bad = np.any(m2 <= 0, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = integrate.cumulative_trapezoid(-2.0 * m1 / m2, x, initial=0.0, axis=-1)
        log_density = -f / r - np.log(m2)
    log_density -= np.max(log_density, axis=-1, keepdims=True)
    values = np.exp(log_density)
    values /= integrate.trapezoid(values, x, axis=-1)[..., None]
    values[bad] = np.nan
    return values


def stationary_distribution(
    p_buy: float,
    conditions: MarketConditions,
    beta: float,
    r: float,
    grid: GridSpec = GridSpec(),
) -> AttractionGrid:
    """
    Computes the stationary density P(delta) proportional to
    (1 / M2) exp(-f / r), normalized on the grid.
    """
    return distribution_from_profile(free_energy(p_buy, conditions, beta, grid), r)


def _strong_tol(r: Optional[float]) -> float:
    if r:
        return Tolerances.STRONG_FACTOR * r
    return Tolerances.STRONG_LIMIT


def _basin_weights(
    profile: FreeEnergyProfile, r: float
) -> List[float]:
    density = distribution_from_profile(profile, r)
    edges = [profile.grid[0]] + [loc for loc, _ in profile.maxima] + [profile.grid[-1]]
    weights = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        inside = (density.delta >= lo) & (density.delta <= hi)
        weights.append(
            float(integrate.trapezoid(density.values[inside], density.delta[inside]))
        )
    return weights


def classify_state(
    profile: FreeEnergyProfile,
    r: Optional[float] = None,
    strong_tol: Optional[float] = None,
) -> StateClass:
    """
    Labels a profile unfragmented (one minimum), strongly fragmented (the
    two lowest minima equal within strong_tol) or weakly fragmented.

    Peak weights integrate the density over the basin of each minimum when
    r is finite; in the r -> 0 limit the weight sits on the lowest minima.

    Args:
        profile (FreeEnergyProfile): Profile to classify.
        r (Optional[float]): Learning rate, or None for the r -> 0 limit.
        strong_tol (Optional[float]): Overrides 10 r (or 1e-6 when r is None).

    Returns:
        StateClass: The label and the peaks.
    """
    tol = strong_tol if strong_tol is not None else _strong_tol(r)
    minima = profile.minima
    if not minima:
        index = int(np.argmin(profile.f))
        return StateClass(StateType.UNFRAGMENTED, [(float(profile.grid[index]), 1.0)], tol)

    heights = sorted(value for _, value in minima)
    if len(minima) == 1:
        kind = StateType.UNFRAGMENTED
    elif abs(heights[1] - heights[0]) <= tol:
        kind = StateType.STRONG
    else:
        kind = StateType.WEAK

    if r:
        weights = _basin_weights(profile, r)
        if len(weights) != len(minima):
            weights = [1.0 / len(minima)] * len(minima)
    else:
        lowest = [abs(value - heights[0]) <= tol for _, value in minima]
        weights = [flag / sum(lowest) for flag in lowest]
    peaks = [(loc, weight) for (loc, _), weight in zip(minima, weights)]
    return StateClass(kind, peaks, tol)


def peak_height_ratio(
    profile: FreeEnergyProfile, r: float, first: int = 0, second: int = 1
) -> float:
    """
    Ratio of stationary densities at two minima,
    M2(second) / M2(first) * exp(-(f(first) - f(second)) / r).
    """
    (loc_a, f_a), (loc_b, f_b) = profile.minima[first], profile.minima[second]
    m2_a = np.interp(loc_a, profile.grid, profile.m2)
    m2_b = np.interp(loc_b, profile.grid, profile.m2)
    return float(m2_b / m2_a * np.exp(-(f_a - f_b) / r))


def binder_cumulant(data: Union[AttractionGrid, Sequence[float], np.ndarray]) -> float:
    """
    Binder cumulant B = 1 - <delta^4> / (3 <delta^2>^2) of a gridded density
    or of a sample of attraction differences.
    """
    if isinstance(data, AttractionGrid):
        second, fourth = data.moment(2), data.moment(4)
    else:
        values = np.asarray(data, dtype=float)
        second, fourth = np.mean(values**2), np.mean(values**4)
    if not second > 0:
        raise NumericalError("Binder cumulant undefined for zero second moment")
    return float(1.0 - fourth / (3.0 * second**2))


def _positive_branch(
    mu: np.ndarray, sigma: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Samples scores from N(mu, sigma^2) restricted to S > 0."""
    draws = np.maximum(mu, 0.0).astype(float)
    spread = sigma > 0
    if np.any(spread):
        draws[spread] = stats.truncnorm.rvs(
            -mu[spread] / sigma[spread],
            np.inf,
            loc=mu[spread],
            scale=sigma[spread],
            random_state=rng,
        )
    return draws


def kernel_step(
    delta: np.ndarray,
    p_buy: float,
    conditions: MarketConditions,
    learning: LearningParams,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Advances independent agents one round against frozen market conditions:
    pick a market by softmax, an order type by p_buy, trade with probability
    Q T, draw the return from the positive branch and update
    delta' = m r S + (1 - r) delta.
    """
    delta = np.asarray(delta, dtype=float)
    size = delta.size
    chosen = np.where(rng.random(size) < choice_probability(learning.beta, delta, 1), 1, -1)
    buys = rng.random(size) < p_buy
    trade_prob, mu, sigma = np.zeros(size), np.zeros(size), np.zeros(size)
    prices = conditions.prices
    for market in conditions.markets:
        m, price = market.id, expected_price(market, prices)
        buying, selling = (chosen == m) & buys, (chosen == m) & ~buys
        trade_prob[buying] = conditions.q_buy[m] * conditions.t_buy[m]
        mu[buying], sigma[buying] = prices.mu_b - price, prices.sigma_b
        trade_prob[selling] = conditions.q_sell[m] * conditions.t_sell[m]
        mu[selling], sigma[selling] = price - prices.mu_a, prices.sigma_a

    trades = rng.random(size) < trade_prob
    scores = np.zeros(size)
    scores[trades] = _positive_branch(mu[trades], sigma[trades], rng)
    return chosen * learning.r * scores + (1.0 - learning.r) * delta


def kernel_monte_carlo(
    p_buy: float,
    conditions: MarketConditions,
    learning: LearningParams,
    steps: int,
    seed: Optional[int] = None,
    walkers: int = 1,
    initial: float = 0.0,
) -> KernelSample:
    """
    Simulates single agents with the stochastic transition kernel.

    Args:
        p_buy (float): Buying preference.
        conditions (MarketConditions): Frozen market conditions.
        learning (LearningParams): Learning rate and intensity of choice.
        steps (int): Rounds per walker.
        seed (Optional[int]): Seed of the run's own random stream.
        walkers (int): Number of independent agents advanced together.
        initial (float): Starting attraction difference.

    Returns:
        KernelSample: Trajectories of shape (steps + 1, walkers).
    """
    if steps < 1 or walkers < 1:
        raise ConfigError("invalid kernel run", [f"steps: {steps}, walkers: {walkers}"])
    rng = np.random.default_rng(seed)
    trajectory = np.empty((steps + 1, walkers))
    trajectory[0] = initial
    for step in range(steps):
        trajectory[step + 1] = kernel_step(trajectory[step], p_buy, conditions, learning, rng)
    return KernelSample(trajectory=trajectory, r=learning.r)


def sample_distance(
    samples: np.ndarray, dist: AttractionGrid, bins: int = 60
) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    Histograms samples over the density's grid and measures their
    total-variation distance to it.

    Returns:
        Tuple[np.ndarray, np.ndarray, float]: Bin centers, empirical
                                              density, and the distance.
    """
    edges = np.linspace(dist.lo, dist.hi, bins + 1)
    counts, _ = np.histogram(np.asarray(samples, dtype=float), bins=edges)
    if counts.sum() == 0:
        raise NumericalError("no samples fall inside the grid")
    empirical = counts / counts.sum()
    cumulative = integrate.cumulative_trapezoid(dist.values, dist.delta, initial=0.0)
    expected = np.diff(np.interp(edges, dist.delta, cumulative))
    distance = 0.5 * float(np.sum(np.abs(empirical - expected)))
    return 0.5 * (edges[1:] + edges[:-1]), empirical / np.diff(edges), distance


def single_group_conditions(
    p_buy: float,
    markets: Sequence[MarketSpec],
    prices: OrderPriceModel = OrderPriceModel(),
) -> MarketConditions:
    """Conditions of an isolated group, where D_m = p_buy / (1 - p_buy)."""
    ratio = p_buy / (1.0 - p_buy)
    return market_conditions(markets, prices, {m.id: ratio for m in markets})


def fragmentation_threshold(
    p_buy: float,
    markets: Sequence[MarketSpec],
    prices: OrderPriceModel = OrderPriceModel(),
    beta_max: float = Defaults.BETA_MAX,
    grid: GridSpec = GridSpec(),
) -> float:
    """
    Smallest beta at which an isolated group's free energy has two minima,
    bracketed on a scan and refined by bisection.
    """
    scores = _scores(single_group_conditions(p_buy, markets, prices), p_buy)

    def bimodal(beta: float) -> bool:
        return len(profile_from_scores(beta, scores, grid).minima) >= 2

    betas = np.linspace(0.0, beta_max, GridDefaults.BETA_SCAN_POINTS + 1)[1:]
    previous = 0.0
    for beta in betas:
        if bimodal(beta):
            lo, hi = previous, float(beta)
            while hi - lo > Tolerances.THRESHOLD:
                mid = 0.5 * (lo + hi)
                lo, hi = (lo, mid) if bimodal(mid) else (mid, hi)
            return hi
        previous = float(beta)
    return float("inf")


def state_map(
    beta: float,
    p_buy: float,
    markets: Sequence[MarketSpec],
    d_values: Sequence[float],
    prices: OrderPriceModel = OrderPriceModel(),
    r: Optional[float] = None,
    grid: GridSpec = GridSpec(),
) -> pd.DataFrame:
    """
    Classifies an isolated group over a lattice of exogenous ratios
    (D_plus, D_minus).

    Returns:
        pd.DataFrame: Columns d_plus, d_minus, kind.
    """
    rows = []
    for d_plus in d_values:
        for d_minus in d_values:
            conditions = market_conditions(markets, prices, (d_plus, d_minus))
            profile = free_energy(p_buy, conditions, beta, grid)
            rows.append(
                {
                    Columns.D_PLUS: d_plus,
                    Columns.D_MINUS: d_minus,
                    Columns.KIND: classify_state(profile, r).kind,
                }
            )
    return pd.DataFrame(rows)
