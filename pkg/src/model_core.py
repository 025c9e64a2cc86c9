import math
import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Sequence, Tuple, Union

import numpy as np
from scipy import integrate, special

from src.errors import ConfigError
from src.constants import Defaults, Tolerances

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

MARKETS: Tuple[int, int] = (1, -1)
_SQRT_2PI: float = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class MarketSpec:
    """
    A market identified by its label m in {+1, -1} and its price-setting
    bias theta, which places the price between the average ask (0) and the
    average bid (1).
    """

    theta: float
    id: int = 1

    def __post_init__(self) -> None:
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError(
                "invalid market", [f"theta: {self.theta} not in [0, 1]"]
            )
        if self.id not in MARKETS:
            raise ConfigError("invalid market", [f"id: {self.id} not in ±1"])


@dataclass(frozen=True)
class OrderPriceModel:
    """Gaussian bid and ask distributions of submitted orders."""

    mu_a: float = Defaults.MU_A
    mu_b: float = Defaults.MU_B
    sigma_a: float = Defaults.SIGMA_A
    sigma_b: float = Defaults.SIGMA_B

    def __post_init__(self) -> None:
        problems = []
        if not self.mu_b > self.mu_a:
            problems.append(f"mu_b: {self.mu_b} must exceed mu_a")
        if self.sigma_a < 0:
            problems.append(f"sigma_a: {self.sigma_a} is negative")
        if self.sigma_b < 0:
            problems.append(f"sigma_b: {self.sigma_b} is negative")
        if problems:
            raise ConfigError("invalid order prices", problems)

    @property
    def spread(self) -> float:
        return self.mu_b - self.mu_a


@dataclass(frozen=True)
class GroupSpec:
    """A group of agents sharing a fixed buying preference."""

    p_buy: float
    weight: float = Defaults.GROUP_WEIGHT

    def __post_init__(self) -> None:
        problems = []
        if not 0.0 <= self.p_buy <= 1.0:
            problems.append(f"p_buy: {self.p_buy} not in [0, 1]")
        if not 0.0 <= self.weight <= 1.0:
            problems.append(f"weight: {self.weight} not in [0, 1]")
        if problems:
            raise ConfigError("invalid group", problems)


@dataclass(frozen=True)
class LearningParams:
    """Learning rate r (inverse memory) and intensity of choice beta."""

    r: float
    beta: float

    def __post_init__(self) -> None:
        problems = []
        if not 0.0 < self.r <= 1.0:
            problems.append(f"r: {self.r} not in (0, 1]")
        if not self.beta >= 0.0:
            problems.append(f"beta: {self.beta} is negative")
        if problems:
            raise ConfigError("invalid learning parameters", problems)


@dataclass(frozen=True)
class ReturnMoments:
    """Partial moments of the positive-return branch of a score."""

    m1: float
    m2: float


@dataclass(frozen=True)
class MarketConditions:
    """
    Market state seen by a group of agents: demand-to-supply ratios, the
    validity and execution probabilities they imply, and the partial return
    moments of both order types. All maps are keyed by market label.
    """

    d: Dict[int, float]
    q_buy: Dict[int, float]
    q_sell: Dict[int, float]
    t_buy: Dict[int, float]
    t_sell: Dict[int, float]
    buy_moments: Dict[int, ReturnMoments]
    sell_moments: Dict[int, ReturnMoments]
    markets: Tuple[MarketSpec, ...]
    prices: OrderPriceModel


def default_markets(
    theta_plus: float = Defaults.THETA_PLUS,
    theta_minus: float = Defaults.THETA_MINUS,
) -> Tuple[MarketSpec, MarketSpec]:
    """
    Builds the two markets with their biases.

    Args:
        theta_plus (float): Bias of market +1.
        theta_minus (float): Bias of market -1.

    Returns:
        Tuple[MarketSpec, MarketSpec]: Markets +1 and -1, in that order.
    """
    return MarketSpec(theta_plus, 1), MarketSpec(theta_minus, -1)


def check_group_weights(groups: Sequence[GroupSpec]) -> None:
    """Fails fast unless the group weights sum to one."""
    total = sum(group.weight for group in groups)
    if not groups or abs(total - 1.0) > 1e-9:
        raise ConfigError("invalid groups", [f"weights sum to {total}, not 1"])


def expected_price(market: MarketSpec, prices: OrderPriceModel) -> float:
    """Returns the deterministic trading price at the ensemble means."""
    return prices.mu_a + market.theta * (prices.mu_b - prices.mu_a)


def _tail_above(mean: float, sigma: float, level: float) -> float:
    if sigma == 0:
        return float(np.heaviside(mean - level, 0.5))
    return float(special.ndtr((mean - level) / sigma))


def validity_probs(
    market: MarketSpec, prices: OrderPriceModel
) -> Tuple[float, float]:
    """
    Computes the probabilities that a bid and an ask are valid at the
    market's trading price.

    A bid is valid when it lies above the price and an ask when it lies
    below it. With zero spread the probabilities become step functions,
    taking the value one half at exact equality.

    Args:
        market (MarketSpec): The market, providing its bias.
        prices (OrderPriceModel): Bid and ask distributions.

    Returns:
        Tuple[float, float]: A tuple containing:
                             - q_buy: P(b > price).
                             - q_sell: P(a < price).
    """
    price = expected_price(market, prices)
    q_buy = _tail_above(prices.mu_b, prices.sigma_b, price)
    q_sell = _tail_above(price, prices.sigma_a, prices.mu_a)
    return q_buy, q_sell


def execution_probs(
    q_buy: ArrayLike, q_sell: ArrayLike, d: ArrayLike
) -> Tuple[ArrayLike, ArrayLike]:
    """
    Computes the probabilities that valid buy and sell orders execute.

    The short side of a market always trades; the long side is rationed
    by the ratio of valid volumes. Vectorized over numpy inputs.

    Args:
        q_buy: Validity probability of bids.
        q_sell: Validity probability of asks.
        d: Demand-to-supply ratio D_m.

    Returns:
        Tuple: (t_buy, t_sell), each clamped to [0, 1].
    """
    q_buy_arr = np.asarray(q_buy, dtype=float)
    q_sell_arr = np.asarray(q_sell, dtype=float)
    d_arr = np.asarray(d, dtype=float)
    if np.any(d_arr <= 0) or np.any(q_buy_arr <= 0):
        raise ValueError("execution_probs needs d > 0 and q_buy > 0")

    buy_volume = q_buy_arr * d_arr
    t_buy = np.minimum(1.0, q_sell_arr / buy_volume)
    with np.errstate(divide="ignore"):
        t_sell = np.where(
            q_sell_arr > 0,
            np.minimum(1.0, buy_volume / np.where(q_sell_arr > 0, q_sell_arr, 1)),
            1.0,
        )
    if t_buy.ndim == 0:
        return float(t_buy), float(t_sell)
    return t_buy, t_sell


def _quadrature_moments(mu_eff: float, sigma: float) -> ReturnMoments:
    def density(s: float) -> float:
        z = (s - mu_eff) / sigma
        return math.exp(-0.5 * z * z) / (sigma * _SQRT_2PI)

    m1, _ = integrate.quad(
        lambda s: s * density(s), 0.0, np.inf, epsabs=0.0, epsrel=1e-12
    )
    m2, _ = integrate.quad(
        lambda s: s * s * density(s), 0.0, np.inf, epsabs=0.0, epsrel=1e-12
    )
    return ReturnMoments(m1=m1, m2=m2)


def partial_return_moments(mu_eff: float, sigma: float) -> ReturnMoments:
    """
    Computes the first and second moments of a Gaussian score restricted to
    its positive branch, m_k = integral over S > 0 of S^k N(S; mu_eff, sigma^2).

    Uses the error-function closed form, falling back to adaptive quadrature
    deep in the lower tail where the closed form cancels.

    Args:
        mu_eff (float): Mean score: mu_b - price for buys, price - mu_a for
                        sells.
        sigma (float): Spread of the score, zero for deterministic orders.

    Returns:
        ReturnMoments: The partial moments m1 and m2.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        positive = max(mu_eff, 0.0)
        return ReturnMoments(m1=positive, m2=positive * positive)

    z = mu_eff / sigma
    if z < Tolerances.MOMENT_SWITCH:
        return _quadrature_moments(mu_eff, sigma)

    cdf = float(special.ndtr(z))
    pdf = math.exp(-0.5 * z * z) / _SQRT_2PI
    m1 = mu_eff * cdf + sigma * pdf
    m2 = (mu_eff * mu_eff + sigma * sigma) * cdf + mu_eff * sigma * pdf
    if not (math.isfinite(m1) and math.isfinite(m2)) or m1 < 0:
        logger.debug("closed-form moments failed at z=%s", z)
        return _quadrature_moments(mu_eff, sigma)
    return ReturnMoments(m1=m1, m2=m2)


def choice_probability(beta: float, delta: ArrayLike, market: int = 1):
    """
    Returns sigma_beta(m * delta), the probability of choosing market m.
    Overflow-safe; an infinite beta selects by sign with one half at zero.
    """
    argument = np.asarray(delta, dtype=float) * market
    with np.errstate(invalid="ignore"):
        scaled = beta * argument
    probability = special.expit(np.where(argument == 0, 0.0, scaled))
    if probability.ndim == 0:
        return float(probability)
    return probability


def softmax_pair(beta: float, delta: ArrayLike) -> Tuple[ArrayLike, ArrayLike]:
    """Returns the choice probabilities (p_plus, p_minus) of both markets."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    p_plus = choice_probability(beta, delta, 1)
    p_minus = choice_probability(beta, delta, -1)
    return p_plus, p_minus


def market_conditions(
    markets: Sequence[MarketSpec],
    prices: OrderPriceModel,
    d: Union[Mapping[int, float], Sequence[float]],
) -> MarketConditions:
    """
    Assembles validity and execution probabilities and the partial return
    moments for every market at the given demand-to-supply ratios.

    Args:
        markets (Sequence[MarketSpec]): Markets +1 and -1.
        prices (OrderPriceModel): Bid and ask distributions.
        d: Demand-to-supply ratios, either a map keyed by market label or a
           pair ordered like `markets`.

    Returns:
        MarketConditions: The fully populated market conditions.
    """
    if not isinstance(d, Mapping):
        d = {market.id: float(value) for market, value in zip(markets, d)}

    q_buy, q_sell, t_buy, t_sell = {}, {}, {}, {}
    buy_moments, sell_moments, ratios = {}, {}, {}
    for market in markets:
        m = market.id
        ratios[m] = float(d[m])
        q_buy[m], q_sell[m] = validity_probs(market, prices)
        t_buy[m], t_sell[m] = execution_probs(q_buy[m], q_sell[m], ratios[m])
        price = expected_price(market, prices)
        buy_moments[m] = partial_return_moments(
            prices.mu_b - price, prices.sigma_b
        )
        sell_moments[m] = partial_return_moments(
            price - prices.mu_a, prices.sigma_a
        )

    return MarketConditions(
        d=ratios,
        q_buy=q_buy,
        q_sell=q_sell,
        t_buy=t_buy,
        t_sell=t_sell,
        buy_moments=buy_moments,
        sell_moments=sell_moments,
        markets=tuple(markets),
        prices=prices,
    )


def expected_scores(
    conditions: MarketConditions, p_buy: float
) -> Tuple[Dict[int, float], Dict[int, float]]:
    """
    Computes per-market expected scores of an agent with buying preference
    p_buy, counting rounds without a trade as zero.

    Args:
        conditions (MarketConditions): Market conditions for the group.
        p_buy (float): Probability of submitting a buy order.

    Returns:
        Tuple[Dict[int, float], Dict[int, float]]: A tuple containing:
            - G: sum over order types of p_tau * T_tau,m * <S_tau,m>.
            - H: the same with second moments <S^2_tau,m>.
    """
    g, h = {}, {}
    for m in conditions.d:
        buy, sell = conditions.buy_moments[m], conditions.sell_moments[m]
        t_buy, t_sell = conditions.t_buy[m], conditions.t_sell[m]
        g[m] = p_buy * t_buy * buy.m1 + (1 - p_buy) * t_sell * sell.m1
        h[m] = p_buy * t_buy * buy.m2 + (1 - p_buy) * t_sell * sell.m2
    return g, h


def market_score_curve(
    market: MarketSpec, prices: OrderPriceModel, p_buy: float, d: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorized form of `expected_scores` for one market over an array of
    demand-to-supply ratios. A market's scores depend only on its own D_m.

    Returns:
        Tuple[np.ndarray, np.ndarray]: Arrays G_m(D) and H_m(D).
    """
    q_buy, q_sell = validity_probs(market, prices)
    t_buy, t_sell = execution_probs(q_buy, q_sell, np.asarray(d, dtype=float))
    price = expected_price(market, prices)
    buy = partial_return_moments(prices.mu_b - price, prices.sigma_b)
    sell = partial_return_moments(price - prices.mu_a, prices.sigma_a)
    g = p_buy * t_buy * buy.m1 + (1 - p_buy) * t_sell * sell.m1
    h = p_buy * t_buy * buy.m2 + (1 - p_buy) * t_sell * sell.m2
    return np.asarray(g), np.asarray(h)
