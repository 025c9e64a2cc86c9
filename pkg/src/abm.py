import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.errors import ConfigError
from src.constants import Columns, Defaults, Lifetime
from src.model_core import GroupSpec, LearningParams, MarketSpec, OrderPriceModel
from src.model_core import check_group_weights, choice_probability, default_markets

logger = logging.getLogger(__name__)

INITIAL_KINDS: Tuple[str, str] = ("zero", "gaussian")


@dataclass(frozen=True)
class InitialCondition:
    """Distribution of the initial attraction differences."""

    kind: str = "zero"
    mean: float = 0.0
    std: float = 0.0

    def __post_init__(self) -> None:
        problems = []
        if self.kind not in INITIAL_KINDS:
            problems.append(f"kind: {self.kind!r} not in {INITIAL_KINDS}")
        if self.std < 0:
            problems.append(f"std: {self.std} is negative")
        if problems:
            raise ConfigError("invalid initial condition", problems)


@dataclass(frozen=True)
class SimConfig:
    """
    Everything a finite-population run needs. Group sizes follow the group
    weights, rounded so that they sum to n_agents.
    """

    n_agents: int
    groups: Tuple[GroupSpec, ...]
    learning: LearningParams
    markets: Tuple[MarketSpec, MarketSpec] = field(default_factory=default_markets)
    prices: OrderPriceModel = field(default_factory=OrderPriceModel)
    initial: InitialCondition = field(default_factory=InitialCondition)
    seed: Optional[int] = None
    rounds: int = Defaults.HORIZON_ROUNDS
    stride: int = 1  # Rounds between series samples.
    snapshot_every: int = 0  # Rounds between full snapshots, 0 for none.
    snapshot_times: Tuple[float, ...] = ()  # Extra snapshot times t = n r.

    def __post_init__(self) -> None:
        problems = []
        if self.n_agents < 2:
            problems.append(f"n_agents: {self.n_agents} is fewer than 2")
        if self.rounds < 1:
            problems.append(f"rounds: {self.rounds} is not positive")
        if self.stride < 1:
            problems.append(f"stride: {self.stride} is not positive")
        if self.snapshot_every < 0:
            problems.append(f"snapshot_every: {self.snapshot_every} is negative")
        if problems:
            raise ConfigError("invalid simulation", problems)
        check_group_weights(self.groups)

    def group_sizes(self) -> List[int]:
        """Largest-remainder split of n_agents by group weight."""
        exact = np.array([g.weight for g in self.groups]) * self.n_agents
        sizes = np.floor(exact).astype(int)
        order = np.argsort(-(exact - sizes), kind="stable")
        sizes[order[: self.n_agents - sizes.sum()]] += 1
        return sizes.tolist()

    def snapshot_rounds(self) -> set:
        rounds = {int(round(t / self.learning.r)) for t in self.snapshot_times}
        if self.snapshot_every:
            rounds.update(range(0, self.rounds + 1, self.snapshot_every))
        return rounds


@dataclass(frozen=True)
class AgentState:
    """One agent: attractions (A_plus, A_minus), group and buying preference."""

    attractions: Tuple[float, float]
    group: int
    p_buy: float

    @property
    def delta(self) -> float:
        return self.attractions[0] - self.attractions[1]


@dataclass
class Population:
    """Agent states stored column-wise; attractions has shape (N, 2)."""

    attractions: np.ndarray
    group: np.ndarray
    p_buy: np.ndarray

    def __len__(self) -> int:
        return len(self.group)

    @property
    def delta(self) -> np.ndarray:
        return self.attractions[:, 0] - self.attractions[:, 1]

    def agent(self, index: int) -> AgentState:
        return AgentState(
            attractions=tuple(self.attractions[index].tolist()),
            group=int(self.group[index]),
            p_buy=float(self.p_buy[index]),
        )

    @classmethod
    def from_config(cls, config: SimConfig, rng: np.random.Generator) -> "Population":
        """
        Builds the population with attractions (delta / 2, -delta / 2), where
        delta is zero or drawn from the configured Gaussian.
        """
        sizes = config.group_sizes()
        group = np.repeat(np.arange(len(sizes)), sizes)
        p_buy = np.array([g.p_buy for g in config.groups])[group]
        if config.initial.kind == "gaussian":
            delta = rng.normal(config.initial.mean, config.initial.std, config.n_agents)
        else:
            delta = np.zeros(config.n_agents)
        attractions = np.column_stack([delta / 2.0, -delta / 2.0])
        return cls(attractions=attractions, group=group, p_buy=p_buy)


@dataclass(frozen=True, eq=False)
class RoundOutcome:
    """Per-market order book statistics and per-agent results of one round."""

    prices: Dict[int, float]
    buy_orders: Dict[int, int]
    sell_orders: Dict[int, int]
    valid_buys: Dict[int, int]
    valid_sells: Dict[int, int]
    trades: Dict[int, int]
    choices: np.ndarray
    buys: np.ndarray
    scores: np.ndarray


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """
    Long table with columns (t, group, binder, mean_delta, d_plus, d_minus)
    sampled every `stride` rounds at rescaled time t = n r.
    """

    frame: pd.DataFrame
    stride: int
    r: float

    def group_frame(self, group: int) -> pd.DataFrame:
        return self.frame[self.frame[Columns.GROUP] == group].reset_index(drop=True)


@dataclass(frozen=True, eq=False)
class SimulationResult:
    series: TimeSeries
    snapshots: Optional[pd.DataFrame] = None


def _market_column(choices: np.ndarray) -> np.ndarray:
    return (1 - choices) // 2


def step_round(
    population: Population, config: SimConfig, rng: np.random.Generator
) -> RoundOutcome:
    """
    Plays one trading round and updates attractions in place.

    Each agent picks a market by softmax and an order type by its buying
    preference, then draws a bid or an ask. A market's price lies between
    the mean submitted ask and bid at its bias; bids below it and asks
    above it are invalid. Valid orders are paired at random, the surplus
    scores zero, and traders score b - price or price - a. Both attractions
    decay by (1 - r) and the chosen market's gains r S.

    Args:
        population (Population): Agents, updated in place.
        config (SimConfig): Model parameters.
        rng (np.random.Generator): The run's random stream.

    Returns:
        RoundOutcome: Prices, order counts, trades and scores.
    """
    size = len(population)
    if size == 0:
        raise ConfigError("empty population")
    beta, r = config.learning.beta, config.learning.r
    prices_model = config.prices

    choices = np.where(rng.random(size) < choice_probability(beta, population.delta, 1), 1, -1)
    buys = rng.random(size) < population.p_buy
    bids = rng.normal(prices_model.mu_b, prices_model.sigma_b, size)
    asks = rng.normal(prices_model.mu_a, prices_model.sigma_a, size)
    scores = np.zeros(size)

    prices, trades = {}, {}
    buy_orders, sell_orders, valid_buys, valid_sells = {}, {}, {}, {}
    for market in config.markets:
        m = market.id
        buyers = np.flatnonzero((choices == m) & buys)
        sellers = np.flatnonzero((choices == m) & ~buys)
        buy_orders[m], sell_orders[m] = buyers.size, sellers.size
        if buyers.size == 0 or sellers.size == 0:
            prices[m] = float("nan")
            valid_buys[m] = valid_sells[m] = trades[m] = 0
            continue

        mean_ask = asks[sellers].mean()
        price = mean_ask + market.theta * (bids[buyers].mean() - mean_ask)
        valid_b = buyers[bids[buyers] >= price]
        valid_s = sellers[asks[sellers] <= price]
        count = min(valid_b.size, valid_s.size)
        matched_b = rng.choice(valid_b, size=count, replace=False) if count else valid_b[:0]
        matched_s = rng.choice(valid_s, size=count, replace=False) if count else valid_s[:0]
        scores[matched_b] = bids[matched_b] - price
        scores[matched_s] = price - asks[matched_s]

        prices[m] = float(price)
        valid_buys[m], valid_sells[m], trades[m] = valid_b.size, valid_s.size, count

    population.attractions *= 1.0 - r
    population.attractions[np.arange(size), _market_column(choices)] += r * scores
    return RoundOutcome(
        prices=prices,
        buy_orders=buy_orders,
        sell_orders=sell_orders,
        valid_buys=valid_buys,
        valid_sells=valid_sells,
        trades=trades,
        choices=choices,
        buys=buys,
        scores=scores,
    )


def _binder(second: np.ndarray, fourth: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(second > 0, 1.0 - fourth / (3.0 * second**2), np.nan)


def _ratio(buy: int, sell: int) -> float:
    return buy / sell if sell else float("nan")


def run_simulation(config: SimConfig, progress: bool = False) -> SimulationResult:
    """
    Runs the finite-population model for `config.rounds` rounds.

    Samples every `stride` rounds, starting with the initial state, the
    per-group Binder cumulant and mean attraction difference together with
    the round's demand-to-supply ratios. Identical configs and seeds give
    identical results.

    Args:
        config (SimConfig): The run's parameters and seed.
        progress (bool): Shows a progress bar over rounds.

    Returns:
        SimulationResult: The time series and the optional snapshots.
    """
    rng = np.random.default_rng(config.seed)
    population = Population.from_config(config, rng)
    groups = np.arange(len(config.groups))
    snapshot_rounds = config.snapshot_rounds()
    samples: List[Tuple] = []
    snapshots: List[pd.DataFrame] = []
    degenerate = 0

    def record(n: int, d: Tuple[float, float]) -> None:
        nonlocal degenerate
        delta = population.delta
        for g in groups:
            values = delta[population.group == g]
            second, fourth = np.mean(values**2), np.mean(values**4)
            binder = float(_binder(np.asarray(second), np.asarray(fourth)))
            degenerate += np.isnan(binder)
            samples.append((n * config.learning.r, g, binder, values.mean(), d[0], d[1]))

    def snapshot(n: int) -> None:
        snapshots.append(
            pd.DataFrame(
                {
                    Columns.TIME: n * config.learning.r,
                    Columns.GROUP: population.group,
                    Columns.AGENT: np.arange(len(population)),
                    Columns.DELTA: population.delta,
                }
            )
        )

    record(0, (float("nan"), float("nan")))
    if 0 in snapshot_rounds:
        snapshot(0)
    for n in tqdm(range(1, config.rounds + 1), disable=not progress, desc="rounds"):
        outcome = step_round(population, config, rng)
        if n % config.stride == 0:
            record(
                n,
                tuple(_ratio(outcome.buy_orders[m], outcome.sell_orders[m]) for m in (1, -1)),
            )
        if n in snapshot_rounds:
            snapshot(n)

    if degenerate:
        logger.warning("%d samples had a group with zero second moment", degenerate)
    columns = [
        Columns.TIME, Columns.GROUP, Columns.BINDER,
        Columns.MEAN_DELTA, Columns.D_PLUS, Columns.D_MINUS,
    ]
    series = TimeSeries(pd.DataFrame(samples, columns=columns), config.stride, config.learning.r)
    frames = pd.concat(snapshots, ignore_index=True) if snapshots else None
    return SimulationResult(series=series, snapshots=frames)


def binder_series(snapshots: pd.DataFrame, r: float = float("nan")) -> TimeSeries:
    """
    Per-group Binder cumulant of the attraction differences in each
    snapshot. Groups with a zero second moment get NaN and a warning.
    """
    if snapshots.groupby([Columns.TIME, Columns.GROUP]).size().min() < 2:
        raise ConfigError("Binder series needs at least two agents per group")
    moments = (
        snapshots.assign(
            second=snapshots[Columns.DELTA] ** 2, fourth=snapshots[Columns.DELTA] ** 4
        )
        .groupby([Columns.TIME, Columns.GROUP], as_index=False)
        .agg(
            mean_delta=(Columns.DELTA, "mean"),
            second=("second", "mean"),
            fourth=("fourth", "mean"),
        )
    )
    binder = _binder(moments["second"].to_numpy(), moments["fourth"].to_numpy())
    if np.isnan(binder).any():
        logger.warning("%d degenerate group snapshots", int(np.isnan(binder).sum()))
    frame = pd.DataFrame(
        {
            Columns.TIME: moments[Columns.TIME],
            Columns.GROUP: moments[Columns.GROUP],
            Columns.BINDER: binder,
            Columns.MEAN_DELTA: moments["mean_delta"],
            Columns.D_PLUS: np.nan,
            Columns.D_MINUS: np.nan,
        }
    )
    times = np.unique(frame[Columns.TIME])
    stride = int(round((times[1] - times[0]) / r)) if len(times) > 1 and r > 0 else 0
    return TimeSeries(frame, stride, r)


def lifetime_estimate(
    series: TimeSeries,
    strong: Sequence[float],
    alternatives: Sequence[Sequence[float]],
    band: float = Lifetime.BAND,
    dwell: float = Lifetime.DWELL,
) -> Tuple[float, bool]:
    """
    Time at which the population leaves the strongly fragmented state.

    The state is entered once every group's Binder cumulant lies within
    `band` of its strong prediction. It is left at the first time at which
    some group is outside its strong band and inside the band of one of its
    alternative predictions, and this holds for `dwell` time units.

    Args:
        series (TimeSeries): Simulated Binder series.
        strong (Sequence[float]): Strong-fragmentation Binder value per group.
        alternatives (Sequence[Sequence[float]]): Other predicted values per
                                                  group.
        band (float): Half-width of every band.
        dwell (float): Time the alternative band must be held.

    Returns:
        Tuple[float, bool]: The lifetime and whether it is censored. A run
                            that never reaches the strong state has
                            lifetime 0.
    """
    table = series.frame.pivot(index=Columns.TIME, columns=Columns.GROUP, values=Columns.BINDER)
    times, binder = table.index.to_numpy(), table.to_numpy()
    if binder.shape[1] != len(strong) or len(alternatives) != len(strong):
        raise ConfigError("targets do not match the groups in the series")

    in_strong = np.abs(binder - np.asarray(strong)[None, :]) <= band
    entered = np.flatnonzero(np.all(in_strong, axis=1))
    if entered.size == 0:
        return 0.0, False

    in_alternative = np.zeros_like(in_strong)
    for g, targets in enumerate(alternatives):
        for target in targets:
            in_alternative[:, g] |= np.abs(binder[:, g] - target) <= band
    escaped = np.any(in_alternative & ~in_strong, axis=1)

    for index in np.flatnonzero(escaped):
        if index <= entered[0]:
            continue
        if times[-1] < times[index] + dwell:
            break
        window = (times >= times[index]) & (times <= times[index] + dwell)
        if np.all(escaped[window]):
            return float(times[index]), False
    return float(times[-1]), True


def attraction_autocorrelation(snapshots: pd.DataFrame, origin: float) -> pd.DataFrame:
    """
    Centered autocorrelation of single-agent attraction differences,
    C(t) = mean over agents of (delta_i(s) - mean(s)) (delta_i(s + t) -
    mean(s + t)), from the first snapshot at or after `origin`.

    Returns:
        pd.DataFrame: Columns group, lag, correlation.
    """
    frames = []
    for g, part in snapshots.groupby(Columns.GROUP):
        table = part.pivot(index=Columns.TIME, columns=Columns.AGENT, values=Columns.DELTA)
        table = table[table.index >= origin]
        if table.empty:
            raise ConfigError(f"no snapshots at or after t={origin}")
        values = table.to_numpy()
        centered = values - values.mean(axis=1, keepdims=True)
        frames.append(
            pd.DataFrame(
                {
                    Columns.GROUP: g,
                    Columns.LAG: table.index.to_numpy() - table.index[0],
                    Columns.CORRELATION: np.mean(centered[0][None, :] * centered, axis=1),
                }
            )
        )
    return pd.concat(frames, ignore_index=True)


def correlation_time(curve: pd.DataFrame) -> float:
    """First lag at which C / C(0) falls below 1/e; NaN if it never does."""
    correlation = curve[Columns.CORRELATION].to_numpy()
    below = np.flatnonzero(correlation / correlation[0] < np.exp(-1.0))
    return float(curve[Columns.LAG].to_numpy()[below[0]]) if below.size else float("nan")


def _lifetime_worker(task: Tuple) -> Dict:
    config, strong, alternatives = task
    series = run_simulation(config).series
    lifetime, censored = lifetime_estimate(series, strong, alternatives)
    return {
        Columns.N_AGENTS: config.n_agents,
        Columns.R: config.learning.r,
        Columns.SEED: config.seed,
        Columns.LIFETIME: lifetime,
        Columns.CENSORED: censored,
    }


def lifetime_sweep(
    configs: Sequence[SimConfig],
    strong: Sequence[float],
    alternatives: Sequence[Sequence[float]],
    workers: int = 1,
    progress: bool = False,
) -> pd.DataFrame:
    """
    Lifetimes of independent runs, one row per config, in config order.
    Use `median_lifetimes` to summarize over seeds.
    """
    tasks = [(config, strong, alternatives) for config in configs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            rows = list(tqdm(executor.map(_lifetime_worker, tasks), total=len(tasks), disable=not progress))
    else:
        rows = [_lifetime_worker(task) for task in tqdm(tasks, disable=not progress)]
    return pd.DataFrame(rows)


def median_lifetimes(frame: pd.DataFrame, by: str) -> pd.DataFrame:
    """Median lifetime and censored share per value of `by`."""
    return (
        frame.groupby(by, as_index=False)
        .agg(lifetime=(Columns.LIFETIME, "median"), censored=(Columns.CENSORED, "mean"))
        .sort_values(by)
        .reset_index(drop=True)
    )
