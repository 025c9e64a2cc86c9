import logging
import itertools
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import integrate, optimize

from src.errors import ConfigError, NumericalError
from src.model_core import MARKETS, choice_probability
from src.constants import Columns, Defaults, FixedPointClass, GridDefaults
from src.constants import Tolerances

logger = logging.getLogger(__name__)

# Rows: buyer-leaning group, seller-leaning group. Columns: agent index.
_N_OTHERS: int = 3
_COUNTS = np.arange(_N_OTHERS + 1, dtype=float)
# Fill rates min(1, n_S/(n_B+1)) and min(1, n_B/(n_S+1)), indexed [n_B, n_S].
_BUY_FILL = np.minimum(1.0, _COUNTS[None, :] / (_COUNTS[:, None] + 1.0))
_SELL_FILL = np.minimum(1.0, _COUNTS[:, None] / (_COUNTS[None, :] + 1.0))


@dataclass(frozen=True)
class TwoPlayerState:
    """Mean xi and deviation rho of the two agents' attraction differences."""

    xi: float
    rho: float

    @property
    def deltas(self) -> Tuple[float, float]:
        return self.xi + self.rho, self.xi - self.rho

    def as_array(self) -> np.ndarray:
        return np.array([self.xi, self.rho])


@dataclass(frozen=True, eq=False)
class FourPlayerState:
    """Attraction differences delta[g, i] of two agents in each of two groups."""

    delta: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.delta, dtype=float).reshape(2, 2)
        if not np.all(np.isfinite(values)):
            raise ValueError("four-player state must be finite")
        object.__setattr__(self, "delta", values)

    def as_array(self) -> np.ndarray:
        return self.delta.ravel().copy()


@dataclass(frozen=True)
class FixedPointRecord:
    """A fixed point of the r -> 0 flow with its stability and class."""

    state: Union[TwoPlayerState, FourPlayerState]
    stable: bool
    kind: str
    marginal: bool = False
    max_eigenvalue: float = float("nan")
    avg_return: float = float("nan")


def _check_symmetric(theta: float, p_buy: float) -> None:
    problems = []
    if not 0.0 <= theta <= 1.0:
        problems.append(f"theta: {theta} not in [0, 1]")
    if not 0.0 <= p_buy <= 1.0:
        problems.append(f"p_buy: {p_buy} not in [0, 1]")
    if problems:
        raise ConfigError("invalid small-system parameters", problems)


def _role_factors(theta: float, p_buy: float) -> Tuple[float, float]:
    """Returns p^2 + (1-p)^2 and (2p - 1)(1 - 2 theta)."""
    q_buy = 1.0 - p_buy
    return p_buy**2 + q_buy**2, (2 * p_buy - 1) * (1 - 2 * theta)


def _joint_choices(xi, rho, beta: float):
    """Probabilities that both agents pick market +1, and market -1."""
    up, down = np.add(xi, rho), np.subtract(xi, rho)
    both_plus = choice_probability(beta, up, 1) * choice_probability(
        beta, down, 1
    )
    both_minus = choice_probability(beta, up, -1) * choice_probability(
        beta, down, -1
    )
    return both_plus, both_minus


def two_player_flow(
    state: TwoPlayerState, beta: float, theta: float, p_buy: float = 1.0
) -> Tuple[float, float]:
    """
    Evaluates the r -> 0 flow of the two-agent system in (xi, rho).

    Agent +1 buys with probability p_buy and agent -1 with 1 - p_buy; a
    trade needs one buyer and one seller at the same market. The markets
    have biases (theta, 1 - theta).

    Args:
        state (TwoPlayerState): The point (xi, rho).
        beta (float): Intensity of choice.
        theta (float): Bias of market +1.
        p_buy (float): Buying preference of agent +1.

    Returns:
        Tuple[float, float]: The derivatives (d_xi, d_rho).
    """
    _check_symmetric(theta, p_buy)
    mean_factor, split_factor = _role_factors(theta, p_buy)
    both_plus, both_minus = _joint_choices(state.xi, state.rho, beta)
    d_xi = -state.xi + 0.5 * mean_factor * (both_plus - both_minus)
    d_rho = -state.rho + 0.5 * split_factor * (both_plus + both_minus)
    return float(d_xi), float(d_rho)


def two_player_returns(
    state: TwoPlayerState, beta: float, theta: float, p_buy: float = 1.0
) -> Tuple[float, float]:
    """
    Computes the expected per-round scores of agents +1 and -1.

    Returns:
        Tuple[float, float]: Expected scores of agent +1 and agent -1.
    """
    q_buy = 1.0 - p_buy
    at_plus = p_buy**2 * (1 - theta) + q_buy**2 * theta
    at_minus = p_buy**2 * theta + q_buy**2 * (1 - theta)
    both_plus, both_minus = _joint_choices(state.xi, state.rho, beta)
    first = both_plus * at_plus + both_minus * at_minus
    second = both_plus * at_minus + both_minus * at_plus
    return float(first), float(second)


def numerical_jacobian(
    func: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    step: float = 1e-6,
) -> np.ndarray:
    """Centered finite-difference Jacobian of a vector field."""
    x = np.asarray(x, dtype=float)
    columns = []
    for index in range(x.size):
        shift = np.zeros_like(x)
        shift[index] = step
        columns.append((func(x + shift) - func(x - shift)) / (2 * step))
    return np.column_stack(columns)


def _stability(
    func: Callable[[np.ndarray], np.ndarray], x: np.ndarray
) -> Tuple[bool, bool, float]:
    eigenvalues = np.linalg.eigvals(numerical_jacobian(func, x))
    leading = float(np.max(eigenvalues.real))
    marginal = abs(leading) <= Tolerances.STABILITY_MARGIN
    stable = leading < -Tolerances.STABILITY_MARGIN
    return stable, marginal, leading


def find_roots(
    func: Callable[[np.ndarray], np.ndarray],
    seeds: Sequence[Sequence[float]],
) -> Tuple[List[np.ndarray], List[Tuple[float, ...]]]:
    """
    Multi-start root search with Powell's hybrid (damped Newton) method.

    Args:
        func: Vector field whose zeros are sought.
        seeds: Starting points.

    Returns:
        Tuple[List[np.ndarray], List[Tuple[float, ...]]]: A tuple containing:
            - The distinct roots, merged at `Tolerances.DEDUP` in max norm.
            - The seeds that failed to converge.
    """
    roots: List[np.ndarray] = []
    failed: List[Tuple[float, ...]] = []
    for seed in seeds:
        solution = optimize.root(
            func, np.asarray(seed, dtype=float), method="hybr",
            options={"xtol": 1e-13},
        )
        residual = float(np.max(np.abs(func(solution.x))))
        if not np.isfinite(residual) or residual > Tolerances.RESIDUAL:
            failed.append(tuple(seed))
            continue
        if any(
            np.max(np.abs(solution.x - root)) < Tolerances.DEDUP
            for root in roots
        ):
            continue
        roots.append(solution.x)

    if failed:
        logger.debug("%d of %d seeds did not converge", len(failed), len(seeds))
    if not roots:
        raise NumericalError(f"no seed converged out of {len(seeds)}")
    return roots, failed


def two_player_fixed_points(
    beta: float,
    theta: float,
    p_buy: float = 1.0,
    seeds_per_axis: int = GridDefaults.TWO_PLAYER_SEEDS,
) -> List[FixedPointRecord]:
    """
    Finds all fixed points of the two-agent flow.

    Seeds a lattice over (xi, rho) in [-1, 1]^2, merges duplicate roots and
    tags each by the eigenvalues of the flow Jacobian. Points with xi != 0
    are coordinated, the point with xi = 0 is uncoordinated.

    Returns:
        List[FixedPointRecord]: Fixed points sorted by (xi, rho).
    """
    def rhs(x: np.ndarray) -> np.ndarray:
        return np.array(
            two_player_flow(TwoPlayerState(x[0], x[1]), beta, theta, p_buy)
        )

    axis = np.linspace(-1.0, 1.0, seeds_per_axis)
    roots, _ = find_roots(rhs, list(itertools.product(axis, axis)))

    records = []
    for root in sorted(roots, key=lambda x: (x[0], x[1])):
        state = TwoPlayerState(float(root[0]), float(root[1]))
        stable, marginal, leading = _stability(rhs, root)
        kind = (
            FixedPointClass.COORDINATED
            if abs(state.xi) > Tolerances.SIGN
            else FixedPointClass.UNCOORDINATED
        )
        returns = two_player_returns(state, beta, theta, p_buy)
        records.append(
            FixedPointRecord(
                state=state,
                stable=stable,
                kind=kind,
                marginal=marginal,
                max_eigenvalue=leading,
                avg_return=float(np.mean(returns)),
            )
        )
    return records


def uncoordinated_rho(beta: float, theta: float, p_buy: float = 1.0) -> float:
    """Solves the rho fixed-point equation on the line xi = 0."""
    _, split_factor = _role_factors(theta, p_buy)
    if split_factor == 0:
        return 0.0

    def residual(rho: float) -> float:
        with np.errstate(over="ignore"):
            return rho - 0.5 * split_factor / (1.0 + np.cosh(beta * rho))

    return optimize.brentq(
        residual, 0.0, split_factor / 4.0, xtol=Tolerances.ROOT_X
    )


def _instability_excess(
    beta: float, theta: float, p_buy: float, rho_star: float
) -> float:
    mean_factor, _ = _role_factors(theta, p_buy)
    with np.errstate(over="ignore"):
        return 0.5 * mean_factor * beta / (1.0 + np.cosh(beta * rho_star)) - 1


def two_player_stability(
    beta: float, theta: float, p_buy: float, rho_star: float
) -> bool:
    """True iff the uncoordinated fixed point (0, rho_star) is stable."""
    return _instability_excess(beta, theta, p_buy, rho_star) <= 0.0


def coordination_threshold(
    theta: float, p_buy: float = 1.0, beta_max: float = Defaults.BETA_MAX
) -> float:
    """
    Locates the intensity of choice at which the uncoordinated two-agent
    state loses stability and coordinated states appear.

    Args:
        theta (float): Bias of market +1, in (0, 0.5].
        p_buy (float): Buying preference of agent +1, in (0.5, 1].
        beta_max (float): Largest beta searched.

    Returns:
        float: The threshold beta_c, or infinity if the uncoordinated state
               stays stable up to `beta_max`.
    """
    if not (0.0 < theta <= 0.5 and 0.5 < p_buy <= 1.0):
        raise ConfigError(
            "invalid threshold parameters",
            [f"theta: {theta} not in (0, 0.5] or p_buy: {p_buy} not in (0.5, 1]"],
        )

    def excess(beta: float) -> float:
        rho_star = uncoordinated_rho(beta, theta, p_buy)
        return _instability_excess(beta, theta, p_buy, rho_star)

    betas = np.linspace(0.0, beta_max, GridDefaults.BETA_SCAN_POINTS + 1)
    values = [excess(beta) for beta in betas]
    for index in range(1, len(betas)):
        if values[index - 1] < 0 <= values[index]:
            return optimize.brentq(
                excess, betas[index - 1], betas[index],
                xtol=Tolerances.THRESHOLD * 1e-3,
            )

    logger.info("no coordination below beta=%s for theta=%s", beta_max, theta)
    return float("inf")


def two_player_flow_field(
    beta: float,
    theta: float,
    p_buy: float = 1.0,
    points: int = 21,
    extent: float = 1.0,
) -> pd.DataFrame:
    """
    Evaluates the two-agent flow on a square lattice for flow diagrams.

    Returns:
        pd.DataFrame: Columns xi, rho, d_xi, d_rho.
    """
    _check_symmetric(theta, p_buy)
    axis = np.linspace(-extent, extent, points)
    xi, rho = np.meshgrid(axis, axis, indexing="ij")
    mean_factor, split_factor = _role_factors(theta, p_buy)
    both_plus, both_minus = _joint_choices(xi, rho, beta)
    return pd.DataFrame(
        {
            Columns.XI: xi.ravel(),
            Columns.RHO: rho.ravel(),
            Columns.D_XI: (-xi + 0.5 * mean_factor * (both_plus - both_minus)).ravel(),
            Columns.D_RHO: (-rho + 0.5 * split_factor * (both_plus + both_minus)).ravel(),
        }
    )


def two_player_trajectory(
    initial: TwoPlayerState,
    beta: float,
    theta: float,
    p_buy: float = 1.0,
    t_max: float = 20.0,
    points: int = 201,
) -> pd.DataFrame:
    """Integrates the two-agent flow with adaptive RK45 stepping."""
    def rhs(_: float, x: np.ndarray) -> List[float]:
        return list(two_player_flow(TwoPlayerState(x[0], x[1]), beta, theta, p_buy))

    times = np.linspace(0.0, t_max, points)
    solution = integrate.solve_ivp(
        rhs, (0.0, t_max), initial.as_array(), method="RK45",
        t_eval=times, rtol=1e-9, atol=1e-12,
    )
    if not solution.success:
        raise NumericalError(f"trajectory failed: {solution.message}")
    return pd.DataFrame(
        {
            Columns.TIME: solution.t,
            Columns.XI: solution.y[0],
            Columns.RHO: solution.y[1],
        }
    )


def _other_counts(buy: np.ndarray, sell: np.ndarray) -> np.ndarray:
    """Distribution of (buyers, sellers) among agents present at a market."""
    dist = np.zeros((_N_OTHERS + 1, _N_OTHERS + 1))
    dist[0, 0] = 1.0
    for p_present_buy, p_present_sell in zip(buy, sell):
        shifted = (1.0 - p_present_buy - p_present_sell) * dist
        shifted[1:, :] += p_present_buy * dist[:-1, :]
        shifted[:, 1:] += p_present_sell * dist[:, :-1]
        dist = shifted
    return dist


def _four_player_scores(
    delta: np.ndarray, beta: float, theta: float, p_buy: float
) -> np.ndarray:
    """
    Expected score of each agent at each market, shape (4, 2).

    An own buy order executes with probability min(1, n_S / (n_B + 1)) over
    the other agents present, which recovers the one-half crowding factor
    for two buyers facing one seller.
    """
    delta = np.asarray(delta, dtype=float).ravel()
    roles = np.array([p_buy, p_buy, 1.0 - p_buy, 1.0 - p_buy])
    scores = np.zeros((4, len(MARKETS)))
    for column, market in enumerate(MARKETS):
        theta_m = theta if market == 1 else 1.0 - theta
        presence = choice_probability(beta, delta, market)
        buy, sell = presence * roles, presence * (1.0 - roles)
        for agent in range(4):
            others = [index for index in range(4) if index != agent]
            counts = _other_counts(buy[others], sell[others])
            buy_fill = float(np.sum(counts * _BUY_FILL))
            sell_fill = float(np.sum(counts * _SELL_FILL))
            scores[agent, column] = presence[agent] * (
                roles[agent] * (1.0 - theta_m) * buy_fill
                + (1.0 - roles[agent]) * theta_m * sell_fill
            )
    return scores


def four_player_flow(
    state: FourPlayerState, beta: float, theta: float, p_buy: float = 1.0
) -> FourPlayerState:
    """
    Evaluates the r -> 0 flow of two buyers and two sellers, with the score
    indicators replaced by their expectations under softmax choices.

    Args:
        state (FourPlayerState): Attraction differences delta[g, i].
        beta (float): Intensity of choice.
        theta (float): Bias of market +1.
        p_buy (float): Buying preference of the buyer group; the seller
                       group buys with 1 - p_buy.

    Returns:
        FourPlayerState: The time derivatives, in the same layout.
    """
    _check_symmetric(theta, p_buy)
    scores = _four_player_scores(state.delta, beta, theta, p_buy)
    derivative = -state.delta.ravel() + scores[:, 0] - scores[:, 1]
    return FourPlayerState(derivative.reshape(2, 2))


def four_player_returns(
    state: FourPlayerState, beta: float, theta: float, p_buy: float = 1.0
) -> float:
    """Population-average expected score per round."""
    scores = _four_player_scores(state.delta, beta, theta, p_buy)
    return float(np.mean(scores.sum(axis=1)))


def classify_four_player(
    delta: np.ndarray, split_tol: float = Tolerances.SPLIT
) -> str:
    """
    Labels a four-agent state.

    A group is split when its two attraction differences differ by more
    than `split_tol`. Two split groups make a fragmented state, one a
    partially fragmented state. Unsplit states are coordinated when every
    agent leans towards the same market.
    """
    delta = np.asarray(delta, dtype=float).reshape(2, 2)
    split = np.abs(delta[:, 0] - delta[:, 1]) > split_tol
    if split.all():
        return FixedPointClass.FRAGMENTED
    if split.any():
        return FixedPointClass.PARTIALLY_FRAGMENTED
    leaning = np.where(np.abs(delta) > Tolerances.SIGN, np.sign(delta), 0.0)
    if np.all(leaning == 1) or np.all(leaning == -1):
        return FixedPointClass.COORDINATED
    return FixedPointClass.UNCOORDINATED


def four_player_fixed_points(
    beta: float,
    theta: float,
    p_buy: float = 1.0,
    seeds_per_axis: int = GridDefaults.FOUR_PLAYER_SEEDS,
    split_tol: float = Tolerances.SPLIT,
) -> List[FixedPointRecord]:
    """
    Finds and classifies the fixed points of the four-agent flow.

    Returns:
        List[FixedPointRecord]: Fixed points sorted by their flattened state.
    """
    _check_symmetric(theta, p_buy)

    def rhs(x: np.ndarray) -> np.ndarray:
        scores = _four_player_scores(x, beta, theta, p_buy)
        return -x + scores[:, 0] - scores[:, 1]

    axis = np.linspace(-1.0, 1.0, seeds_per_axis)
    roots, failed = find_roots(rhs, list(itertools.product(axis, repeat=4)))
    if failed:
        logger.info(
            "four-player beta=%.4g: %d seeds failed", beta, len(failed)
        )

    records = []
    for root in sorted(roots, key=tuple):
        state = FourPlayerState(root.reshape(2, 2))
        stable, marginal, leading = _stability(rhs, root)
        records.append(
            FixedPointRecord(
                state=state,
                stable=stable,
                kind=classify_four_player(state.delta, split_tol),
                marginal=marginal,
                max_eigenvalue=leading,
                avg_return=four_player_returns(state, beta, theta, p_buy),
            )
        )
    return records


_THRESHOLD_KINDS: Dict[str, Callable[[FixedPointRecord], bool]] = {
    "coordination": lambda record: record.stable
    and record.kind == FixedPointClass.COORDINATED,
    "fragmentation": lambda record: record.stable
    and record.kind == FixedPointClass.FRAGMENTED,
    "partial_fragmentation": lambda record: record.kind
    == FixedPointClass.PARTIALLY_FRAGMENTED,
}


def four_player_thresholds(
    parameter: str,
    values: Sequence[float],
    theta: float = Defaults.THETA_PLUS,
    p_buy: float = 1.0,
    beta_range: Tuple[float, float] = (1.0, 40.0),
    scan_points: int = 16,
    tolerance: float = 1e-3,
) -> pd.DataFrame:
    """
    Locates the onsets of coordinated, fragmented and partially fragmented
    four-agent fixed points along a sweep of theta or p_buy.

    Each onset is bracketed on a geometric beta scan and refined by
    bisection on the presence of the corresponding fixed points. Solver
    failures are recorded in the `failed` and `error` columns.

    Args:
        parameter (str): "theta" or "p_buy", the swept quantity.
        values (Sequence[float]): Values of the swept quantity.
        theta (float): Market bias when sweeping p_buy.
        p_buy (float): Buying preference when sweeping theta.
        beta_range (Tuple[float, float]): Range of beta searched.
        scan_points (int): Points of the bracketing scan.
        tolerance (float): Absolute bisection tolerance in beta.

    Returns:
        pd.DataFrame: Columns parameter, value, kind, beta, failed, error.
    """
    if parameter not in (Columns.THETA, Columns.P_BUY):
        raise ConfigError("invalid sweep", [f"parameter: {parameter}"])

    rows = []
    for value in values:
        cell_theta = value if parameter == Columns.THETA else theta
        cell_p = value if parameter == Columns.P_BUY else p_buy
        cache: Dict[float, List[FixedPointRecord]] = {}

        def scan(beta: float) -> List[FixedPointRecord]:
            if beta not in cache:
                cache[beta] = four_player_fixed_points(beta, cell_theta, cell_p)
            return cache[beta]

        betas = np.geomspace(beta_range[0], beta_range[1], scan_points)
        for kind, predicate in _THRESHOLD_KINDS.items():
            row = {
                Columns.PARAMETER: parameter,
                Columns.VALUE: value,
                Columns.KIND: kind,
                Columns.BETA: float("inf"),
                Columns.FAILED: False,
                Columns.ERROR: "",
            }
            try:
                row[Columns.BETA] = _bisect_onset(
                    lambda beta: any(map(predicate, scan(beta))),
                    betas,
                    tolerance,
                )
            except NumericalError as error:
                row[Columns.FAILED] = True
                row[Columns.ERROR] = str(error)
                logger.warning("%s=%s %s: %s", parameter, value, kind, error)
            rows.append(row)
    return pd.DataFrame(rows)


def _bisect_onset(
    present: Callable[[float], bool], betas: np.ndarray, tolerance: float
) -> float:
    """First beta on the scan where `present` holds, refined by bisection."""
    previous: Optional[float] = None
    for beta in betas:
        if present(beta):
            if previous is None:
                return float(beta)
            lo, hi = previous, float(beta)
            while hi - lo > tolerance:
                mid = 0.5 * (lo + hi)
                if present(mid):
                    hi = mid
                else:
                    lo = mid
            return hi
        previous = float(beta)
    return float("inf")
