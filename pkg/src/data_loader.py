import json
import hashlib
import logging
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.errors import ConfigError
from src.constants import Defaults, GridDefaults, Paths
from src.abm import InitialCondition, SimConfig
from src.fokker_planck import GridSpec
from src.model_core import GroupSpec, LearningParams, MarketSpec, OrderPriceModel
from src.steady_state import DWindow, PopulationModel

logger = logging.getLogger(__name__)

ExperimentKind = Literal[
    "two-player",
    "four-player",
    "fp-state",
    "loci",
    "solve-steady",
    "phase-diagram",
    "simulate",
    "sweep",
]
AxisName = Literal["beta", "inverse_beta", "p_buy", "theta", "r", "n_agents"]


class StrictModel(BaseModel):
    """Base schema: unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")


class MarketsConfig(StrictModel):
    theta: Tuple[float, float] = (Defaults.THETA_PLUS, Defaults.THETA_MINUS)


class PricesConfig(StrictModel):
    mu_a: float = Defaults.MU_A
    mu_b: float = Defaults.MU_B
    sigma_a: float = Field(Defaults.SIGMA_A, ge=0)
    sigma_b: float = Field(Defaults.SIGMA_B, ge=0)


class GroupConfig(StrictModel):
    p_buy: float = Field(gt=0, lt=1)
    weight: float = Field(Defaults.GROUP_WEIGHT, gt=0, le=1)


class LearningConfig(StrictModel):
    """Either beta or its inverse may be given, not both."""

    r: Optional[float] = Field(None, gt=0, le=1)
    beta: Optional[float] = Field(None, ge=0)
    inverse_beta: Optional[float] = Field(None, gt=0)

    @model_validator(mode="after")
    def _one_beta(self) -> "LearningConfig":
        if self.beta is not None and self.inverse_beta is not None:
            raise ValueError("give beta or inverse_beta, not both")
        return self

    @property
    def resolved_beta(self) -> Optional[float]:
        if self.inverse_beta is not None:
            return 1.0 / self.inverse_beta
        return self.beta


class GridConfig(StrictModel):
    lo: float = GridDefaults.DELTA_LO
    hi: float = GridDefaults.DELTA_HI
    points: int = Field(GridDefaults.DELTA_POINTS, ge=3)


class WindowConfig(StrictModel):
    lo: float = Field(GridDefaults.D_LO, gt=0)
    hi: float = Field(GridDefaults.D_HI, gt=0)
    points: int = Field(GridDefaults.D_POINTS, ge=3)


class AxisConfig(StrictModel):
    """A swept parameter: explicit values, or `points` values from start to stop."""

    name: AxisName
    values: Optional[List[float]] = None
    start: Optional[float] = None
    stop: Optional[float] = None
    points: Optional[int] = Field(None, ge=1)
    log: bool = False

    @model_validator(mode="after")
    def _one_form(self) -> "AxisConfig":
        ranged = None not in (self.start, self.stop, self.points)
        if self.values is None and not ranged:
            raise ValueError("give values, or start, stop and points")
        if self.values is not None and len(self.values) == 0:
            raise ValueError("values is empty")
        return self

    def grid(self) -> np.ndarray:
        if self.values is not None:
            return np.asarray(self.values, dtype=float)
        if self.log:
            return np.geomspace(self.start, self.stop, self.points)
        return np.linspace(self.start, self.stop, self.points)

    def beta_values(self) -> np.ndarray:
        """Axis values as beta, inverting an inverse_beta axis."""
        values = self.grid()
        return 1.0 / values if self.name == "inverse_beta" else values


class SmallNConfig(StrictModel):
    theta: float = Field(Defaults.THETA_PLUS, ge=0, le=1)
    p_buy: float = Field(1.0, gt=0.5, le=1)
    flow_points: int = Field(21, ge=2)
    seeds_per_axis: Optional[int] = Field(None, ge=1)
    split_tol: float = Field(0.1, gt=0)


class FokkerPlanckConfig(StrictModel):
    """Single-group analysis; `d` defaults to the endogenous p / (1 - p)."""

    p_buy: float = Field(0.8, gt=0, lt=1)
    d: Optional[Tuple[float, float]] = None
    kernel_steps: int = Field(0, ge=0)
    kernel_walkers: int = Field(1000, ge=1)
    burn_in: int = Field(0, ge=0)
    state_map: bool = False


class InitialConfig(StrictModel):
    kind: Literal["zero", "gaussian"] = "zero"
    mean: float = 0.0
    std: float = Field(0.0, ge=0)


class SimulationConfig(StrictModel):
    n_agents: int = Field(200, ge=2)
    rounds: int = Field(Defaults.HORIZON_ROUNDS, ge=1)
    stride: int = Field(20, ge=1)
    snapshot_every: int = Field(0, ge=0)
    snapshot_times: List[float] = Field(default_factory=list)
    initial: InitialConfig = Field(default_factory=InitialConfig)
    autocorrelation_origin: Optional[float] = Field(None, ge=0)
    theory: bool = True  # Adds predicted Binder values as reference lines.


class SweepConfig(StrictModel):
    """Lifetime sweep over n_agents or r with `seeds` runs per value."""

    seeds: int = Field(10, ge=1)
    strong: Optional[List[float]] = None
    alternatives: Optional[List[List[float]]] = None


class ExperimentConfig(StrictModel):
    """
    A complete experiment. Sections irrelevant to `kind` keep their
    defaults and are ignored.
    """

    kind: ExperimentKind
    seed: Optional[int] = None
    output_dir: str = Paths.OUTPUT_DIR
    format: Literal["csv", "json"] = "csv"
    plots: bool = True
    workers: int = Field(1, ge=1)
    progress: bool = False
    markets: MarketsConfig = Field(default_factory=MarketsConfig)
    prices: PricesConfig = Field(default_factory=PricesConfig)
    learning: LearningConfig = Field(default_factory=LearningConfig)
    groups: List[GroupConfig] = Field(
        default_factory=lambda: [GroupConfig(p_buy=0.8), GroupConfig(p_buy=0.2)],
        min_length=1,
        max_length=2,
    )
    grid: GridConfig = Field(default_factory=GridConfig)
    window: WindowConfig = Field(default_factory=WindowConfig)
    axes: List[AxisConfig] = Field(default_factory=list, max_length=2)
    small_n: SmallNConfig = Field(default_factory=SmallNConfig)
    fp: FokkerPlanckConfig = Field(default_factory=FokkerPlanckConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    @model_validator(mode="after")
    def _kind_requirements(self) -> "ExperimentConfig":
        beta, r = self.learning.resolved_beta, self.learning.r
        needs_beta = {"two-player", "fp-state", "loci", "solve-steady", "simulate", "sweep"}
        if self.kind in needs_beta and beta is None:
            raise ValueError(f"{self.kind} needs learning.beta or learning.inverse_beta")
        if self.kind in {"loci", "simulate", "sweep"} and r is None:
            raise ValueError(f"{self.kind} needs learning.r")
        if self.kind == "four-player" and beta is None and not self.axes:
            raise ValueError("four-player needs a beta or a threshold axis")
        if self.kind == "phase-diagram" and len(self.axes) != 2:
            raise ValueError("phase-diagram needs two axes")
        if self.kind == "sweep":
            if len(self.axes) != 1 or self.axes[0].name not in ("n_agents", "r"):
                raise ValueError("sweep needs one axis named n_agents or r")
            strong, alternatives = self.sweep.strong, self.sweep.alternatives
            if strong is not None:
                if alternatives is None:
                    raise ValueError("sweep.strong needs sweep.alternatives")
                if len(strong) != len(self.groups) or len(alternatives) != len(self.groups):
                    raise ValueError("sweep.strong and sweep.alternatives need one entry per group")
        return self

    def to_markets(self) -> Tuple[MarketSpec, MarketSpec]:
        plus, minus = self.markets.theta
        return MarketSpec(plus, 1), MarketSpec(minus, -1)

    def to_prices(self) -> OrderPriceModel:
        return OrderPriceModel(**self.prices.model_dump())

    def to_groups(self) -> Tuple[GroupSpec, ...]:
        return tuple(GroupSpec(g.p_buy, g.weight) for g in self.groups)

    def to_grid(self) -> GridSpec:
        return GridSpec(self.grid.lo, self.grid.hi, self.grid.points)

    def to_window(self) -> DWindow:
        return DWindow(self.window.lo, self.window.hi, self.window.points)

    def to_learning(self, r: Optional[float] = None) -> LearningParams:
        return LearningParams(r=r or self.learning.r, beta=self.learning.resolved_beta)

    def population_model(self) -> PopulationModel:
        return PopulationModel(
            groups=self.to_groups(),
            markets=self.to_markets(),
            prices=self.to_prices(),
            grid=self.to_grid(),
        )

    def sim_config(
        self,
        seed: Optional[int] = None,
        n_agents: Optional[int] = None,
        r: Optional[float] = None,
    ) -> SimConfig:
        simulation = self.simulation
        return SimConfig(
            n_agents=n_agents or simulation.n_agents,
            groups=self.to_groups(),
            learning=self.to_learning(r),
            markets=self.to_markets(),
            prices=self.to_prices(),
            initial=InitialCondition(**simulation.initial.model_dump()),
            seed=seed,
            rounds=simulation.rounds,
            stride=simulation.stride,
            snapshot_every=simulation.snapshot_every,
            snapshot_times=tuple(simulation.snapshot_times),
        )

    def check_domain(self) -> None:
        """Builds the domain objects so that their own checks run up front."""
        self.to_markets()
        self.to_prices()
        self.to_grid()
        self.to_window()
        self.population_model()
        beta = self.learning.resolved_beta
        if self.learning.r is not None and beta is not None:
            self.to_learning()
        if self.kind in ("simulate", "sweep"):
            self.sim_config(self.seed)


def config_hash(raw: bytes) -> str:
    """sha256 of the configuration file bytes."""
    return hashlib.sha256(raw).hexdigest()


def _problems(error: ValidationError) -> List[str]:
    problems = []
    for item in error.errors():
        path = ".".join(str(part) for part in item["loc"]) or "<root>"
        problems.append(f"{path}: {item['msg']}")
    return problems


def parse_config(source: Union[str, Path, bytes]) -> ExperimentConfig:
    """
    Parses and validates an experiment configuration.

    Args:
        source (Union[str, Path, bytes]): Path to a JSON file, or its bytes.

    Returns:
        ExperimentConfig: The validated configuration.

    Raises:
        ConfigError: On malformed JSON, unknown keys, out-of-range values
                     or violated model preconditions, with one
                     "field.path: message" entry per problem.
        OSError: When the file cannot be read.
    """
    raw = source if isinstance(source, bytes) else Path(source).read_bytes()
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as error:
        raise ConfigError("configuration is not valid JSON", [f"<root>: {error}"]) from error

    try:
        config = ExperimentConfig.model_validate(payload)
    except ValidationError as error:
        raise ConfigError("invalid configuration", _problems(error)) from error

    config.check_domain()
    logger.debug("parsed %s config", config.kind)
    return config


def load_config(path: Union[str, Path]) -> Tuple[ExperimentConfig, str]:
    """Reads a configuration file once, returning the config and its hash."""
    raw = Path(path).read_bytes()
    return parse_config(raw), config_hash(raw)
