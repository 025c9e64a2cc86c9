import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.errors import NumericalError, SchemaError
from src.constants import Columns, GridDefaults, StateType
from src.abm import (
    attraction_autocorrelation,
    correlation_time,
    lifetime_sweep,
    median_lifetimes,
    run_simulation,
)
from src.data_loader import ExperimentConfig
from src.fokker_planck import (
    binder_cumulant,
    classify_state,
    distribution_from_profile,
    free_energy,
    kernel_monte_carlo,
    sample_distance,
    state_map,
)
from src.model_core import market_conditions
from src.plotting import PlotSpec, emit_plots
from src.records import (
    RunManifest,
    package_version,
    utc_now,
    write_failures,
    write_json,
    write_manifest,
    write_table,
)
from src.small_n import (
    FixedPointRecord,
    coordination_threshold,
    four_player_fixed_points,
    four_player_thresholds,
    two_player_fixed_points,
    two_player_flow_field,
)
from src.steady_state import (
    PHASE_AXES,
    PopulationModel,
    cofragmented_solver,
    homogeneous_solver,
    partial_fragmented_solver,
    phase_boundaries,
    phase_diagram_sweep,
    random_choice_return,
    self_consistency_loci,
    solve_cell,
    states_to_frame,
    steady_states,
    theory_binder,
)

logger = logging.getLogger(__name__)

FOUR_PLAYER_COLUMNS: Tuple[str, ...] = ("delta_b1", "delta_b2", "delta_s1", "delta_s2")


@dataclass
class ExperimentOutput:
    """
    Everything a runner produced: tables by name, JSON documents by name,
    failure ledger entries and the figures to draw from the tables.
    """

    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)
    documents: Dict[str, Any] = field(default_factory=dict)
    failures: List[Dict[str, str]] = field(default_factory=list)
    plots: List[PlotSpec] = field(default_factory=list)

    def fail(self, stage: str, item: Any, error: Exception) -> None:
        self.failures.append({"stage": stage, "item": str(item), "error": str(error)})


def _failure_rows(stage: str, frame: pd.DataFrame, key: Sequence[str]) -> List[Dict[str, str]]:
    rows = frame[frame[Columns.FAILED]] if Columns.FAILED in frame.columns else frame.iloc[0:0]
    return [
        {
            "stage": stage,
            "item": ", ".join(f"{name}={row[name]}" for name in key),
            "error": row[Columns.ERROR],
        }
        for _, row in rows.iterrows()
    ]


def _beta_values(config: ExperimentConfig) -> np.ndarray:
    """Betas of a beta or inverse_beta axis, else the configured beta."""
    for axis in config.axes:
        if axis.name in (Columns.BETA, Columns.INVERSE_BETA):
            return axis.beta_values()
    return np.array([config.learning.resolved_beta])


def _two_player_rows(beta: float, records: Sequence[FixedPointRecord]) -> List[Dict]:
    return [
        {
            Columns.BETA: beta,
            Columns.XI: record.state.xi,
            Columns.RHO: record.state.rho,
            Columns.STABLE: record.stable,
            Columns.MARGINAL: record.marginal,
            Columns.KIND: record.kind,
            "max_eigenvalue": record.max_eigenvalue,
            Columns.RETURN: record.avg_return,
        }
        for record in records
    ]


def _four_player_rows(beta: float, records: Sequence[FixedPointRecord]) -> List[Dict]:
    rows = []
    for record in records:
        row = {Columns.BETA: beta}
        row.update(zip(FOUR_PLAYER_COLUMNS, record.state.as_array().tolist()))
        row.update(
            {
                Columns.STABLE: record.stable,
                Columns.MARGINAL: record.marginal,
                Columns.KIND: record.kind,
                "max_eigenvalue": record.max_eigenvalue,
                Columns.RETURN: record.avg_return,
            }
        )
        rows.append(row)
    return rows


def run_two_player(config: ExperimentConfig, seed: Optional[int], workers: int) -> ExperimentOutput:
    """Flow field, fixed points and coordination threshold of two agents."""
    output = ExperimentOutput()
    small = config.small_n
    beta = config.learning.resolved_beta
    seeds = small.seeds_per_axis or GridDefaults.TWO_PLAYER_SEEDS

    output.tables["flow_field"] = two_player_flow_field(
        beta, small.theta, small.p_buy, points=small.flow_points
    )
    rows = []
    for value in _beta_values(config):
        try:
            records = two_player_fixed_points(float(value), small.theta, small.p_buy, seeds)
        except NumericalError as error:
            if not config.axes:
                raise
            output.fail("fixed_points", f"beta={value}", error)
            continue
        rows.extend(_two_player_rows(float(value), records))
    output.tables["fixed_points"] = pd.DataFrame(rows)

    bias = min(small.theta, 1.0 - small.theta)
    if bias > 0:
        output.documents["threshold"] = {
            Columns.THETA: small.theta,
            Columns.P_BUY: small.p_buy,
            "beta_c": coordination_threshold(bias, small.p_buy),
        }
    if not config.axes:
        output.plots.append(
            PlotSpec(
                "flow",
                "flow",
                {"field": "flow_field", "points": "fixed_points"},
                title=f"beta={beta:.4g}, theta={small.theta}",
            )
        )
    return output


def run_four_player(config: ExperimentConfig, seed: Optional[int], workers: int) -> ExperimentOutput:
    """Four-agent fixed points, or onset thresholds along a theta or p_buy axis."""
    output = ExperimentOutput()
    small = config.small_n
    sweep = next((a for a in config.axes if a.name in (Columns.THETA, Columns.P_BUY)), None)
    if sweep is not None:
        thresholds = four_player_thresholds(
            sweep.name, sweep.grid().tolist(), theta=small.theta, p_buy=small.p_buy
        )
        output.tables["thresholds"] = thresholds
        output.failures.extend(
            _failure_rows("thresholds", thresholds, [Columns.PARAMETER, Columns.VALUE, Columns.KIND])
        )
        if config.learning.resolved_beta is None:
            return output

    seeds = small.seeds_per_axis or GridDefaults.FOUR_PLAYER_SEEDS
    rows = []
    betas = _beta_values(config) if sweep is None else [config.learning.resolved_beta]
    for value in betas:
        try:
            records = four_player_fixed_points(
                float(value), small.theta, small.p_buy, seeds, small.split_tol
            )
        except NumericalError as error:
            if len(betas) == 1:
                raise
            output.fail("fixed_points", f"beta={value}", error)
            continue
        rows.extend(_four_player_rows(float(value), records))
    output.tables["fixed_points"] = pd.DataFrame(rows)
    return output


def run_fp_state(config: ExperimentConfig, seed: Optional[int], workers: int) -> ExperimentOutput:
    """
    Free energy, stationary density and state label of one group facing
    fixed demand-to-supply ratios, checked against the single-agent kernel
    when kernel steps are configured.
    """
    output = ExperimentOutput()
    fp = config.fp
    beta, r = config.learning.resolved_beta, config.learning.r
    markets, prices = config.to_markets(), config.to_prices()
    ratio = fp.p_buy / (1.0 - fp.p_buy)
    d = fp.d or (ratio, ratio)
    conditions = market_conditions(markets, prices, d)
    profile = free_energy(fp.p_buy, conditions, beta, config.to_grid())
    state = classify_state(profile, r)

    table = pd.DataFrame({Columns.DELTA: profile.grid, Columns.FREE_ENERGY: profile.f})
    document: Dict[str, Any] = {
        Columns.BETA: beta,
        Columns.R: r,
        Columns.P_BUY: fp.p_buy,
        Columns.D_PLUS: d[0],
        Columns.D_MINUS: d[1],
        Columns.KIND: state.kind,
        Columns.PEAKS: [[float(loc), float(weight)] for loc, weight in state.peaks],
        "minima": [[float(loc), float(value)] for loc, value in profile.minima],
        "maxima": [[float(loc), float(value)] for loc, value in profile.maxima],
        Columns.MARGINAL: profile.marginal,
    }

    if r is not None:
        dist = distribution_from_profile(profile, r)
        table[Columns.DENSITY] = dist.values
        document[Columns.BINDER] = binder_cumulant(dist)
        if fp.kernel_steps:
            if fp.burn_in >= fp.kernel_steps:
                raise NumericalError("burn-in leaves no kernel samples")
            sample = kernel_monte_carlo(
                fp.p_buy, conditions, config.to_learning(), fp.kernel_steps,
                seed=seed, walkers=fp.kernel_walkers,
            )
            values = sample.samples(fp.burn_in + 1)
            centers, empirical, distance = sample_distance(values, dist)
            output.tables["kernel_histogram"] = pd.DataFrame(
                {Columns.DELTA: centers, Columns.DENSITY: empirical}
            )
            document["kernel"] = {
                "samples": int(values.size),
                "total_variation": distance,
                Columns.BINDER: binder_cumulant(values),
            }
    output.tables["distribution"] = table
    output.documents["state"] = document

    if fp.state_map:
        d_values = np.exp(config.to_window().log_values())
        output.tables["state_map"] = state_map(
            beta, fp.p_buy, markets, d_values, prices, r, config.to_grid()
        )
    output.plots.append(
        PlotSpec("distribution", "distribution", {"profile": "distribution"},
                 title=f"{state.kind} at D=({d[0]:.3g}, {d[1]:.3g})")
    )
    return output


def run_loci(config: ExperimentConfig, seed: Optional[int], workers: int) -> ExperimentOutput:
    """Finite-r self-consistency loci and their intersections."""
    output = ExperimentOutput()
    loci = self_consistency_loci(
        config.population_model(),
        config.learning.resolved_beta,
        config.learning.r,
        config.to_window(),
        config.progress,
    )
    output.tables["loci"] = loci.to_frame()
    output.tables["states"] = states_to_frame(loci.solutions)
    output.documents["states"] = [state.to_record() for state in loci.solutions]
    output.plots.append(PlotSpec("loci", "loci", {"loci": "loci", "states": "states"}))
    return output


def run_solve_steady(config: ExperimentConfig, seed: Optional[int], workers: int) -> ExperimentOutput:
    """
    Steady states at one parameter point. Without a learning rate the
    r -> 0 solvers run and every candidate is kept with its validity flag.
    """
    output = ExperimentOutput()
    model = config.population_model()
    beta, r = config.learning.resolved_beta, config.learning.r
    window = config.to_window()
    if r is None:
        states = list(homogeneous_solver(model, beta))
        if len(model.groups) == 2:
            cofragmented = cofragmented_solver(model, beta, window)
            if cofragmented is not None:
                states.append(cofragmented)
            states.extend(partial_fragmented_solver(model, beta, window))
    else:
        states = steady_states(model, beta, r, window, config.progress)

    output.tables["states"] = states_to_frame(states)
    summary: Dict[str, Any] = {
        Columns.BETA: beta,
        Columns.R: r,
        "states": [state.to_record() for state in states],
    }
    try:
        summary["random_choice_return"] = random_choice_return(model)
    except NumericalError as error:
        logger.warning("no random-choice reference: %s", error)
        summary["random_choice_return"] = None
    output.documents["steady_states"] = summary
    return output


def _phase_axes(config: ExperimentConfig) -> Tuple[Tuple[str, str], np.ndarray, np.ndarray]:
    """Maps the configured axes onto one of PHASE_AXES, converting inverse_beta."""
    names, values = [], []
    for axis in config.axes:
        names.append(Columns.BETA if axis.name == Columns.INVERSE_BETA else axis.name)
        values.append(axis.beta_values())
    if tuple(names[::-1]) in PHASE_AXES:
        names, values = names[::-1], values[::-1]
    return (names[0], names[1]), values[0], values[1]


def run_phase_diagram(config: ExperimentConfig, seed: Optional[int], workers: int) -> ExperimentOutput:
    """Solution multiplicity over a two-parameter grid and its boundaries."""
    output = ExperimentOutput()
    axes, first, second = _phase_axes(config)
    model = config.population_model()
    window = config.to_window()
    cells = phase_diagram_sweep(axes, first, second, model, window, workers, config.progress)

    frame = pd.DataFrame([cell.to_row() for cell in cells])
    output.tables["cells"] = frame
    output.failures.extend(_failure_rows("cells", frame, list(axes)))

    # Boundaries run along beta for (beta, p_buy) and along r for (r, beta).
    axis = axes[0]
    values = np.unique(first)
    tolerance = float(np.min(np.diff(values))) / 8.0 if values.size > 1 else 1e-3
    output.tables["boundaries"] = phase_boundaries(
        cells,
        axis,
        solve=lambda parameters: solve_cell(axes, parameters, model, window),
        tolerance=tolerance,
    )
    output.plots.append(
        PlotSpec("phase", "phase", {"cells": "cells", "boundaries": "boundaries"}, axes=axes)
    )
    return output


def _theory_targets(
    model: PopulationModel, beta: float, r: Optional[float], window
) -> List[Dict[str, Any]]:
    """Predicted per-group Binder values of every steady state."""
    targets = []
    for state in steady_states(model, beta, r, window):
        for group in range(len(model.groups)):
            try:
                value = theory_binder(state, group, model)
            except NumericalError as error:
                logger.debug("no Binder prediction for %s: %s", state.types, error)
                continue
            targets.append(
                {Columns.TYPES: state.types, Columns.GROUP: group, Columns.BINDER: value,
                 Columns.KIND: state.classes[group].kind}
            )
    return targets


def _lifetime_bands(
    targets: Sequence[Dict[str, Any]], groups: int
) -> Tuple[List[float], List[List[float]]]:
    strong_types = "(" + ",".join([StateType.STRONG] * groups) + ")"
    strong = [None] * groups
    alternatives: List[List[float]] = [[] for _ in range(groups)]
    for target in targets:
        if target[Columns.TYPES] == strong_types:
            strong[target[Columns.GROUP]] = target[Columns.BINDER]
        else:
            alternatives[target[Columns.GROUP]].append(target[Columns.BINDER])
    if any(value is None for value in strong):
        raise NumericalError("no strongly fragmented steady state to measure lifetimes from")
    return strong, alternatives


def run_simulate(config: ExperimentConfig, seed: Optional[int], workers: int) -> ExperimentOutput:
    """One finite-population run with optional snapshots and theory lines."""
    output = ExperimentOutput()
    simulation = config.simulation
    result = run_simulation(config.sim_config(seed), config.progress)
    output.tables["series"] = result.series.frame
    if result.snapshots is not None:
        output.tables["snapshots"] = result.snapshots
        if simulation.autocorrelation_origin is not None:
            curve = attraction_autocorrelation(result.snapshots, simulation.autocorrelation_origin)
            output.tables["autocorrelation"] = curve
            output.documents["correlation_time"] = {
                int(g): correlation_time(part) for g, part in curve.groupby(Columns.GROUP)
            }

    references: Tuple[float, ...] = ()
    if simulation.theory:
        try:
            targets = _theory_targets(
                config.population_model(), config.learning.resolved_beta,
                config.learning.r, config.to_window(),
            )
        except NumericalError as error:
            output.fail("theory", "binder", error)
            targets = []
        output.documents["theory"] = targets
        references = tuple(sorted({round(t[Columns.BINDER], 6) for t in targets}))
    output.plots.append(
        PlotSpec("series", "series", {"series": "series"}, references=references,
                 title=f"N={simulation.n_agents}, r={config.learning.r}")
    )
    return output


def run_sweep(config: ExperimentConfig, seed: Optional[int], workers: int) -> ExperimentOutput:
    """
    Lifetimes of the strongly fragmented state over seeds and one axis of
    population sizes or learning rates.
    """
    output = ExperimentOutput()
    axis = config.axes[0]
    model = config.population_model()
    beta = config.learning.resolved_beta
    groups = len(model.groups)
    run_seeds = np.random.SeedSequence(seed).generate_state(config.sweep.seeds).tolist()

    frames, bands = [], {}
    for value in axis.grid():
        r = float(value) if axis.name == Columns.R else config.learning.r
        n_agents = int(value) if axis.name == Columns.N_AGENTS else None
        if r not in bands:
            if config.sweep.strong is not None:
                bands[r] = (config.sweep.strong, config.sweep.alternatives)
            else:
                bands[r] = _lifetime_bands(
                    _theory_targets(model, beta, r, config.to_window()), groups
                )
        strong, alternatives = bands[r]
        configs = [config.sim_config(int(s), n_agents=n_agents, r=r) for s in run_seeds]
        frames.append(lifetime_sweep(configs, strong, alternatives, workers, config.progress))

    lifetimes = pd.concat(frames, ignore_index=True)
    column = Columns.N_AGENTS if axis.name == Columns.N_AGENTS else Columns.R
    output.tables["lifetimes"] = lifetimes
    output.tables["median_lifetimes"] = median_lifetimes(lifetimes, column)
    output.documents["bands"] = {
        str(r): {"strong": strong, "alternatives": alternatives}
        for r, (strong, alternatives) in bands.items()
    }
    return output


RUNNERS: Dict[str, Callable[[ExperimentConfig, Optional[int], int], ExperimentOutput]] = {
    "two-player": run_two_player,
    "four-player": run_four_player,
    "fp-state": run_fp_state,
    "loci": run_loci,
    "solve-steady": run_solve_steady,
    "phase-diagram": run_phase_diagram,
    "simulate": run_simulate,
    "sweep": run_sweep,
}


def resolve_seed(seed: Optional[int], config: ExperimentConfig) -> int:
    """The command-line seed, else the config's, else fresh entropy."""
    if seed is not None:
        return seed
    if config.seed is not None:
        return config.seed
    fresh = int(np.random.SeedSequence().entropy % 2**63)
    logger.info("no seed given, using %d", fresh)
    return fresh


def run_experiment(
    config: ExperimentConfig,
    config_hash: str,
    out_dir: Optional[Path] = None,
    seed: Optional[int] = None,
    workers: Optional[int] = None,
    fmt: Optional[str] = None,
) -> RunManifest:
    """
    Runs the configured experiment and writes its tables, documents,
    figures, failure ledger and manifest.

    Args:
        config (ExperimentConfig): Validated configuration.
        config_hash (str): sha256 of the configuration file bytes.
        out_dir (Optional[Path]): Overrides the configured output directory.
        seed (Optional[int]): Overrides the configured seed.
        workers (Optional[int]): Overrides the configured worker count.
        fmt (Optional[str]): "csv" or "json", overriding the config.

    Returns:
        RunManifest: The manifest, also written to the output directory.
    """
    directory = Path(out_dir or config.output_dir)
    seed = resolve_seed(seed, config)
    manifest = RunManifest(
        kind=config.kind,
        config_hash=config_hash,
        version=package_version(),
        seed=seed,
        started=utc_now(),
    )
    logger.info("running %s into %s (seed %d)", config.kind, directory, seed)
    output = RUNNERS[config.kind](config, seed, workers or config.workers)

    paths = [
        write_table(frame, directory, name, fmt or config.format)
        for name, frame in output.tables.items()
    ]
    paths += [write_json(document, directory, name) for name, document in output.documents.items()]
    if config.plots:
        for spec in output.plots:
            try:
                paths += emit_plots(output.tables, [spec], directory)
            except (SchemaError, ValueError, RuntimeError) as error:
                logger.warning("plot %s failed: %s", spec.name, error)
                output.fail("plot", spec.name, error)

    ledger = write_failures(output.failures, directory)
    if ledger is not None:
        paths.append(ledger)
    manifest.outputs = [path.name for path in paths]
    manifest.failures = len(output.failures)
    manifest.finished = utc_now()
    write_manifest(manifest, directory)
    return manifest
