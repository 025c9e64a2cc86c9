class Defaults:
    """
    Defines default model parameters used when a configuration omits them.
    The price scale is fixed by mu_b - mu_a = 1 with unit spreads.
    """

    THETA_PLUS: float = 0.3  # Price-setting bias of market +1.
    THETA_MINUS: float = 0.7  # Price-setting bias of market -1.
    MU_A: float = 0.0  # Mean ask price.
    MU_B: float = 1.0  # Mean bid price.
    SIGMA_A: float = 1.0  # Spread of ask prices.
    SIGMA_B: float = 1.0  # Spread of bid prices.
    GROUP_WEIGHT: float = 0.5  # Population fraction of each of two groups.
    HORIZON_ROUNDS: int = 1_000_000  # Longest simulation in trading rounds.
    BETA_MAX: float = 100.0  # Largest intensity of choice searched.


class GridDefaults:
    """
    Defines the default numerical grids for attraction differences and for
    the demand-to-supply window.
    """

    DELTA_LO: float = -1.5  # Lower bound of the attraction-difference grid.
    DELTA_HI: float = 1.5  # Upper bound of the attraction-difference grid.
    DELTA_POINTS: int = 3001  # Points on the attraction-difference grid.
    D_LO: float = 1e-2  # Smallest demand-to-supply ratio in loci searches.
    D_HI: float = 1e2  # Largest demand-to-supply ratio in loci searches.
    D_POINTS: int = 200  # Points per axis of the demand-to-supply grid.
    TWO_PLAYER_SEEDS: int = 9  # Seeds per axis for two-player root finding.
    FOUR_PLAYER_SEEDS: int = 5  # Seeds per axis for four-player root finding.
    HOMOGENEOUS_SEEDS: int = 9  # Seeds per axis for the homogeneous solver.
    BETA_SCAN_POINTS: int = 200  # Bracketing scan points for thresholds.


class Tolerances:
    """
    Defines numerical tolerances shared by the solvers.
    """

    DEDUP: float = 1e-8  # Max-norm distance under which roots are merged.
    RESIDUAL: float = 1e-8  # Max-norm flow residual accepted at a root.
    STABILITY_MARGIN: float = 1e-9  # Eigenvalue margin for marginal cases.
    ROOT_X: float = 1e-12  # Absolute x tolerance for bracketing solvers.
    THRESHOLD: float = 1e-6  # Absolute tolerance for bisected thresholds.
    SPLIT: float = 0.1  # Intra-group spread that marks a split group.
    SIGN: float = 1e-6  # Attraction differences below this count as zero.
    STRONG_FACTOR: float = 10.0  # Equal-minima tolerance as a multiple of r.
    STRONG_LIMIT: float = 1e-6  # Equal-minima tolerance in the r -> 0 limit.
    SELF_LIMIT: float = 1e-6  # Self-consistency tolerance for r -> 0.
    SELF_FINITE: float = 1e-3  # Self-consistency tolerance for finite r.
    NORMALIZATION: float = 1e-8  # Allowed error of a density's integral.
    LOG_D_MERGE: float = 1e-3  # log D distance for merging intersections.
    OMEGA: float = 1e-9  # Slack when accepting weights in [0, 1].
    MOMENT_SWITCH: float = -5.0  # mu/sigma below which moments use quad.


class Lifetime:
    """
    Defines the band rule used to detect escapes from a metastable state.
    """

    BAND: float = 0.05  # Half-width of the Binder bands around theory.
    DWELL: float = 10.0  # Rescaled time the new band must be held.


class StateType:
    """
    Defines labels for the shape of a group's attraction distribution.
    """

    UNFRAGMENTED: str = "U"
    WEAK: str = "W"
    STRONG: str = "S"


class FixedPointClass:
    """
    Defines labels for small-system fixed points.
    """

    UNCOORDINATED: str = "uncoordinated"
    COORDINATED: str = "coordinated"
    FRAGMENTED: str = "fragmented"
    PARTIALLY_FRAGMENTED: str = "partially_fragmented"


class Solver:
    """
    Defines labels for the steady-state solvers that produced a solution.
    """

    HOMOGENEOUS: str = "homogeneous"
    COFRAGMENTED: str = "cofragmented"
    PARTIAL: str = "partial"
    LOCI: str = "loci"


class Columns:
    """
    Defines string constants for column names of every emitted table.
    This keeps CSV headers stable and in a deterministic order.
    """

    BETA: str = "beta"
    INVERSE_BETA: str = "inverse_beta"
    THETA: str = "theta"
    P_BUY: str = "p_buy"
    R: str = "r"
    XI: str = "xi"
    RHO: str = "rho"
    D_XI: str = "d_xi"
    D_RHO: str = "d_rho"
    DELTA: str = "delta"
    DENSITY: str = "density"
    FREE_ENERGY: str = "free_energy"
    STABLE: str = "stable"
    MARGINAL: str = "marginal"
    KIND: str = "kind"
    RETURN: str = "avg_return"
    D_PLUS: str = "d_plus"
    D_MINUS: str = "d_minus"
    GROUP: str = "group"
    AGENT: str = "agent"
    TIME: str = "t"
    BINDER: str = "binder"
    MEAN_DELTA: str = "mean_delta"
    LAG: str = "lag"
    CORRELATION: str = "correlation"
    LOCUS: str = "locus"
    SEGMENT: str = "segment"
    TYPES: str = "types"
    COUNT: str = "count"
    SOLVER: str = "solver"
    VALID: str = "valid"
    N_AGENTS: str = "n_agents"
    SEED: str = "seed"
    LIFETIME: str = "lifetime"
    CENSORED: str = "censored"
    PARAMETER: str = "parameter"
    VALUE: str = "value"
    FAILED: str = "failed"
    ERROR: str = "error"
    COORDINATED: str = "coordinated"
    RESIDUAL: str = "residual"
    PEAKS: str = "peaks"
    NEXT_TYPES: str = "next_types"
    TRANSITION: str = "transition"


class ExitCode:
    """
    Defines process exit codes returned by the command-line runner.
    """

    OK: int = 0
    CONFIG: int = 2
    NUMERICAL: int = 3
    IO: int = 4
    PARTIAL: int = 5  # Completed, with a failure ledger.


class Paths:
    """
    Defines default locations for outputs and presets.
    """

    OUTPUT_DIR: str = "results"
    PRESET_DIR: str = "configs"
    MANIFEST: str = "manifest.json"
    FAILURES: str = "failures.csv"


class Plot:
    """
    Defines constants for static figures.
    """

    WIDTH: int = 700  # Default figure width in pixels.
    HEIGHT: int = 500  # Default figure height in pixels.
    QUIVER_SCALE: float = 0.08  # Arrow scale of flow diagrams.
    MARKER_SIZE: int = 9  # Marker size for fixed points and intersections.
    BG_COLOR: str = "white"  # Plot background color.
    COLOR_STABLE: str = "black"  # Marker color of stable fixed points.
    COLOR_UNSTABLE: str = "lightgray"  # Marker color of unstable ones.
    COLOR_PLUS: str = "royalblue"  # Locus color for market +1.
    COLOR_MINUS: str = "crimson"  # Locus color for market -1.
    COLOR_REFERENCE: str = "gray"  # Color of theory reference lines.
