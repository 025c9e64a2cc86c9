import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
import plotly.figure_factory as ff
import plotly.graph_objects as go

from src.errors import SchemaError
from src.constants import Columns, Plot

logger = logging.getLogger(__name__)

PLOT_KINDS: Tuple[str, ...] = ("flow", "distribution", "loci", "phase", "series")

# Required columns per (plot kind, table role); roles missing here are optional.
REQUIRED_COLUMNS: Dict[Tuple[str, str], List[str]] = {
    ("flow", "field"): [Columns.XI, Columns.RHO, Columns.D_XI, Columns.D_RHO],
    ("flow", "points"): [Columns.XI, Columns.RHO, Columns.STABLE],
    ("distribution", "profile"): [Columns.DELTA, Columns.FREE_ENERGY],
    ("loci", "loci"): [Columns.LOCUS, Columns.SEGMENT, Columns.D_PLUS, Columns.D_MINUS],
    ("loci", "states"): [Columns.D_PLUS, Columns.D_MINUS, Columns.TYPES],
    ("phase", "cells"): [Columns.COUNT, Columns.TYPES],
    ("series", "series"): [Columns.TIME, Columns.GROUP, Columns.BINDER],
}
PRIMARY_ROLE: Dict[str, str] = {
    "flow": "field",
    "distribution": "profile",
    "loci": "loci",
    "phase": "cells",
    "series": "series",
}


@dataclass(frozen=True)
class PlotSpec:
    """
    One figure: its kind, the tables it draws (role -> table name), and
    optional reference values and axis names.
    """

    kind: str
    name: str
    tables: Dict[str, str]
    references: Tuple[float, ...] = ()
    axes: Tuple[str, ...] = ()
    title: str = ""

    def __post_init__(self) -> None:
        if self.kind not in PLOT_KINDS:
            raise SchemaError("unknown plot kind", [f"kind: {self.kind!r} not in {PLOT_KINDS}"])
        if PRIMARY_ROLE[self.kind] not in self.tables:
            raise SchemaError("missing plot input", [f"tables: needs {PRIMARY_ROLE[self.kind]!r}"])


def check_schema(frame: pd.DataFrame, columns: Sequence[str], name: str) -> None:
    """Raises SchemaError unless `frame` has every column in `columns`."""
    missing = [column for column in columns if column not in frame.columns]
    if missing:
        raise SchemaError("table schema mismatch", [f"{name}: missing {missing}"])


def _base_layout(fig: go.Figure, title: str, x_title: str, y_title: str) -> go.Figure:
    fig.update_layout(
        title=title,
        xaxis_title=x_title,
        yaxis_title=y_title,
        plot_bgcolor=Plot.BG_COLOR,
        width=Plot.WIDTH,
        height=Plot.HEIGHT,
    )
    return fig


def create_flow_figure(
    flow: pd.DataFrame, points: Optional[pd.DataFrame] = None, title: str = ""
) -> go.Figure:
    """
    Creates a quiver plot of the two-agent flow in (xi, rho) with fixed
    points marked black when stable and gray otherwise.

    Args:
        flow (pd.DataFrame): Gridded flow with xi, rho, d_xi, d_rho.
        points (Optional[pd.DataFrame]): Fixed points with xi, rho, stable.
        title (str): Figure title.

    Returns:
        go.Figure: The flow diagram.
    """
    fig = ff.create_quiver(
        flow[Columns.XI].to_numpy(),
        flow[Columns.RHO].to_numpy(),
        flow[Columns.D_XI].to_numpy(),
        flow[Columns.D_RHO].to_numpy(),
        scale=Plot.QUIVER_SCALE,
        name="flow",
        line=dict(color=Plot.COLOR_REFERENCE),
    )
    if points is not None and not points.empty:
        for stable, color in ((True, Plot.COLOR_STABLE), (False, Plot.COLOR_UNSTABLE)):
            subset = points[points[Columns.STABLE] == stable]
            fig.add_trace(
                go.Scatter(
                    x=subset[Columns.XI],
                    y=subset[Columns.RHO],
                    mode="markers",
                    name="stable" if stable else "unstable",
                    marker=dict(size=Plot.MARKER_SIZE, color=color, line=dict(width=1)),
                )
            )
    return _base_layout(fig, title, "xi", "rho")


def create_distribution_figure(profile: pd.DataFrame, title: str = "") -> go.Figure:
    """Free energy f(delta) and, when present, the density P(delta) on a second axis."""
    fig = go.Figure()
    fig.add_trace(
        go.Scatter(
            x=profile[Columns.DELTA],
            y=profile[Columns.FREE_ENERGY],
            mode="lines",
            name="f",
            line=dict(color=Plot.COLOR_MINUS),
        )
    )
    if Columns.DENSITY in profile.columns:
        fig.add_trace(
            go.Scatter(
                x=profile[Columns.DELTA],
                y=profile[Columns.DENSITY],
                mode="lines",
                name="P",
                yaxis="y2",
                line=dict(color=Plot.COLOR_PLUS),
            )
        )
        fig.update_layout(yaxis2=dict(title="P", overlaying="y", side="right"))
    return _base_layout(fig, title, "delta", "f")


def create_loci_figure(
    loci: pd.DataFrame, states: Optional[pd.DataFrame] = None, title: str = ""
) -> go.Figure:
    """Self-consistency loci on log axes with the steady states marked."""
    fig = go.Figure()
    colors = {1: Plot.COLOR_PLUS, -1: Plot.COLOR_MINUS}
    for (label, segment), line in loci.groupby([Columns.LOCUS, Columns.SEGMENT]):
        fig.add_trace(
            go.Scatter(
                x=line[Columns.D_PLUS],
                y=line[Columns.D_MINUS],
                mode="lines",
                name=f"D{label:+d}' = D{label:+d}",
                legendgroup=str(label),
                showlegend=bool(segment == 0),
                line=dict(color=colors.get(label, Plot.COLOR_REFERENCE)),
            )
        )
    if states is not None and not states.empty:
        fig.add_trace(
            go.Scatter(
                x=states[Columns.D_PLUS],
                y=states[Columns.D_MINUS],
                mode="markers+text",
                text=states[Columns.TYPES],
                textposition="top right",
                name="steady states",
                marker=dict(size=Plot.MARKER_SIZE, color=Plot.COLOR_STABLE),
            )
        )
    fig = _base_layout(fig, title, "D+1", "D-1")
    fig.update_xaxes(type="log")
    fig.update_yaxes(type="log")
    return fig


def create_phase_figure(
    cells: pd.DataFrame,
    axes: Tuple[str, str],
    boundaries: Optional[pd.DataFrame] = None,
    title: str = "",
) -> go.Figure:
    """
    Phase diagram: one colored square per cell, grouped by the multiset of
    steady-state types, with refined boundary points overlaid.
    """
    x_name, y_name = axes
    check_schema(cells, [x_name, y_name], "cells")
    fig = go.Figure()
    for types, part in cells.groupby(Columns.TYPES, sort=True):
        fig.add_trace(
            go.Scatter(
                x=part[x_name],
                y=part[y_name],
                mode="markers",
                name=types or "none",
                marker=dict(symbol="square", size=Plot.MARKER_SIZE),
            )
        )
    if boundaries is not None and not boundaries.empty:
        fig.add_trace(
            go.Scatter(
                x=boundaries[x_name],
                y=boundaries[y_name],
                mode="markers",
                name="boundary",
                marker=dict(symbol="x", size=Plot.MARKER_SIZE, color=Plot.COLOR_STABLE),
            )
        )
    return _base_layout(fig, title, x_name, y_name)


def create_series_figure(
    series: pd.DataFrame, references: Sequence[float] = (), title: str = ""
) -> go.Figure:
    """Binder cumulant per group over rescaled time with reference lines."""
    fig = go.Figure()
    for group, part in series.groupby(Columns.GROUP):
        fig.add_trace(
            go.Scatter(
                x=part[Columns.TIME], y=part[Columns.BINDER], mode="lines", name=f"group {group}"
            )
        )
    for value in references:
        fig.add_hline(y=value, line=dict(color=Plot.COLOR_REFERENCE, dash="dash"))
    return _base_layout(fig, title, "t", "B")


def build_figure(spec: PlotSpec, tables: Dict[str, pd.DataFrame]) -> go.Figure:
    """Checks the input schemas of a spec and builds its figure."""
    frames = {}
    for role, name in spec.tables.items():
        if name not in tables:
            raise SchemaError("missing plot input", [f"{spec.name}.{role}: no table {name!r}"])
        frame = tables[name]
        check_schema(frame, REQUIRED_COLUMNS.get((spec.kind, role), []), f"{spec.name}.{role}")
        frames[role] = frame

    if spec.kind == "flow":
        return create_flow_figure(frames["field"], frames.get("points"), spec.title)
    if spec.kind == "distribution":
        return create_distribution_figure(frames["profile"], spec.title)
    if spec.kind == "loci":
        return create_loci_figure(frames["loci"], frames.get("states"), spec.title)
    if spec.kind == "phase":
        if len(spec.axes) != 2:
            raise SchemaError("phase plot needs two axes", [f"{spec.name}.axes: {spec.axes}"])
        return create_phase_figure(frames["cells"], spec.axes, frames.get("boundaries"), spec.title)
    return create_series_figure(frames["series"], spec.references, spec.title)


def emit_plots(
    tables: Dict[str, pd.DataFrame], specs: Sequence[PlotSpec], directory: Path
) -> List[Path]:
    """
    Renders every spec to `<directory>/<name>.svg`.

    Args:
        tables (Dict[str, pd.DataFrame]): Available tables by name.
        specs (Sequence[PlotSpec]): Figures to render.
        directory (Path): Output directory.

    Returns:
        List[Path]: The written files, in spec order.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for spec in specs:
        path = directory / f"{spec.name}.svg"
        build_figure(spec, tables).write_image(str(path), format="svg")
        logger.info("wrote %s", path)
        written.append(path)
    return written


def load_tables(inputs: Dict[str, Path]) -> Dict[str, pd.DataFrame]:
    """Reads CSV inputs keyed by table name."""
    return {name: pd.read_csv(path) for name, path in inputs.items()}
