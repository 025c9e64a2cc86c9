import json
import logging

import pandas as pd
import pytest

from src import analysis
from src.errors import NumericalError
from src.constants import ExitCode, GridDefaults, Paths
from src.cli import build_parser, main
from src.data_loader import config_hash
from src.small_n import two_player_fixed_points

TWO_PLAYER = {
    "kind": "two-player",
    "seed": 1,
    "plots": False,
    "learning": {"beta": 6.0},
    "small_n": {"theta": 0.3, "p_buy": 1.0, "flow_points": 5},
}

SIMULATE = {
    "kind": "simulate",
    "seed": 5,
    "plots": False,
    "groups": [{"p_buy": 0.8}, {"p_buy": 0.2}],
    "learning": {"beta": 6.0, "r": 0.1},
    "simulation": {"n_agents": 20, "rounds": 60, "stride": 5, "theory": False},
}

SWEEP = {
    "kind": "sweep",
    "seed": 3,
    "plots": False,
    "groups": [{"p_buy": 0.8}, {"p_buy": 0.2}],
    "learning": {"beta": 6.0, "r": 0.1},
    "simulation": {"rounds": 40, "stride": 5},
    "sweep": {"seeds": 2, "strong": [0.66, 0.66], "alternatives": [[0.9], [0.9]]},
    "axes": [{"name": "n_agents", "values": [10]}],
}


def test_parser_knows_every_experiment():
    parser = build_parser()
    for kind in analysis.RUNNERS:
        args = parser.parse_args([kind, "--config", "c.json"])
        assert args.command == kind
    with pytest.raises(SystemExit):
        parser.parse_args(["two-player"])


def test_two_player_run_writes_tables_and_manifest(write_config, tmp_path):
    path = write_config(TWO_PLAYER)
    out = tmp_path / "out"
    assert main(["two-player", "--config", str(path), "--out", str(out)]) == ExitCode.OK

    manifest = json.loads((out / Paths.MANIFEST).read_text())
    assert manifest["kind"] == "two-player"
    assert manifest["config_hash"] == config_hash(path.read_bytes())
    assert manifest["seed"] == 1
    assert manifest["failures"] == 0
    assert {"flow_field.csv", "fixed_points.csv", "threshold.json"} <= set(manifest["outputs"])

    flow = pd.read_csv(out / "flow_field.csv")
    assert len(flow) == 25
    fixed = pd.read_csv(out / "fixed_points.csv")
    assert len(fixed) == len(two_player_fixed_points(6.0, 0.3, 1.0, GridDefaults.TWO_PLAYER_SEEDS))
    threshold = json.loads((out / "threshold.json").read_text())
    assert threshold["beta_c"] == pytest.approx(4.16, abs=0.02)


def test_seed_and_format_overrides(write_config, tmp_path):
    path = write_config(TWO_PLAYER)
    out = tmp_path / "out"
    code = main(
        ["two-player", "--config", str(path), "--out", str(out), "--seed", "9", "--format", "json"]
    )
    assert code == ExitCode.OK
    assert json.loads((out / Paths.MANIFEST).read_text())["seed"] == 9
    records = json.loads((out / "fixed_points.json").read_text())
    assert isinstance(records, list) and records


def test_simulation_output_is_reproducible(write_config, tmp_path):
    path = write_config(SIMULATE)
    for name in ("a", "b"):
        assert main(["simulate", "--config", str(path), "--out", str(tmp_path / name)]) == 0
    first = (tmp_path / "a" / "series.csv").read_bytes()
    assert first == (tmp_path / "b" / "series.csv").read_bytes()


def test_kind_mismatch_is_a_config_error(write_config, tmp_path):
    path = write_config(TWO_PLAYER)
    code = main(["fp-state", "--config", str(path), "--out", str(tmp_path)])
    assert code == ExitCode.CONFIG


def test_invalid_config_is_a_config_error(write_config, tmp_path):
    path = write_config({"kind": "two-player", "learning": {"beta": -1.0}})
    assert main(["two-player", "--config", str(path), "--out", str(tmp_path)]) == ExitCode.CONFIG


def test_bad_worker_count_is_a_config_error(write_config, tmp_path):
    path = write_config(TWO_PLAYER)
    code = main(["two-player", "--config", str(path), "--out", str(tmp_path), "--workers", "0"])
    assert code == ExitCode.CONFIG


def test_missing_config_is_an_io_error(tmp_path):
    code = main(["two-player", "--config", str(tmp_path / "absent.json")])
    assert code == ExitCode.IO


def test_numerical_failure_exit_code(write_config, tmp_path, monkeypatch):
    def explode(config, seed, workers):
        raise NumericalError("no convergence")

    monkeypatch.setitem(analysis.RUNNERS, "two-player", explode)
    path = write_config(TWO_PLAYER)
    code = main(["two-player", "--config", str(path), "--out", str(tmp_path)])
    assert code == ExitCode.NUMERICAL


def test_partial_results_keep_a_failure_ledger(write_config, tmp_path, monkeypatch):
    def partial(config, seed, workers):
        output = analysis.ExperimentOutput()
        output.tables["cells"] = pd.DataFrame({"beta": [1.0, 2.0], "count": [1, 3]})
        output.fail("cells", "beta=3.0", NumericalError("singular"))
        return output

    monkeypatch.setitem(analysis.RUNNERS, "two-player", partial)
    path = write_config(TWO_PLAYER)
    out = tmp_path / "out"
    assert main(["two-player", "--config", str(path), "--out", str(out)]) == ExitCode.PARTIAL

    ledger = pd.read_csv(out / Paths.FAILURES)
    assert ledger.to_dict("records") == [
        {"stage": "cells", "item": "beta=3.0", "error": "singular"}
    ]
    manifest = json.loads((out / Paths.MANIFEST).read_text())
    assert manifest["failures"] == 1
    assert Paths.FAILURES in manifest["outputs"]


def test_plot_input_must_be_role_and_path(tmp_path):
    code = main(["plot", "--kind", "series", "--input", "series.csv", "--out", str(tmp_path)])
    assert code == ExitCode.CONFIG


def test_plot_with_missing_table_is_an_io_error(tmp_path):
    code = main(
        ["plot", "--kind", "series", "--input", f"series={tmp_path / 'x.csv'}", "--out", str(tmp_path)]
    )
    assert code == ExitCode.IO


def test_info_logging_is_on_without_verbose(write_config, tmp_path, caplog):
    root = logging.getLogger()
    previous = root.level
    try:
        path = write_config(TWO_PLAYER)
        assert main(["two-player", "--config", str(path), "--out", str(tmp_path)]) == ExitCode.OK
        assert root.level == logging.INFO
        assert any(
            record.levelno == logging.INFO and "running two-player" in record.getMessage()
            for record in caplog.records
        )
        assert main(["two-player", "--config", str(path), "--out", str(tmp_path), "-v"]) == 0
        assert root.level == logging.DEBUG
    finally:
        root.setLevel(previous)


def test_sweep_records_the_bands_it_used(write_config, tmp_path):
    path = write_config(SWEEP)
    out = tmp_path / "out"
    assert main(["sweep", "--config", str(path), "--out", str(out)]) == ExitCode.OK

    bands = json.loads((out / "bands.json").read_text())
    assert bands == {"0.1": {"strong": [0.66, 0.66], "alternatives": [[0.9], [0.9]]}}
    lifetimes = pd.read_csv(out / "lifetimes.csv")
    assert len(lifetimes) == 2
