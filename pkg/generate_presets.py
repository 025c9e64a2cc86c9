import json
from pathlib import Path
from typing import Any, Dict

from src.constants import Paths

DECISIVE = [{"p_buy": 0.8}, {"p_buy": 0.2}]
INDECISIVE = [{"p_buy": 0.55}, {"p_buy": 0.45}]


def generate_presets() -> Dict[str, Dict[str, Any]]:
    """
    Builds desk-scale experiment configs for the standard figures.
    Long runs use fewer seeds and shorter horizons than the published ones.

    Returns:
        Dict[str, Dict[str, Any]]: Config payloads keyed by preset name.
    """
    presets: Dict[str, Dict[str, Any]] = {
        "fig2_two_player": {
            "kind": "two-player",
            "seed": 1,
            "learning": {"beta": 6.0},
            "small_n": {"theta": 0.3, "p_buy": 1.0},
        },
        "fig3_four_player": {
            "kind": "four-player",
            "seed": 1,
            "learning": {"beta": 10.0},
            "small_n": {"theta": 0.3, "p_buy": 1.0},
        },
        "fig4_four_player_thresholds": {
            "kind": "four-player",
            "seed": 1,
            "small_n": {"theta": 0.3, "p_buy": 1.0},
            "axes": [{"name": "theta", "start": 0.05, "stop": 0.5, "points": 10}],
        },
        "fig5_fp_state": {
            "kind": "fp-state",
            "seed": 1,
            "learning": {"inverse_beta": 0.265, "r": 0.001},
            "fp": {"p_buy": 0.8, "d": [1.1, 1.0]},
        },
        "fig7_solve_steady": {
            "kind": "solve-steady",
            "seed": 1,
            "groups": INDECISIVE,
            "learning": {"inverse_beta": 0.285},
        },
        "fig8_phase_diagram": {
            "kind": "phase-diagram",
            "seed": 1,
            "workers": 4,
            "window": {"points": 120},
            "axes": [
                {"name": "inverse_beta", "start": 0.1, "stop": 0.35, "points": 11},
                {"name": "p_buy", "start": 0.55, "stop": 0.95, "points": 9},
            ],
        },
        "fig10_simulate": {
            "kind": "simulate",
            "seed": 10,
            "groups": DECISIVE,
            "learning": {"inverse_beta": 0.16, "r": 0.05},
            "simulation": {"n_agents": 2000, "rounds": 40000, "stride": 20},
        },
        "fig11_sweep_agents": {
            "kind": "sweep",
            "seed": 11,
            "workers": 4,
            "groups": DECISIVE,
            "learning": {"inverse_beta": 0.16, "r": 0.05},
            "simulation": {"rounds": 40000, "stride": 20},
            "sweep": {"seeds": 4},
            "axes": [{"name": "n_agents", "values": [200, 500, 1000]}],
        },
        "fig12_phase_r_beta": {
            "kind": "phase-diagram",
            "seed": 1,
            "workers": 4,
            "groups": DECISIVE,
            "window": {"points": 80},
            "axes": [
                {"name": "r", "values": [0.01, 0.03, 0.05, 0.07, 0.09]},
                {"name": "inverse_beta", "values": [0.12, 0.15, 0.18]},
            ],
        },
        "fig13_sweep_learning_rate": {
            "kind": "sweep",
            "seed": 13,
            "workers": 4,
            "groups": DECISIVE,
            "learning": {"inverse_beta": 0.16, "r": 0.05},
            "simulation": {"n_agents": 200, "rounds": 40000, "stride": 20},
            "sweep": {"seeds": 4},
            "axes": [{"name": "r", "values": [0.03, 0.05, 0.06]}],
        },
        "fig14_kernel_check": {
            "kind": "fp-state",
            "seed": 14,
            "learning": {"inverse_beta": 0.265, "r": 0.05},
            "fp": {
                "p_buy": 0.8,
                "d": [1.15, 1.0],
                "kernel_steps": 20000,
                "kernel_walkers": 50,
                "burn_in": 2000,
            },
        },
    }
    for inverse_beta in (0.31, 0.29, 0.265, 0.2):
        label = f"{inverse_beta:.3f}".rstrip("0").replace(".", "")
        presets[f"fig6_loci_{label}"] = {
            "kind": "loci",
            "seed": 1,
            "groups": DECISIVE,
            "learning": {"inverse_beta": inverse_beta, "r": 0.001},
        }
    for name, payload in presets.items():
        payload.setdefault("output_dir", f"{Paths.OUTPUT_DIR}/{name}")
    return presets


if __name__ == "__main__":
    directory = Path(Paths.PRESET_DIR)
    directory.mkdir(parents=True, exist_ok=True)
    presets = generate_presets()
    for name, payload in presets.items():
        (directory / f"{name}.json").write_text(json.dumps(payload, indent=2) + "\n")
    print(f"Generated {len(presets)} presets in {directory}")
