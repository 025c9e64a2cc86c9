import json
from pathlib import Path
from typing import Any, Callable, Dict

import pytest

from src.fokker_planck import GridSpec
from src.model_core import OrderPriceModel, default_markets

FIG14_BETA = 1.0 / 0.265
FIG14_P_BUY = 0.8


@pytest.fixture
def markets():
    return default_markets(0.3, 0.7)


@pytest.fixture
def prices():
    return OrderPriceModel()


@pytest.fixture
def fine_grid():
    return GridSpec(-1.5, 1.5, 30001)


@pytest.fixture
def write_config(tmp_path: Path) -> Callable[[Dict[str, Any], str], Path]:
    def write(payload: Dict[str, Any], name: str = "config.json") -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(payload), encoding="utf-8")
        return path

    return write
