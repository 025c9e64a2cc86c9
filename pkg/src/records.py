import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from src.constants import Paths

logger = logging.getLogger(__name__)

PACKAGE_NAME: str = "two-market-choice"


def package_version() -> str:
    try:
        return metadata.version(PACKAGE_NAME)
    except metadata.PackageNotFoundError:
        return "unknown"


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """
    Provenance of one run: everything needed to reproduce it and every
    file it wrote, relative to the output directory.
    """

    kind: str
    config_hash: str
    version: str
    seed: Optional[int]
    started: str
    finished: str = ""
    outputs: List[str] = field(default_factory=list)
    failures: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _to_builtin(value: Any) -> Any:
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_table(frame: pd.DataFrame, directory: Path, name: str, fmt: str = "csv") -> Path:
    """
    Writes a table as UTF-8 CSV with a header row, or as a JSON list of
    records. Column order is kept as given.
    """
    directory.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path = directory / f"{name}.json"
        path.write_text(frame.to_json(orient="records", indent=2), encoding="utf-8")
    else:
        path = directory / f"{name}.csv"
        frame.to_csv(path, index=False, encoding="utf-8")
    logger.debug("wrote %s (%d rows)", path, len(frame))
    return path


def write_json(payload: Any, directory: Path, name: str) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{name}.json"
    path.write_text(
        json.dumps(payload, indent=2, sort_keys=True, default=_to_builtin), encoding="utf-8"
    )
    return path


def write_failures(failures: List[Dict[str, Any]], directory: Path) -> Optional[Path]:
    """Writes the failure ledger when there is anything in it."""
    if not failures:
        return None
    path = directory / Paths.FAILURES
    pd.DataFrame(failures).to_csv(path, index=False, encoding="utf-8")
    logger.warning("%d failures recorded in %s", len(failures), path)
    return path


def write_manifest(manifest: RunManifest, directory: Path) -> Path:
    path = directory / Paths.MANIFEST
    path.write_text(json.dumps(manifest.to_dict(), indent=2), encoding="utf-8")
    return path
