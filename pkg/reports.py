"""JSON reports with sibling CSV tables."""
import logging
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
from pydantic import BaseModel

from errors import IoFailure

logger = logging.getLogger(__name__)


def write_json(model: BaseModel, path: str | Path) -> Path:
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(model.model_dump_json(indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot write report {target}: {e}") from e
    return target


def write_table(rows: List[dict], path: str | Path, config_hash: Optional[str] = None, seed: Optional[int] = None) -> Path:
    """One CSV row per dict; config hash and seed are stamped on every row when given."""
    frame = pd.DataFrame(rows)
    if config_hash is not None:
        frame.insert(0, "config_hash", config_hash)
    if seed is not None:
        frame.insert(1 if config_hash is not None else 0, "seed", seed)
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(target, index=False, float_format="%.9g", lineterminator="\n")
    except OSError as e:
        raise IoFailure(f"cannot write table {target}: {e}") from e
    return target


def write_report(
    model: BaseModel,
    path: str | Path,
    rows: List[dict],
    curves: Optional[Dict[str, List[dict]]] = None,
    config_hash: Optional[str] = None,
    seed: Optional[int] = None,
) -> List[Path]:
    """`path` gets the JSON; `<stem>.csv` the rows; `<stem>.<curve>.csv` each curve."""
    target = Path(path)
    written = [write_json(model, target), write_table(rows, target.with_suffix(".csv"), config_hash, seed)]
    for name, points in (curves or {}).items():
        if points:
            written.append(write_table(points, target.with_name(f"{target.stem}.{name}.csv"), config_hash, seed))
    logger.info(f"Wrote report {target} ({len(written) - 1} tables)")
    return written
