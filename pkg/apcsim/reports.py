"""
Simple report writers.
Every output carries the config hash so artifacts of different runs cannot be mixed up.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Iterable, Optional, Sequence

logger = logging.getLogger(__name__)


def write_json(path, data: dict, config_hash: Optional[str] = None) -> Path:
    """
    Write a JSON report with sorted keys.

    Args:
        path: Output file
        data: Report content
        config_hash: Added as the `config_hash` key

    Returns:
        Path: The written file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(data)
    if config_hash is not None:
        payload["config_hash"] = config_hash
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    logger.info("wrote %s", path)
    return path


def write_csv(path, rows: Iterable[dict], columns: Sequence[str], config_hash: Optional[str] = None) -> Path:
    """
    Write rows as CSV with a header; `config_hash` is appended as the last column.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns) + (["config_hash"] if config_hash is not None else [])
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            if config_hash is not None:
                row = {**row, "config_hash": config_hash}
            writer.writerow({key: row.get(key) for key in columns})
    logger.info("wrote %s", path)
    return path


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())
