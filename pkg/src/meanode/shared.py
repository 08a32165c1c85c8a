import csv
import json
import logging
import sys
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any

import numpy as np

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    stream=sys.stderr,
)
logger = logging.getLogger(__name__)


def _default(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return str(obj)


def serialize_response(result: Any, **kwargs: Any) -> str:
    """Serialize a pydantic model, dataclass-like mapping or array to JSON.

    Args:
        result: A pydantic model or any object with a model_dump() method,
            or plain JSON-able data (numpy arrays are converted to lists).
        **kwargs: Additional arguments passed to model_dump().

    Returns:
        JSON string representation of the result.
    """
    if hasattr(result, "model_dump") and callable(result.model_dump):
        return json.dumps(
            result.model_dump(mode="json", **kwargs), indent=2, default=_default
        )
    return json.dumps(result, indent=2, default=_default)


def write_json(path: Path, result: Any) -> None:
    """Write serialize_response(result) to path, creating parent directories."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_response(result) + "\n", encoding="utf-8")


def set_log_level(level: str) -> None:
    logging.getLogger().setLevel(level.upper())


def format_cell(value: Any) -> str:
    """CSV text for one cell; floats are written with repr so reruns match bit for bit."""
    if value is None:
        return ""
    if isinstance(value, bool | np.bool_):
        return "true" if value else "false"
    if isinstance(value, float | np.floating):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """Write a header and rows with format_cell, creating parent directories."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_cell(cell) for cell in row])
    return path
