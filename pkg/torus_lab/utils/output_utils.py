"""
Result sink for JSONL and CSV artifacts.

Floats are always printed with 17 significant digits so that two runs with the
same inputs produce byte-identical files.
"""
import csv
import json
import logging
import math
import threading
from pathlib import Path
from typing import Any, Iterable, List, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FLOAT_DIGITS = 17


def format_float(value: float, digits: int = FLOAT_DIGITS) -> str:
    value = float(value)
    if math.isnan(value):
        return "NaN"
    if math.isinf(value):
        return "Infinity" if value > 0 else "-Infinity"
    return format(value, f".{digits}g")


def to_json(obj: Any, digits: int = FLOAT_DIGITS) -> str:
    """Serialize plain data with fixed-precision floats and stable key order."""
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        # JSON has no token for inf or nan
        return format_float(obj, digits) if math.isfinite(obj) else "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        items = (f"{json.dumps(str(k))}:{to_json(v, digits)}" for k, v in obj.items())
        return "{" + ",".join(items) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ",".join(to_json(v, digits) for v in obj) + "]"
    raise TypeError(f"Cannot serialize object of type {type(obj).__name__}")


def _csv_cell(value: Any, digits: int) -> str:
    if isinstance(value, (float, np.floating)):
        return format_float(value, digits)
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    return str(value)


class ResultSink:
    """
    Single writer for a run's output directory.

    Worker threads hand finished records to the sink; the lock serializes the
    actual file writes.
    """

    def __init__(self, out_dir, digits: int = FLOAT_DIGITS):
        self.out_dir = Path(out_dir)
        self.digits = digits
        self._lock = threading.Lock()
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        target = self.out_dir / name
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def write_jsonl(self, name: str, records: Iterable[Any]) -> Path:
        target = self.path(name)
        with self._lock:
            with target.open("w", encoding="utf-8", newline="\n") as handle:
                for record in records:
                    handle.write(to_json(record, self.digits))
                    handle.write("\n")
        logger.info(f"Wrote {target}")
        return target

    def write_json(self, name: str, payload: Any) -> Path:
        target = self.path(name)
        with self._lock:
            target.write_text(to_json(payload, self.digits) + "\n", encoding="utf-8")
        logger.info(f"Wrote {target}")
        return target

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        target = self.path(name)
        with self._lock:
            with target.open("w", encoding="utf-8", newline="") as handle:
                writer = csv.writer(handle, lineterminator="\n")
                writer.writerow(header)
                for row in rows:
                    writer.writerow([_csv_cell(v, self.digits) for v in row])
        logger.info(f"Wrote {target}")
        return target


def read_jsonl(path) -> List[Any]:
    with Path(path).open(encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]
