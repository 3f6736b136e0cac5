"""Loss curves as JSON lines, one record per optimizer step."""

import json
import math
from pathlib import Path
from typing import Any

from assets.io import atomic_write_text


def _clean(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


def write_history(path: str | Path, records: list[dict[str, Any]]) -> Path:
    lines = [json.dumps({k: _clean(v) for k, v in record.items()}, sort_keys=True) for record in records]
    return atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_history(path: str | Path) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]
