import csv
import io
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import DataError

logger = logging.getLogger(__name__)


def _format(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


class CsvResult:
    """A table with a fixed column order and a ``#``-prefixed metadata header.

    Every metadata entry becomes one ``# key: <json>`` line ahead of the
    column header, so the file stays readable by gnuplot and csv readers that
    skip comments.
    """

    def __init__(self, columns: Sequence[str], rows: Optional[Iterable[Dict[str, Any]]] = None,
                 metadata: Optional[Dict[str, Any]] = None):
        self.columns = list(columns)
        self.rows: List[Dict[str, Any]] = []
        self.metadata = dict(metadata or {})
        for row in rows or ():
            self.add_row(**row)

    def add_row(self, **values: Any) -> None:
        missing = [c for c in self.columns if c not in values]
        extra = [k for k in values if k not in self.columns]
        if missing or extra:
            raise DataError("row does not match the result columns", missing=missing or None,
                            extra=extra or None)
        self.rows.append(values)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> List[Any]:
        return [row[name] for row in self.rows]

    def _encode_content(self) -> str:
        buffer = io.StringIO()
        for key, value in self.metadata.items():
            buffer.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_format(row[c]) for c in self.columns])
        return buffer.getvalue()

    def write(self, path: Union[str, Path]) -> Path:
        """Write atomically: a temporary sibling file renamed over ``path``."""
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_text(self._encode_content(), encoding="utf-8")
            os.replace(tmp, path)
        except OSError as exc:
            raise DataError(f"cannot write results: {exc.strerror or exc}", path=path) from exc
        logger.info("wrote %d rows to %s", len(self.rows), path)
        return path


def read_csv(path: Union[str, Path]) -> Tuple[Dict[str, Any], List[Dict[str, str]]]:
    """Metadata dict and rows (as strings) of a file written by :class:`CsvResult`."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read results: {exc.strerror or exc}", path=path) from exc
    metadata: Dict[str, Any] = {}
    body = []
    for line in lines:
        if line.startswith("# "):
            key, _, value = line[2:].partition(": ")
            metadata[key] = json.loads(value)
        else:
            body.append(line)
    return metadata, list(csv.DictReader(body))
