"""
CSV metrics and result tables.

Layout: first line ``# config_hash=<hash>``, then a header row, then one row
per record. Comma separated, dot decimal, floats written with ``repr``.
"""

import csv
import os
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple


def _format(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


class MetricsWriter:
    """Streams rows to a CSV file; the header is fixed by `columns`."""

    def __init__(self, path: Optional[str], columns: Sequence[str], config_hash: str, append: bool = False):
        self.path = path
        self.columns = list(columns)
        self.rows: List[Dict[str, Any]] = []
        self._file = None
        self._writer = None
        if path:
            os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
            resume = append and os.path.exists(path)
            self._file = open(path, 'a' if resume else 'w', newline='', encoding='utf-8')
            self._writer = csv.writer(self._file, lineterminator='\n')
            if not resume:
                self._file.write(f"# config_hash={config_hash}\n")
                self._writer.writerow(self.columns)

    def write(self, **row: Any):
        missing = [c for c in self.columns if c not in row]
        if missing:
            raise KeyError(f"metrics row missing columns: {missing}")
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow([_format(row[c]) for c in self.columns])
            self._file.flush()

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def write_table(path: str, columns: Sequence[str], rows: Iterable[Dict[str, Any]], config_hash: str):
    with MetricsWriter(path, columns, config_hash) as writer:
        for row in rows:
            writer.write(**row)


def read_table(path: str) -> Tuple[str, List[Dict[str, str]]]:
    """Return (config hash, rows as string dicts)."""
    with open(path, 'r', encoding='utf-8') as f:
        first = f.readline().strip()
        config_hash = first.split('=', 1)[1] if first.startswith('# config_hash=') else ''
        rows = list(csv.DictReader(f))
    return config_hash, rows


def mean_and_stderr(values: Sequence[float]) -> Tuple[float, float]:
    n = len(values)
    if n == 0:
        return float('nan'), float('nan')
    mean = sum(values) / n
    if n == 1:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, (var / n) ** 0.5
