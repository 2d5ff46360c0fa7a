"""
CSV reports with a provenance header.

Every report starts with ``# key: value`` comment lines (tool version, seed, config hash, ...)
followed by a normal CSV body. Nothing time-dependent goes in the header, so reruns with the same
inputs give byte-identical files.
"""

import csv
import io
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence

from .. import __version__
from .atomic import PathLike, atomic_write


class CsvReportError(Exception):
    """Error with a CSV report"""


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class CsvReport:
    """A CSV table plus its provenance header."""

    columns: List[str]
    rows: List[List[Any]] = field(default_factory=list)
    provenance: Dict[str, str] = field(default_factory=dict)

    def add_row(self, row: Sequence[Any]):
        """Append a row, which must have one value per column."""

        if len(row) != len(self.columns):
            raise CsvReportError(f"row has {len(row)} values for {len(self.columns)} columns")
        self.rows.append(list(row))

    def dumps(self) -> str:
        """Get the file content."""

        buf = io.StringIO()
        header = {"version": __version__}
        header.update(self.provenance)
        for key, value in header.items():
            buf.write(f"# {key}: {value}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_cell(v) for v in row])
        return buf.getvalue()

    def write(self, path: PathLike):
        """Write the report atomically."""

        atomic_write(path, self.dumps())

    @classmethod
    def loads(cls, text: str):
        """Parse file content. Values come back as strings."""

        provenance = {}
        body = []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                provenance[key.strip()] = value.strip()
            elif line:
                body.append(line)

        if not body:
            raise CsvReportError("report has no column header")
        reader = csv.reader(body)
        columns = next(reader)
        rows = [list(r) for r in reader]
        return cls(columns, rows, provenance)

    @classmethod
    def read(cls, path: PathLike):
        """Read a report file."""

        with open(path, "r") as f:
            return cls.loads(f.read())

    def column(self, name: str) -> List[Any]:
        """Get every value of a column."""

        try:
            index = self.columns.index(name)
        except ValueError:
            raise CsvReportError(f"no column '{name}'")
        return [row[index] for row in self.rows]


def provenance(seed: Optional[int] = None, config_hash: Optional[str] = None, **extra) -> Dict:
    """Build a provenance header dict, skipping unset values."""

    out = {}
    if seed is not None:
        out["seed"] = str(seed)
    if config_hash is not None:
        out["config_hash"] = config_hash
    for key, value in extra.items():
        if value is not None:
            out[key] = str(value)
    return out


def write_rows(
    path: PathLike, columns: Sequence[str], rows: Iterable[Sequence[Any]], header: Dict = None
) -> CsvReport:
    """Make and write a report in one call."""

    report = CsvReport(list(columns), provenance=dict(header or {}))
    for row in rows:
        report.add_row(row)
    report.write(path)
    return report
