"""Reader for the simulator's CSV artifacts.

Artifacts are plain CSV with a block of `# key = value` provenance lines
ahead of the header row. The reader keeps the provenance (the berry-scan
fit coefficients live there) and exposes columns as float arrays.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field


class SchemaError(ValueError):
    """The artifact does not carry the columns a figure needs."""


@dataclass
class ArtifactTable:
    columns: dict[str, list[float]]
    provenance: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        if not self.columns:
            return 0
        return len(next(iter(self.columns.values())))

    def require(self, *names: str) -> None:
        missing = [n for n in names if n not in self.columns]
        if missing:
            raise SchemaError(
                "artifact is missing required column(s): " + ", ".join(missing))
        if len(self) == 0:
            raise SchemaError("artifact carries no data rows")

    def col(self, name: str) -> list[float]:
        return self.columns[name]

    def meta_float(self, key: str) -> float | None:
        raw = self.provenance.get(key)
        if raw is None:
            return None
        try:
            return float(raw)
        except ValueError:
            return None


def read_artifact(path) -> ArtifactTable:
    provenance: dict[str, str] = {}
    body = io.StringIO()
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#"):
                stripped = line[1:].strip()
                if "=" in stripped:
                    key, _, value = stripped.partition("=")
                    value = value.strip()
                    if value.endswith(")") and "(" in value:
                        value = value[: value.rindex("(")].strip()
                    provenance[key.strip()] = value
                continue
            body.write(line)
    body.seek(0)
    reader = csv.DictReader(body)
    if reader.fieldnames is None:
        raise SchemaError("artifact has no header row")
    columns: dict[str, list[float]] = {name: [] for name in reader.fieldnames}
    for row in reader:
        for name in reader.fieldnames:
            raw = row[name]
            try:
                columns[name].append(float(raw))
            except (TypeError, ValueError):
                columns[name].append(float("nan"))
    return ArtifactTable(columns=columns, provenance=provenance)
