"""Per-iteration metric rows and their CSV / JSONL emission."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

COLUMNS = (
    "iter",
    "delta",
    "train_return",
    "objective",
    "attacked_loss",
    "actual_loss",
    "eval_return",
    "e_delta",
    "e_theta",
    "grad_norm_theta",
    "grad_delta",
    "step_theta",
    "step_delta",
    "inner_return",
    "wall_ms",
)
# wall-clock time is the only column allowed to differ between identical runs
NONDETERMINISTIC = ("wall_ms",)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return repr(value)
    return str(value)


@dataclass
class RunLog:
    rows: list[dict] = field(default_factory=list)
    columns: tuple[str, ...] = COLUMNS

    def append(self, **row) -> dict:
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"unknown RunLog columns {sorted(unknown)}")
        self.rows.append(row)
        return row

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        return [r.get(name) for r in self.rows]

    def deterministic_rows(self) -> list[tuple]:
        cols = [c for c in self.columns if c not in NONDETERMINISTIC]
        return [tuple(_fmt(r.get(c)) for c in cols) for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(r.get(c)) for c in self.columns])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for r in self.rows:
                fh.write(json.dumps({c: r.get(c) for c in self.columns}, sort_keys=True) + "\n")

    def extend(self, other: "RunLog") -> None:
        self.rows.extend(other.rows)


def read_csv(path: str | Path) -> list[dict]:
    """Rows of a RunLog/diagnostics CSV with numeric fields parsed, blanks as None."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if v == "" or v is None:
                    parsed[k] = None
                else:
                    try:
                        parsed[k] = int(v) if k == "iter" else float(v)
                    except ValueError:
                        parsed[k] = v
            out.append(parsed)
    return out
