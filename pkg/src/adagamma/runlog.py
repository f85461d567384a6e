"""Append-only CSV metric log shared by the SAC and PPO trainers."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Optional

COLUMNS = (
    "step", "episode", "eval_return_mean", "eval_return_std",
    "mean_gamma", "min_gamma", "max_gamma",
    "gamma_loss_rc", "gamma_loss_dev", "gamma_loss_var", "gamma_loss_bound",
    "critic_loss", "policy_loss", "alpha", "gamma_ref",
)
INT_COLUMNS = ("step", "episode")


def _fmt(value) -> str:
    if value is None:
        return "nan"
    if isinstance(value, int):
        return str(value)
    return format(float(value), ".9g")


class RunLog:
    """Rows keyed by :data:`COLUMNS`; each row is flushed as it is appended so a
    partially written file parses up to its last complete line."""

    def __init__(self, path: Optional[Path] = None):
        self.rows: list[dict] = []
        self.path = Path(path) if path is not None else None
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", newline="")
            self._fh.write(",".join(COLUMNS) + "\n")
            self._fh.flush()

    def append(self, **values) -> dict:
        unknown = set(values) - set(COLUMNS)
        if unknown:
            raise KeyError(f"unknown log columns: {sorted(unknown)}")
        row = {c: values.get(c) for c in COLUMNS}
        row["step"] = int(row["step"])
        row["episode"] = int(row["episode"] or 0)
        for c in COLUMNS:
            if c not in INT_COLUMNS:
                row[c] = math.nan if row[c] is None else float(row[c])
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("log steps must be strictly increasing")
        self.rows.append(row)
        if self._fh is not None:
            self._fh.write(",".join(_fmt(row[c]) for c in COLUMNS) + "\n")
            self._fh.flush()
        return row

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def last(self, name: str, default=math.nan):
        for r in reversed(self.rows):
            v = r[name]
            if not (isinstance(v, float) and math.isnan(v)):
                return v
        return default

    def __len__(self):
        return len(self.rows)


def read_runlog(path) -> list[dict]:
    """Parse a log file, ignoring a trailing partial line."""
    text = Path(path).read_text()
    lines = text.split("\n")
    if lines and lines[-1] != "":
        lines = lines[:-1]
    lines = [ln for ln in lines if ln]
    if not lines:
        return []
    header = lines[0].split(",")
    if tuple(header) != COLUMNS:
        raise ValueError(f"unexpected log header in {path}")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != len(COLUMNS):
            break
        rows.append({c: (int(v) if c in INT_COLUMNS else float(v)) for c, v in zip(COLUMNS, parts)})
    return rows
