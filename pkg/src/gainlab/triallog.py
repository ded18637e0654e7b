"""Columnar per-timestep trial log with a fixed CSV/JSONL schema."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def log_columns(state_names, n_constraints) -> list[str]:
    pens = [f"penalty_{i}" for i in range(n_constraints)]
    lams = [f"lambda_{i}" for i in range(n_constraints)]
    return ["episode", "t", *state_names, "primary", *pens, "lambda0", *lams, "delta", "g_combined"]


@dataclass
class TrialLog:
    columns: list[str]
    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float).reshape(-1, len(self.columns))

    @classmethod
    def from_rows(cls, columns, rows, meta=None):
        data = np.vstack(rows) if len(rows) else np.zeros((0, len(columns)))
        return cls(list(columns), data, dict(meta or {}))

    def __len__(self):
        return self.data.shape[0]

    @property
    def n_constraints(self) -> int:
        return sum(c.startswith("penalty_") for c in self.columns)

    @property
    def state_names(self) -> list[str]:
        return self.columns[2:self.columns.index("primary")]

    def col(self, name: str) -> np.ndarray:
        return self.data[:, self.columns.index(name)]

    def penalties(self) -> np.ndarray:
        idx = [self.columns.index(f"penalty_{i}") for i in range(self.n_constraints)]
        return self.data[:, idx]

    def lambdas(self) -> np.ndarray:
        idx = [self.columns.index(f"lambda_{i}") for i in range(self.n_constraints)]
        return self.data[:, idx]

    def states(self) -> np.ndarray:
        return self.data[:, 2:2 + len(self.state_names)]

    @property
    def episode_ids(self) -> np.ndarray:
        return np.unique(self.col("episode").astype(int))

    def per_episode(self, values: np.ndarray, reduce=np.mean) -> np.ndarray:
        """Reduce ``values`` (aligned with rows) per episode, in episode order."""
        ep = self.col("episode").astype(int)
        ids = self.episode_ids
        return np.array([reduce(values[ep == e], axis=0) for e in ids])

    # -- serialisation ---------------------------------------------------

    def _meta_line(self) -> str:
        return "# " + json.dumps(self.meta, sort_keys=True, separators=(",", ":"))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write(self._meta_line() + "\n")
        buf.write(",".join(self.columns) + "\n")
        for row in self.data.tolist():
            head = f"{int(row[0])},{int(row[1])}"
            buf.write(head + "," + ",".join(repr(v) for v in row[2:]) + "\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_jsonl(self, path=None) -> str:
        lines = [json.dumps({"meta": self.meta, "columns": self.columns}, sort_keys=True)]
        for row in self.data.tolist():
            row[0], row[1] = int(row[0]), int(row[1])
            lines.append(json.dumps(row))
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def read(cls, path) -> "TrialLog":
        text = Path(path).read_text()
        if text.startswith("{"):
            return cls.from_jsonl(text)
        return cls.from_csv(text)

    @classmethod
    def from_csv(cls, text: str) -> "TrialLog":
        lines = text.splitlines()
        meta = {}
        if lines and lines[0].startswith("#"):
            meta = json.loads(lines[0][1:].strip())
            lines = lines[1:]
        if not lines:
            raise ValueError("trial log has no header row")
        columns = lines[0].split(",")
        rows = [[float(v) for v in ln.split(",")] for ln in lines[1:] if ln.strip()]
        return cls(columns, np.array(rows).reshape(-1, len(columns)), meta)

    @classmethod
    def from_jsonl(cls, text: str) -> "TrialLog":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = json.loads(lines[0])
        rows = [json.loads(ln) for ln in lines[1:]]
        return cls(head["columns"], np.array(rows, dtype=float).reshape(-1, len(head["columns"])), head["meta"])
