"""Append-only metrics CSV with a frozen column schema.

One row per training step (kind=train) and one per evaluation (kind=eval);
columns not applicable to a row kind are left empty. The only
non-deterministic content is the created-at comment on the first line.
"""

from __future__ import annotations

import datetime
from pathlib import Path

SCHEMA_VERSION = 1
COLUMNS = [
    "kind", "train_iter", "env_steps",
    "loss", "loss_reward", "loss_policy", "loss_value", "loss_consistency",
    "grad_norm", "branch_td", "branch_sve", "fault",
    "success_rate", "mean_return", "std_return",
]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


class MetricsWriter:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8")
        stamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
        self._fh.write(f"# slotplan metrics v{SCHEMA_VERSION} created {stamp}\n")
        self._fh.write(",".join(COLUMNS) + "\n")
        self._fh.flush()

    def _write(self, values: dict) -> None:
        self._fh.write(",".join(_fmt(values.get(c)) for c in COLUMNS) + "\n")
        self._fh.flush()

    def train_row(self, train_iter: int, env_steps: int, row: dict) -> None:
        self._write({
            "kind": "train", "train_iter": train_iter, "env_steps": env_steps,
            "loss": row.get("loss"), "loss_reward": row.get("loss_reward"),
            "loss_policy": row.get("loss_policy"), "loss_value": row.get("loss_value"),
            "loss_consistency": row.get("loss_consistency"),
            "grad_norm": row.get("grad_norm"),
            "branch_td": row.get("branch_td"), "branch_sve": row.get("branch_sve"),
            "fault": row.get("fault"),
        })

    def eval_row(self, train_iter: int, env_steps: int, stats) -> None:
        self._write({
            "kind": "eval", "train_iter": train_iter, "env_steps": env_steps,
            "success_rate": stats.success_rate, "mean_return": stats.mean_return,
            "std_return": stats.std_return,
        })

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV back into a list of row dicts (strings kept as-is,
    numeric fields converted where present)."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = None
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = line.split(",")
                continue
            parts = line.split(",")
            row = {}
            for key, raw in zip(header, parts):
                if raw == "":
                    row[key] = None
                elif key == "kind":
                    row[key] = raw
                else:
                    try:
                        row[key] = int(raw)
                    except ValueError:
                        row[key] = float(raw)
            rows.append(row)
    return rows
