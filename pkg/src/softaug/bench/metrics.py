"""JSON-lines event stream, evaluation reports and the summary CSV.

Every event is one JSON object per line with at least ``type`` and
``step`` (environment steps so far). Event types written by training:

- ``episode``: ``return``, ``length``
- ``rl_update``: ``critic_loss`` and, on actor steps, ``actor_loss``, ``alpha_loss``, ``alpha``
- ``soda_update``: ``L_SODA``, ``z_star_std``, ``target_distance``
- ``eval``: ``variant``, ``mean_return``, ``returns``
- ``summary``: ``env_steps``, ``episodes``, ``rl_updates``, ``soda_updates``

No wall-clock fields are written, so identical runs give identical files.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

SUMMARY_FIELDS = ("method", "variant", "seed", "mean_return")


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


class MetricsWriter:
    """Single appender for one run's event stream."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8")

    def write(self, type_: str, step: int, **fields) -> None:
        row = {"type": type_, "step": int(step), **_clean(fields)}
        self._fh.write(json.dumps(row, sort_keys=False) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> MetricsWriter:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path: str | Path, type_: str | None = None) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            if type_ is None or row["type"] == type_:
                yield row


@dataclass
class EvalReport:
    """Mean episodic return per (variant, seed), with the raw episode returns."""

    method: str
    cells: dict[tuple[str, int], float] = field(default_factory=dict)
    episodes: dict[tuple[str, int], list[float]] = field(default_factory=dict)

    def add(self, variant: str, seed: int, returns: list[float]) -> None:
        self.episodes[(variant, seed)] = [float(r) for r in returns]
        self.cells[(variant, seed)] = float(sum(returns) / len(returns))

    @property
    def variants(self) -> list[str]:
        return list(dict.fromkeys(v for v, _ in self.cells))

    @property
    def seeds(self) -> list[int]:
        return sorted({s for _, s in self.cells})

    def values(self, variant: str) -> list[float]:
        return [self.cells[(variant, s)] for s in self.seeds if (variant, s) in self.cells]

    def aggregate(self, variant: str) -> tuple[float, float]:
        """Mean and population standard deviation across seeds."""
        vals = self.values(variant)
        if not vals:
            raise KeyError(f"no cells for variant {variant!r}")
        mean = sum(vals) / len(vals)
        var = sum((v - mean) ** 2 for v in vals) / len(vals)
        return mean, math.sqrt(var)

    def median(self, variant: str) -> float:
        vals = sorted(self.values(variant))
        n = len(vals)
        return vals[n // 2] if n % 2 else 0.5 * (vals[n // 2 - 1] + vals[n // 2])

    def merge(self, other: EvalReport) -> EvalReport:
        self.cells.update(other.cells)
        self.episodes.update(other.episodes)
        return self

    def rows(self) -> list[dict]:
        return [
            {"method": self.method, "variant": v, "seed": s, "mean_return": repr(r)}
            for (v, s), r in self.cells.items()
        ]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows())

    @classmethod
    def read_csv(cls, path: str | Path) -> EvalReport:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise OSError(f"{path}: summary has no rows")
        report = cls(method=rows[0]["method"])
        for r in rows:
            report.cells[(r["variant"], int(r["seed"]))] = float(r["mean_return"])
        return report
