"""Episode metrics (SR, SPL, PR, PPL, normalized path length) and log aggregation."""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeResult:
    """Outcome of one episode.  Lengths are in cells moved; turns cost nothing."""

    n_goals: int
    goals_reached: int
    success: bool
    shortest: float
    path_len: float
    steps: int = 0
    episode_id: str = ""

    def __post_init__(self):
        if self.shortest <= 0:
            raise MetricsError("shortest path length must be positive")
        if self.path_len < 0:
            raise MetricsError("path length must be non-negative")
        if not 0 <= self.goals_reached <= self.n_goals:
            raise MetricsError("goals_reached outside [0, n_goals]")
        if self.success != (self.goals_reached == self.n_goals):
            raise MetricsError("success must coincide with progress == 1")

    @property
    def progress(self) -> float:
        return self.goals_reached / self.n_goals

    @property
    def leg_reached(self) -> list[bool]:
        return [k < self.goals_reached for k in range(self.n_goals)]

    @property
    def efficiency(self) -> float:
        return self.shortest / max(self.path_len, self.shortest)

    def to_dict(self) -> dict:
        return {
            "n_goals": self.n_goals,
            "goals_reached": self.goals_reached,
            "success": self.success,
            "progress": self.progress,
            "geodesic_cells": self.shortest,
            "path_len_cells": self.path_len,
            "steps": self.steps,
            "episode_id": self.episode_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeResult":
        return cls(
            n_goals=int(d["n_goals"]),
            goals_reached=int(d["goals_reached"]),
            success=bool(d["success"]),
            shortest=float(d["geodesic_cells"]),
            path_len=float(d["path_len_cells"]),
            steps=int(d.get("steps", 0)),
            episode_id=str(d.get("episode_id", "")),
        )


def _nonempty(results: Sequence[EpisodeResult]) -> Sequence[EpisodeResult]:
    if len(results) == 0:
        raise MetricsError("metric over an empty result set")
    return results


# Sums run over exact rationals so every metric is the correctly rounded value
# of its formula, independent of episode order.


def _progress(r: EpisodeResult) -> Fraction:
    return Fraction(r.goals_reached, r.n_goals)


def _efficiency(r: EpisodeResult) -> Fraction:
    l = Fraction(r.shortest)
    return l / max(Fraction(r.path_len), l)


def _mean(terms: Iterable[Fraction], n: int) -> float:
    return float(sum(terms, Fraction(0)) / n)


def success_rate(results: Sequence[EpisodeResult]) -> float:
    return _mean((Fraction(int(r.success)) for r in _nonempty(results)), len(results))


def progress_rate(results: Sequence[EpisodeResult]) -> float:
    return _mean((_progress(r) for r in _nonempty(results)), len(results))


def spl(results: Sequence[EpisodeResult]) -> float:
    return _mean((int(r.success) * _efficiency(r) for r in _nonempty(results)), len(results))


def ppl(results: Sequence[EpisodeResult]) -> float:
    return _mean((_progress(r) * _efficiency(r) for r in _nonempty(results)), len(results))


def l_norm(result: EpisodeResult) -> Optional[tuple[float, float]]:
    """(l / max(p, l) - 1, max(p, l) / l - 1) for a successful episode, else None.

    The first value is the normalized path length as usually defined (in
    [-1, 0]); the second grows with the number of extra steps.
    """
    if not result.success:
        return None
    eff = _efficiency(result)
    return float(eff - 1), float(1 / eff - 1)


def shortcut_violations(results: Iterable[EpisodeResult]) -> list[EpisodeResult]:
    """Successful episodes whose path is shorter than the geodesic (impossible in a correct run)."""
    return [r for r in results if r.success and r.path_len < r.shortest]


def histogram(values: Sequence[float], bins: int = 20, lo: float = -1.0, hi: float = 0.0) -> list[tuple[float, float, int]]:
    counts, edges = np.histogram(np.asarray(values, dtype=float), bins=bins, range=(lo, hi))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]


# ---------------------------------------------------------------------------
# aggregation over trajectory logs


def read_outcome(path: Path) -> tuple[EpisodeResult, dict]:
    """Final record of a trajectory log: (result, outcome dict)."""
    last = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                last = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MetricsError(f"{path}:{lineno}: corrupt log line ({exc.msg})") from exc
            if not isinstance(last, dict):
                raise MetricsError(f"{path}:{lineno}: log line is not an object")
    if last is None or "outcome" not in last:
        raise MetricsError(f"{path}: missing final outcome record")
    try:
        return EpisodeResult.from_dict(last["outcome"]), last["outcome"]
    except (KeyError, ValueError, TypeError) as exc:
        raise MetricsError(f"{path}: bad outcome record ({exc})") from exc


def summarize(results: Sequence[EpisodeResult]) -> dict:
    return {
        "episodes": len(results),
        "sr": success_rate(results),
        "pr": progress_rate(results),
        "spl": spl(results),
        "ppl": ppl(results),
        "mean_steps": float(np.mean([r.steps for r in results])),
    }


TABLE_FIELDS = ["config", "n_goals", "episodes", "sr", "pr", "spl", "ppl", "mean_steps"]


def aggregate(run_dir: str | Path, bins: int = 20) -> tuple[list[dict], list[tuple[float, float, int]]]:
    """Metrics table per (config, goal count) and the l_norm histogram of successes.

    Logs are ``*.jsonl`` files anywhere under ``run_dir``; the outcome record may
    carry a ``config`` label, otherwise the parent directory name is used.
    """
    run_dir = Path(run_dir)
    files = sorted(run_dir.rglob("*.jsonl"))
    files = [f for f in files if f.name not in ("episodes.jsonl",)]
    if not files:
        raise MetricsError(f"{run_dir}: no trajectory logs")
    groups: dict[tuple[str, int], list[EpisodeResult]] = defaultdict(list)
    lnorms = []
    for f in files:
        res, outcome = read_outcome(f)
        label = str(outcome.get("config", f.parent.name if f.parent != run_dir else "default"))
        groups[(label, res.n_goals)].append(res)
        ln = l_norm(res)
        if ln is not None:
            lnorms.append(ln[0])
    table = []
    for (label, n), results in sorted(groups.items()):
        row = {"config": label, "n_goals": n}
        row.update(summarize(results))
        table.append(row)
    return table, histogram(lnorms, bins)


def write_table(rows: Sequence[dict], path: str | Path, fields: Sequence[str] = TABLE_FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def write_histogram(hist: Sequence[tuple[float, float, int]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "count"])
        for left, right, count in hist:
            w.writerow([f"{left:.4f}", f"{right:.4f}", count])
