"""Latency-budget configuration selection over a sweep table.

Purely table-driven: among rows fitting inside the budget, pick the one
with the best accuracy metric; break ties toward lower latency, then fewer
parameters (or the lexicographically smaller variant name when parameter
counts are missing). The budget crossover between model variants is a
property of the measured data, not a constant baked in here.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InfeasibleBudgetError
from .profiler import SweepRow, SweepTable

METRIC_MAP50 = "mAP50"
METRIC_MAP50_95 = "mAP50_95"


@dataclass(frozen=True)
class Budget:
    limit_ms: float
    metric: str = METRIC_MAP50_95

    def __post_init__(self):
        if self.limit_ms <= 0:
            raise ValueError("budget limit must be > 0")
        if self.metric not in (METRIC_MAP50, METRIC_MAP50_95):
            raise ValueError(f"unknown metric {self.metric!r}")


def _metric_value(row: SweepRow, metric: str) -> float:
    value = row.map50 if metric == METRIC_MAP50 else row.map50_95
    if value is None:
        raise ValueError(
            f"row ({row.variant_name}, {row.input_size}) has no {metric} value"
        )
    return value


def select_config(table: SweepTable, budget: Budget) -> SweepRow:
    """Best-accuracy row within the latency budget."""
    if not table.rows:
        raise ValueError("sweep table is empty")
    feasible = [r for r in table.rows if r.mean_total_ms <= budget.limit_ms]
    if not feasible:
        fastest = min(table.rows, key=lambda r: r.mean_total_ms)
        raise InfeasibleBudgetError(
            f"no configuration fits {budget.limit_ms} ms; fastest available is "
            f"{fastest.variant_name} @ {fastest.input_size} at {fastest.mean_total_ms:.2f} ms",
            fastest_row=fastest,
        )

    def key(row: SweepRow):
        params = row.parameter_count
        return (
            -_metric_value(row, budget.metric),
            row.mean_total_ms,
            params if params is not None else float("inf"),
            row.variant_name,
        )

    return min(feasible, key=key)


def pareto_frontier(table: SweepTable, metric: str = METRIC_MAP50_95) -> list[SweepRow]:
    """Rows not dominated in (latency, metric), latency ascending.

    A row is dominated when another row is at least as fast and at least as
    accurate, strictly better in one. Exact duplicates keep their first
    occurrence only.
    """
    rows = list(table.rows)
    kept: list[SweepRow] = []
    seen: set[tuple[float, float]] = set()
    for i, row in enumerate(rows):
        m = _metric_value(row, metric)
        dominated = False
        for j, other in enumerate(rows):
            if i == j:
                continue
            om = _metric_value(other, metric)
            if other.mean_total_ms <= row.mean_total_ms and om >= m and (
                other.mean_total_ms < row.mean_total_ms or om > m
            ):
                dominated = True
                break
        if dominated:
            continue
        sig = (row.mean_total_ms, m)
        if sig in seen:
            continue
        seen.add(sig)
        kept.append(row)
    return sorted(kept, key=lambda r: r.mean_total_ms)
