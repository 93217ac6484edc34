"""Structured report files and line-oriented tables.

All report files are canonical JSON: sorted keys, fixed separators,
trailing newline. That makes reports byte-reproducible whenever their
content is (seeded runs on the mock backend) and diff-friendly always.
Times are milliseconds with at least two decimals in the table renderers.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .profiler import LatencyReport, ScalingFit, SweepRow, SweepTable

LATENCY_SCHEMA = "sightline.latency_report/1"
SWEEP_SCHEMA = "sightline.sweep_table/1"
EVAL_SCHEMA = "sightline.eval_result/1"
TILE_SCHEMA = "sightline.tile_bench/1"
SELECT_SCHEMA = "sightline.selection/1"


def canonical_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(", ", ": "), allow_nan=False) + "\n"


def write_report(payload: dict, path: str | Path) -> None:
    Path(path).write_text(canonical_json(payload))


def latency_report_payload(report: LatencyReport, resolved_config: dict) -> dict:
    payload = {
        "schema": LATENCY_SCHEMA,
        "version": __version__,
        "config": asdict(report.config),
        "protocol": {
            "warmup_iterations": report.warmup_iterations,
            "repetitions": report.repetitions,
        },
        "environment": report.environment,
        "stages": [asdict(s) for s in report.stages],
        "resolved_config": resolved_config,
    }
    if report.raw_samples_ms is not None:
        payload["raw_samples_ms"] = {k: list(v) for k, v in report.raw_samples_ms.items()}
    return payload


def sweep_table_payload(table: SweepTable, resolved_config: dict) -> dict:
    return {
        "schema": SWEEP_SCHEMA,
        "version": __version__,
        "rows": [asdict(r) for r in table.rows],
        "failures": [asdict(f) for f in table.failures],
        "resolved_config": resolved_config,
    }


def sweep_table_from_payload(payload: dict) -> SweepTable:
    rows = tuple(SweepRow(**row) for row in payload.get("rows", []))
    from .profiler import SweepFailure

    failures = tuple(SweepFailure(**f) for f in payload.get("failures", []))
    return SweepTable(rows=rows, failures=failures)


def load_sweep_table(path: str | Path) -> SweepTable:
    payload = json.loads(Path(path).read_text())
    return sweep_table_from_payload(payload)


def scaling_fit_payload(fit: ScalingFit) -> dict:
    return {
        "slope_ms_per_pixel": fit.slope_ms_per_pixel,
        "intercept_ms": fit.intercept_ms,
        "r_squared": fit.r_squared,
    }


def render_latency_table(stages: list[dict]) -> str:
    """Line-oriented stage table; stages are dicts with stage/mean/std/samples."""
    lines = [f"{'stage':<12} {'mean [ms]':>12} {'std [ms]':>12} {'samples':>8}"]
    for s in stages:
        lines.append(
            f"{s['stage']:<12} {s['mean_ms']:>12.2f} {s['std_ms']:>12.2f} {s['samples']:>8d}"
        )
    return "\n".join(lines)


def render_sweep_rows(rows: list[dict], failures: list[dict] = ()) -> str:
    lines = [
        f"{'variant':<16} {'size':>6} {'mean [ms]':>12} {'std [ms]':>12} "
        f"{'mAP50':>8} {'mAP50-95':>9}"
    ]
    for r in rows:
        m50 = f"{r['map50']:.4f}" if r.get("map50") is not None else "-"
        m5095 = f"{r['map50_95']:.4f}" if r.get("map50_95") is not None else "-"
        lines.append(
            f"{r['variant_name']:<16} {r['input_size']:>6d} {r['mean_total_ms']:>12.2f} "
            f"{r['std_ms']:>12.2f} {m50:>8} {m5095:>9}"
        )
    for f in failures:
        lines.append(f"{f['variant_name']:<16} {f['input_size']:>6d}  -- {f['reason']}")
    return "\n".join(lines)
