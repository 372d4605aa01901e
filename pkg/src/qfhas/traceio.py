"""Trace and summary files.

A run directory holds ``trace.csv`` (or ``trace.jsonl``), ``usage.csv``,
``run.json`` with the run metadata and, optionally, ``summary.json``.
Time-valued columns are written with 6 decimals; every other float uses its
shortest round-trip repr, so metrics recomputed from the files are exact.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from pathlib import Path

from qfhas.errors import QfhasError
from qfhas.metrics import SummaryMetrics
from qfhas.netsim import TRACE_FIELDS, USAGE_FIELDS, RunTrace, TraceRecord, UsageSample

_TIME_FIELDS = {"time", "downloading_time", "reported_time", "buffer_seconds"}
_INT_FIELDS = {"user_id", "level"}
_STR_FIELDS = {"event_kind"}


def _fmt(name, v):
    if v is None:
        return ""
    if name in _TIME_FIELDS:
        return f"{v:.6f}"
    if name in _INT_FIELDS or name in _STR_FIELDS:
        return str(v)
    return repr(float(v))


def _parse(name, text):
    if text == "":
        return None
    if name in _STR_FIELDS:
        return text
    if name in _INT_FIELDS:
        return int(text)
    return float(text)


def _record_dict(r: TraceRecord) -> dict:
    out = {}
    for name in TRACE_FIELDS:
        v = getattr(r, name)
        out[name] = round(v, 6) if (v is not None and name in _TIME_FIELDS) else v
    return out


def write_trace_csv(trace: RunTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for r in trace.records:
            w.writerow([_fmt(n, getattr(r, n)) for n in TRACE_FIELDS])


def write_trace_jsonl(trace: RunTrace, path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in trace.records:
            fh.write(json.dumps(_record_dict(r)) + "\n")


def write_usage_csv(trace: RunTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(USAGE_FIELDS)
        for s in trace.usage:
            w.writerow([f"{s.time:.6f}"] + [repr(float(getattr(s, n))) for n in USAGE_FIELDS[1:]])


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def dump_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n")


def summary_to_dict(summary: SummaryMetrics) -> dict:
    return dataclasses.asdict(summary)


def write_run(trace: RunTrace, out_dir: str | Path, trace_format: str = "csv",
              summary: SummaryMetrics | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if trace_format == "csv":
        write_trace_csv(trace, out / "trace.csv")
    elif trace_format == "jsonl":
        write_trace_jsonl(trace, out / "trace.jsonl")
    else:
        raise ValueError(f"unknown trace format {trace_format!r}")
    write_usage_csv(trace, out / "usage.csv")
    dump_json(trace.meta, out / "run.json")
    if summary is not None:
        dump_json(summary_to_dict(summary), out / "summary.json")
    return out


def _read_records_csv(path):
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows)
        if tuple(header) != TRACE_FIELDS:
            raise QfhasError(f"{path}: unexpected trace header {header}")
        return [TraceRecord(**{n: _parse(n, v) for n, v in zip(header, row)}) for row in rows]


def _read_records_jsonl(path):
    with open(path) as fh:
        return [TraceRecord(**json.loads(line)) for line in fh if line.strip()]


def read_trace(run_dir: str | Path) -> RunTrace:
    """Load a run directory written by :func:`write_run`."""
    d = Path(run_dir)
    if (d / "trace.csv").exists():
        records = _read_records_csv(d / "trace.csv")
    elif (d / "trace.jsonl").exists():
        records = _read_records_jsonl(d / "trace.jsonl")
    else:
        raise QfhasError(f"{d}: no trace.csv or trace.jsonl")
    with open(d / "usage.csv", newline="") as fh:
        rows = csv.reader(fh)
        next(rows)
        usage = [UsageSample(*(float(v) for v in row)) for row in rows]
    meta = json.loads((d / "run.json").read_text())
    return RunTrace(records, usage, meta)
