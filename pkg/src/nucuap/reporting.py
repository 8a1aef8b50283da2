"""CSV serialization of traces, attack reports, rank tables and detections.

Floats are written with ``repr`` so files round-trip exactly and identical
runs give byte-identical output.
"""

from __future__ import annotations

import csv
from pathlib import Path

from nucuap.errors import FrameIOError, MetricError
from nucuap.metrics import AttackReport, FrameRecord
from nucuap.solvers import TraceRow

REPORT_FIELDS = (
    "row", "method", "instance", "config_hash", "frame", "iou_t", "n_clean", "n_adv",
    "iou_acc", "adv_br", "map", "nuclear_norm", "nuclear_norm_per_channel", "frobenius_norm",
)

# (column, lower is better) for cross-method ranking
RANK_METRICS = (("iou_acc", True), ("adv_br", True), ("nuclear_norm", True))


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _read(path):
    try:
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
            return rows, tuple(rows[0].keys()) if rows else ()
    except OSError as exc:
        raise FrameIOError(f"cannot read {path}: {exc}") from exc


def write_trace_csv(path, trace) -> None:
    _write(path, TraceRow.FIELDS, ([getattr(r, f) for f in TraceRow.FIELDS] for r in trace))


def read_trace_csv(path) -> list[TraceRow]:
    rows, _ = _read(path)
    return [
        TraceRow(int(r["iteration"]), *(float(r[f]) for f in TraceRow.FIELDS[1:]))
        for r in rows
    ]


def write_report_csv(path, report: AttackReport) -> None:
    """One ``aggregate`` row followed by one ``frame`` row per frame."""
    per_channel = ";".join(repr(float(v)) for v in report.nuclear_norms)
    rows = [[
        "aggregate", report.method, report.instance, report.config_hash, "", "",
        sum(f.n_clean for f in report.frames), sum(f.n_adv for f in report.frames),
        report.iou_acc, report.adv_br, report.map, report.nuclear_norm, per_channel,
        report.frobenius_norm,
    ]]
    for f in report.frames:
        rows.append([
            "frame", report.method, report.instance, report.config_hash, f.frame, f.iou_t,
            f.n_clean, f.n_adv, "", "", "", "", "", "",
        ])
    _write(path, REPORT_FIELDS, rows)


def read_report_csv(path) -> AttackReport:
    rows, header = _read(path)
    if header != REPORT_FIELDS:
        raise MetricError(f"{path}: report columns {list(header)} do not match {list(REPORT_FIELDS)}")
    agg = [r for r in rows if r["row"] == "aggregate"]
    if len(agg) != 1:
        raise MetricError(f"{path}: expected one aggregate row, found {len(agg)}")
    a = agg[0]
    try:
        frames = [
            FrameRecord(int(r["frame"]), float(r["iou_t"]), int(r["n_clean"]), int(r["n_adv"]))
            for r in rows if r["row"] == "frame"
        ]
        nuclear = [float(v) for v in a["nuclear_norm_per_channel"].split(";") if v]
        return AttackReport(
            iou_acc=float(a["iou_acc"]), adv_br=float(a["adv_br"]), map=float(a["map"]),
            nuclear_norms=nuclear, frobenius_norm=float(a["frobenius_norm"]), frames=frames,
            method=a["method"], instance=a["instance"], config_hash=a["config_hash"],
        )
    except ValueError as exc:
        raise MetricError(f"{path}: malformed report value: {exc}") from exc


def report_metric(report: AttackReport, name: str) -> float:
    return float(getattr(report, name))


def write_rank_csv(path, labels, metric_ranks, average, values) -> None:
    """``metric_ranks[m][i]`` and ``values[m][i]`` for metric m and method i."""
    names = [m for m, _ in RANK_METRICS]
    header = ["method", *names, *(f"rank_{m}" for m in names), "average_rank"]
    rows = []
    for i, label in enumerate(labels):
        rows.append([
            label,
            *(float(values[m][i]) for m in range(len(names))),
            *(float(metric_ranks[m][i]) for m in range(len(names))),
            float(average[i]),
        ])
    _write(path, header, rows)


def write_detections_csv(path, per_frame) -> None:
    """``per_frame[b]`` is the detection list of frame b."""
    rows = []
    for b, dets in enumerate(per_frame):
        for k, d in enumerate(dets):
            rows.append([b, k, *map(int, d.box), float(d.score), d.area, d.label])
    _write(path, ("frame", "index", "x0", "y0", "x1", "y1", "score", "area", "label"), rows)
