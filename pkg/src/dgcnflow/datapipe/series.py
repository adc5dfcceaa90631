"""Hourly detector series and their CSV form.

CSV columns: ``timestamp`` (ISO 8601, hourly), ``node_id`` (1..N),
``flow`` (vehicles/hour, blank if missing), ``speed`` (mph, blank if
missing), ``missing_flag`` (1 when flow or speed is missing).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

CSV_HEADER = ["timestamp", "node_id", "flow", "speed", "missing_flag"]


class SeriesError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorSeries:
    flow: np.ndarray  # [T, N], NaN where missing
    speed: np.ndarray  # [T, N], NaN where missing
    lanes: np.ndarray  # [N]
    node_ids: np.ndarray  # [N]
    start: datetime

    def __post_init__(self):
        if self.flow.shape != self.speed.shape or self.flow.ndim != 2:
            raise SeriesError(f"flow {self.flow.shape} and speed {self.speed.shape} must be equal [T, N]")
        if self.flow.shape[1] != len(self.lanes) or len(self.lanes) != len(self.node_ids):
            raise SeriesError("lanes and node ids must have one entry per detector")
        f = self.flow[np.isfinite(self.flow)]
        s = self.speed[np.isfinite(self.speed)]
        if np.any(f < 0):
            raise SeriesError("negative flow")
        if np.any(s <= 0):
            raise SeriesError("nonpositive speed")

    @property
    def hours(self) -> int:
        return self.flow.shape[0]

    @property
    def n(self) -> int:
        return self.flow.shape[1]

    @property
    def missing(self) -> np.ndarray:
        return ~(np.isfinite(self.flow) & np.isfinite(self.speed))

    def hour_of_day(self) -> np.ndarray:
        return (self.start.hour + np.arange(self.hours)) % 24

    def timestamps(self) -> list[datetime]:
        return [self.start + timedelta(hours=k) for k in range(self.hours)]

    def select(self, columns) -> "DetectorSeries":
        columns = np.asarray(columns, dtype=int)
        return replace(
            self,
            flow=self.flow[:, columns],
            speed=self.speed[:, columns],
            lanes=self.lanes[columns],
            node_ids=self.node_ids[columns],
        )

    def with_values(self, flow=None, speed=None) -> "DetectorSeries":
        return replace(
            self,
            flow=self.flow if flow is None else flow,
            speed=self.speed if speed is None else speed,
        )


def concat_series(first: DetectorSeries, second: DetectorSeries) -> DetectorSeries:
    if first.start + timedelta(hours=first.hours) != second.start:
        raise SeriesError("series are not contiguous")
    if not np.array_equal(first.node_ids, second.node_ids):
        raise SeriesError("series cover different detectors")
    return replace(
        first,
        flow=np.vstack([first.flow, second.flow]),
        speed=np.vstack([first.speed, second.speed]),
    )


def split_series(series: DetectorSeries, at: int) -> tuple[DetectorSeries, DetectorSeries]:
    head = replace(series, flow=series.flow[:at], speed=series.speed[:at])
    tail = replace(
        series,
        flow=series.flow[at:],
        speed=series.speed[at:],
        start=series.start + timedelta(hours=at),
    )
    return head, tail


def _fmt(v: float) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


def write_csv(series: DetectorSeries, path: str | Path) -> None:
    missing = series.missing
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for t, ts in enumerate(series.timestamps()):
            stamp = ts.isoformat()
            for k, node in enumerate(series.node_ids):
                w.writerow(
                    [
                        stamp,
                        int(node),
                        _fmt(series.flow[t, k]),
                        _fmt(series.speed[t, k]),
                        int(missing[t, k]),
                    ]
                )


def read_csv(path: str | Path, lanes: np.ndarray) -> DetectorSeries:
    """Load a long-format detector CSV; ``lanes`` is indexed by node id - 1."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise SeriesError(f"{path}: expected header {CSV_HEADER}, got {header}")
        rows = list(reader)
    if not rows:
        raise SeriesError(f"{path}: no data rows")
    stamps = sorted({r[0] for r in rows})
    nodes = sorted({int(r[1]) for r in rows})
    t_index = {s: k for k, s in enumerate(stamps)}
    n_index = {n: k for k, n in enumerate(nodes)}
    starts = [datetime.fromisoformat(s) for s in stamps]
    for a, b in zip(starts, starts[1:]):
        if b - a != timedelta(hours=1):
            raise SeriesError(f"{path}: timestamps not hourly-contiguous at {a.isoformat()}")
    flow = np.full((len(stamps), len(nodes)), np.nan)
    speed = np.full_like(flow, np.nan)
    for r in rows:
        t, k = t_index[r[0]], n_index[int(r[1])]
        if r[2] != "":
            flow[t, k] = float(r[2])
        if r[3] != "":
            speed[t, k] = float(r[3])
    lanes = np.asarray(lanes, dtype=float)
    return DetectorSeries(
        flow, speed, lanes[np.array(nodes) - 1], np.array(nodes), starts[0]
    )
