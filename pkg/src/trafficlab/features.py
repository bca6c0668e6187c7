"""Raw sensor table to learning table.

Three transforms: (1) re-identify vehicles across contiguous sensor pairs to
get travel times, (2) trailing-window means of every per-sensor per-second
series and of per-pair travel times, recomputed every stride, (3) incident
labels from ground truth.  Missing values (a pair with no traversal in the
window) stay missing; the tree learner routes them natively.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .roadnet import RoadNetwork
from .sensors import RawDataset


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class TravelTimeRecord:
    pair: tuple
    vehicle_id: int
    depart: int
    arrive: int

    @property
    def travel_time(self) -> int:
        return self.arrive - self.depart

    def __post_init__(self):
        if self.arrive <= self.depart:
            raise FeatureError("arrival must come after departure")


@dataclass
class WindowConfig:
    window: int = 600
    stride: int = 30
    label_mode: str = "stride"  # "stride" or "window" overlap labeling

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise FeatureError("window and stride must be positive")
        if self.stride > self.window:
            raise FeatureError("stride must not exceed the window")
        if self.label_mode not in ("stride", "window"):
            raise FeatureError(f"unknown label mode {self.label_mode!r}")


def reidentify_travel_times(raw: RawDataset, pairs,
                            staleness: int = 1800) -> list:
    """One TravelTimeRecord per (vehicle, pair) traversal.

    Routes are loop-free, so a vehicle crosses a pair at most once: arrival
    is its first second inside b's range, departure the last second inside
    a's range before that.  Matches older than the staleness horizon are
    dropped as implausible re-identifications.
    """
    sightings: dict = {}
    for i in range(raw.n_rows):
        t = int(raw.time[i])
        s = int(raw.sensor_idx[i])
        for v in raw.vehicle_ids[i]:
            sightings.setdefault(int(v), {}).setdefault(s, []).append(t)

    sensor_pos = {sid: k for k, sid in enumerate(raw.sensor_ids)}
    records = []
    for a, b in pairs:
        ia, ib = sensor_pos.get(a), sensor_pos.get(b)
        if ia is None or ib is None:
            raise FeatureError(f"pair ({a}, {b}) not covered by this dataset")
        for v in sorted(sightings):
            obs = sightings[v]
            if ia not in obs or ib not in obs:
                continue
            arrive = obs[ib][0]
            before = [t for t in obs[ia] if t < arrive]
            if not before:
                continue
            depart = before[-1]
            if arrive - depart > staleness:
                continue
            records.append(TravelTimeRecord((a, b), v, depart, arrive))
    records.sort(key=lambda r: (r.pair, r.arrive, r.vehicle_id))
    return records


@dataclass
class FeatureTable:
    """Feature matrix plus labels; X uses NaN as the missing marker and is
    column-aligned with feature_names (window_end_s is an index, never a
    model input)."""
    feature_names: list
    X: np.ndarray
    window_end: np.ndarray
    label_incident: np.ndarray
    label_road: list
    label_severity: list

    def __post_init__(self):
        n = len(self.window_end)
        if not (self.X.shape == (n, len(self.feature_names))
                and len(self.label_incident) == n
                and len(self.label_road) == n
                and len(self.label_severity) == n):
            raise FeatureError("feature table shape mismatch")

    @property
    def columns(self) -> list:
        return (["window_end_s"] + list(self.feature_names)
                + ["label_incident", "label_road", "label_severity"])

    @property
    def n_rows(self) -> int:
        return len(self.window_end)


def _window_means_exact(series_2d: np.ndarray, window: int,
                        starts: np.ndarray) -> np.ndarray:
    """Trailing-window means, each bitwise equal to np.mean of the slice.

    series_2d is (n_series, horizon) C-contiguous, so every window is a
    contiguous slice and the strided view reduces it with the same pairwise
    summation np.mean uses on the slice directly.
    """
    view = np.lib.stride_tricks.sliding_window_view(series_2d, window,
                                                    axis=1)
    return view[:, starts, :].mean(axis=-1)


def incident_label_at(incident_log, network: RoadNetwork, we: int,
                      span: int):
    """(active, road_label, severity) for the interval (we - span, we];
    among overlapping incidents the earliest onset wins."""
    best = None
    for spec in incident_log:
        if spec.onset < we and spec.end > we - span:
            if best is None or (spec.onset, spec.id) < (best.onset, best.id):
                best = spec
    if best is None:
        return False, None, None
    road = network.segments[best.segment_id].road_label
    return True, road, best.severity.value


def build_feature_rows(raw: RawDataset, records, cfg: WindowConfig,
                       incident_log, network: RoadNetwork,
                       pairs=None) -> FeatureTable:
    """Assemble the labeled rolling-window table.

    Rows sit at window_end = window, window + stride, ... <= horizon; the
    window covers seconds [window_end - window, window_end).  Travel-time
    features average the records whose arrival falls in the window.  The
    label interval is the last stride (default) or the whole window,
    depending on cfg.label_mode.
    """
    if raw.horizon < cfg.window:
        raise FeatureError("horizon shorter than one window")
    if pairs is None:
        pairs = sorted({r.pair for r in records})
    ends = np.arange(cfg.window, raw.horizon + 1, cfg.stride, dtype=np.int64)
    starts = ends - cfg.window
    n = len(ends)

    names: list = []
    blocks: list = []
    for fieldname, tag in (("count", "cnt_mean"), ("mean_speed", "spd_mean"),
                           ("occupancy", "occ_mean")):
        mat = np.ascontiguousarray(raw.sensor_matrix(fieldname).T
                                   .astype(np.float64))
        means = _window_means_exact(mat, cfg.window, starts)
        for k, sid in enumerate(raw.sensor_ids):
            names.append(f"{tag}_{sid}")
            blocks.append(means[k])

    by_pair: dict = {p: [] for p in pairs}
    for r in records:
        if r.pair in by_pair:
            by_pair[r.pair].append(r)
    for a, b in pairs:
        recs = sorted(by_pair[(a, b)], key=lambda r: (r.arrive, r.vehicle_id))
        arr = np.asarray([r.arrive for r in recs], dtype=np.int64)
        tts = np.asarray([float(r.travel_time) for r in recs])
        col = np.full(n, np.nan)
        lo = np.searchsorted(arr, starts, side="left")
        hi = np.searchsorted(arr, ends, side="left")
        for i in range(n):
            if hi[i] > lo[i]:
                col[i] = np.mean(tts[lo[i]:hi[i]])
        names.append(f"tt_{a}__{b}")
        blocks.append(col)

    tod = (ends % 86400) / 86400.0
    feature_names = ["time_of_day"] + names
    X = np.column_stack([tod] + blocks)

    span = cfg.stride if cfg.label_mode == "stride" else cfg.window
    lab_inc = np.zeros(n, dtype=bool)
    lab_road: list = [None] * n
    lab_sev: list = [None] * n
    for i, we in enumerate(ends):
        active, road, sev = incident_label_at(incident_log, network,
                                              int(we), span)
        lab_inc[i] = active
        lab_road[i] = road
        lab_sev[i] = sev
    return FeatureTable(feature_names, X, ends, lab_inc, lab_road, lab_sev)


def write_feature_table(table: FeatureTable, path,
                        schema_path=None) -> None:
    """CSV with an empty field as the missing marker, plus a sidecar schema
    file listing the column order (defaults to <path>.schema)."""
    if schema_path is None:
        schema_path = str(path) + ".schema"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(table.columns) + "\n")
        for i in range(table.n_rows):
            vals = [str(int(table.window_end[i]))]
            for j in range(len(table.feature_names)):
                x = table.X[i, j]
                vals.append("" if math.isnan(x) else repr(float(x)))
            vals.append("1" if table.label_incident[i] else "0")
            vals.append(table.label_road[i] or "")
            vals.append(table.label_severity[i] or "")
            fh.write(",".join(vals) + "\n")
    with open(schema_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(table.columns) + "\n")


def read_feature_table(path) -> FeatureTable:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        cols = header.split(",")
        if (cols[:1] != ["window_end_s"]
                or cols[-3:] != ["label_incident", "label_road",
                                 "label_severity"]):
            raise FeatureError(f"{path}: unexpected feature header")
        feature_names = cols[1:-3]
        we: list = []
        rows: list = []
        lab_i: list = []
        lab_r: list = []
        lab_s: list = []
        for lineno, raw in enumerate(fh, start=2):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(cols):
                raise FeatureError(f"{path}:{lineno}: field count mismatch")
            we.append(int(parts[0]))
            rows.append([float(p) if p else np.nan
                         for p in parts[1:-3]])
            lab_i.append(parts[-3] == "1")
            lab_r.append(parts[-2] or None)
            lab_s.append(parts[-1] or None)
    X = (np.asarray(rows, dtype=np.float64) if rows
         else np.empty((0, len(feature_names))))
    return FeatureTable(feature_names, X,
                        np.asarray(we, dtype=np.int64),
                        np.asarray(lab_i, dtype=bool), lab_r, lab_s)


def concat_tables(tables) -> FeatureTable:
    """Stack same-schema tables (multi-day training sets)."""
    tables = list(tables)
    if not tables:
        raise FeatureError("nothing to concatenate")
    names = tables[0].feature_names
    for t in tables[1:]:
        if t.feature_names != names:
            raise FeatureError("feature schemas differ across tables")
    return FeatureTable(
        names, np.vstack([t.X for t in tables]),
        np.concatenate([t.window_end for t in tables]),
        np.concatenate([t.label_incident for t in tables]),
        sum((t.label_road for t in tables), []),
        sum((t.label_severity for t in tables), []))
