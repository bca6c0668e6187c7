"""Roadside sensor emulation and the raw per-second table.

A sensor at a node observes every vehicle whose along-road distance to the
node is at most the capture range, on any segment incident to that node
(approaching vehicles by distance-to-go, departing ones by distance-from).
Each (sensor, second) yields exactly one reading, zero-count seconds
included.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .roadnet import RoadNetwork, SensorPlacement, validate_placement


class SensorError(ValueError):
    pass


@dataclass(frozen=True)
class SensorReading:
    sensor_id: str
    time: int
    vehicle_ids: tuple
    count: int
    mean_speed: float
    occupancy: float


class SensorRig:
    """Observation geometry precomputed once per (network, placement)."""

    def __init__(self, network: RoadNetwork, placement: SensorPlacement):
        validate_placement(network, placement)
        self.network = network
        self.placement = placement
        self.sensor_ids = placement.sensor_ids
        self.range_m = placement.range_m
        # per sensor: [(segment_id, approaching?)] and total monitored length
        self.watch: dict = {}
        self.monitored: dict = {}
        for sid in self.sensor_ids:
            segs = []
            total = 0.0
            for seg_id in network.incoming(sid):
                seg = network.segments[seg_id]
                segs.append((seg_id, True))
                total += min(self.range_m, seg.length) * seg.lanes
            for seg_id in network.outgoing(sid):
                seg = network.segments[seg_id]
                segs.append((seg_id, False))
                total += min(self.range_m, seg.length) * seg.lanes
            if total <= 0:
                raise SensorError(f"sensor {sid!r} monitors no road length")
            self.watch[sid] = segs
            self.monitored[sid] = total

    def observe(self, state, t: int) -> list:
        """One SensorReading per sensor for the state's current second."""
        readings = []
        vlen = state.cfg.vehicle_length
        for sid in self.sensor_ids:
            seen: list = []
            for seg_id, approaching in self.watch[sid]:
                seg_len = self.network.segments[seg_id].length
                for slot in state.slots_on_segment(seg_id):
                    pos = state.pos[slot]
                    dist = seg_len - pos if approaching else pos
                    if dist <= self.range_m:
                        seen.append(slot)
            seen.sort()
            count = len(seen)
            mean_speed = (float(np.mean(state.speed[seen])) if seen else 0.0)
            occupancy = count * vlen / self.monitored[sid]
            readings.append(SensorReading(sid, int(t), tuple(seen), count,
                                          mean_speed, occupancy))
        return readings


def capture(state, placement: SensorPlacement, network: RoadNetwork,
            t: int) -> list:
    """Single-shot capture; long runs should hold one SensorRig instead."""
    return SensorRig(network, placement).observe(state, t)


@dataclass
class RawDataset:
    """Columnar per-second sensor table, rows ordered by (time, sensor_id)."""
    horizon: int
    sensor_ids: tuple
    range_m: float | None
    time: np.ndarray
    sensor_idx: np.ndarray
    count: np.ndarray
    mean_speed: np.ndarray
    occupancy: np.ndarray
    vehicle_ids: list

    def __post_init__(self):
        n = len(self.time)
        if n != self.horizon * len(self.sensor_ids):
            raise SensorError(
                f"raw table has {n} rows, expected horizon*sensors = "
                f"{self.horizon * len(self.sensor_ids)}")

    @property
    def n_rows(self) -> int:
        return len(self.time)

    def iter_readings(self):
        for i in range(self.n_rows):
            yield SensorReading(self.sensor_ids[self.sensor_idx[i]],
                                int(self.time[i]), self.vehicle_ids[i],
                                int(self.count[i]), float(self.mean_speed[i]),
                                float(self.occupancy[i]))

    def sensor_matrix(self, field: str) -> np.ndarray:
        """Dense (horizon, n_sensors) view of one numeric column; relies on
        the one-reading-per-(sensor, second) invariant and row ordering."""
        col = getattr(self, field)
        return col.reshape(self.horizon, len(self.sensor_ids))

    def data_equal(self, other: "RawDataset") -> bool:
        return (self.sensor_ids == other.sensor_ids
                and self.horizon == other.horizon
                and np.array_equal(self.time, other.time)
                and np.array_equal(self.sensor_idx, other.sensor_idx)
                and np.array_equal(self.count, other.count)
                and np.array_equal(self.mean_speed, other.mean_speed)
                and np.array_equal(self.occupancy, other.occupancy)
                and self.vehicle_ids == other.vehicle_ids)


class RawDatasetBuilder:
    def __init__(self, sensor_ids: tuple, range_m: float):
        self.sensor_ids = tuple(sensor_ids)
        self.index = {s: i for i, s in enumerate(self.sensor_ids)}
        self.range_m = range_m
        self.time: list = []
        self.sensor_idx: list = []
        self.count: list = []
        self.mean_speed: list = []
        self.occupancy: list = []
        self.vehicle_ids: list = []

    def add_step(self, readings) -> None:
        for r in readings:
            self.time.append(r.time)
            self.sensor_idx.append(self.index[r.sensor_id])
            self.count.append(r.count)
            self.mean_speed.append(r.mean_speed)
            self.occupancy.append(r.occupancy)
            self.vehicle_ids.append(r.vehicle_ids)

    def build(self, horizon: int) -> RawDataset:
        return RawDataset(horizon, self.sensor_ids, self.range_m,
                          np.asarray(self.time, dtype=np.int64),
                          np.asarray(self.sensor_idx, dtype=np.int32),
                          np.asarray(self.count, dtype=np.int32),
                          np.asarray(self.mean_speed, dtype=np.float64),
                          np.asarray(self.occupancy, dtype=np.float64),
                          self.vehicle_ids)


RAW_HEADER = "time_s,sensor_id,count,mean_speed_mps,occupancy,vehicle_ids"


def emit_raw(dataset: RawDataset, incident_log, raw_path,
             incidents_path=None) -> None:
    """Write the raw table (and, when a path is given, the incident log)."""
    from .incidents import write_incident_log

    with open(raw_path, "w", encoding="utf-8") as fh:
        fh.write(RAW_HEADER + "\n")
        for i in range(dataset.n_rows):
            vids = ";".join(str(v) for v in dataset.vehicle_ids[i])
            fh.write(f"{dataset.time[i]},"
                     f"{dataset.sensor_ids[dataset.sensor_idx[i]]},"
                     f"{dataset.count[i]},{float(dataset.mean_speed[i])!r},"
                     f"{float(dataset.occupancy[i])!r},{vids}\n")
    if incidents_path is not None:
        write_incident_log(incident_log, incidents_path)


def load_raw(path) -> RawDataset:
    """Load a raw table; capture range is not stored in the file and comes
    back as None."""
    times: list = []
    sensors: list = []
    counts: list = []
    speeds: list = []
    occs: list = []
    vids: list = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != RAW_HEADER:
            raise SensorError(f"{path}: unexpected raw header {header!r}")
        for lineno, raw in enumerate(fh, start=2):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise SensorError(f"{path}:{lineno}: expected 6 fields")
            times.append(int(parts[0]))
            sensors.append(parts[1])
            counts.append(int(parts[2]))
            speeds.append(float(parts[3]))
            occs.append(float(parts[4]))
            vids.append(tuple(int(v) for v in parts[5].split(";") if v))
    sensor_ids = tuple(sorted(set(sensors)))
    index = {s: i for i, s in enumerate(sensor_ids)}
    horizon = (max(times) + 1) if times else 0
    return RawDataset(horizon, sensor_ids, None,
                      np.asarray(times, dtype=np.int64),
                      np.asarray([index[s] for s in sensors], dtype=np.int32),
                      np.asarray(counts, dtype=np.int32),
                      np.asarray(speeds, dtype=np.float64),
                      np.asarray(occs, dtype=np.float64), vids)


def subset_sensors(dataset: RawDataset, sensor_ids) -> RawDataset:
    """Restrict a raw table to a sensor subset, as if only those sensors
    had been deployed.  Capture is passive, so dropping columns after the
    fact equals never recording them."""
    keep = tuple(sorted(sensor_ids))
    missing = set(keep) - set(dataset.sensor_ids)
    if missing:
        raise SensorError(f"unknown sensors: {', '.join(sorted(missing))}")
    keep_old = np.asarray([dataset.sensor_ids.index(s) for s in keep],
                          dtype=np.int32)
    mask = np.isin(dataset.sensor_idx, keep_old)
    remap = {int(old): new for new, old in enumerate(keep_old)}
    new_idx = np.asarray([remap[int(i)] for i in dataset.sensor_idx[mask]],
                         dtype=np.int32)
    rows = np.nonzero(mask)[0]
    return RawDataset(dataset.horizon, keep, dataset.range_m,
                      dataset.time[mask], new_idx,
                      dataset.count[mask], dataset.mean_speed[mask],
                      dataset.occupancy[mask],
                      [dataset.vehicle_ids[i] for i in rows])
