"""Seeded synthetic corridor network with regular and hurricane-evacuation traffic.

The regular phase follows a two-peak diurnal profile with weekend damping,
corridor-level day-to-day variation and random incidents.  Speeds follow a
quadratic speed-flow curve, so congestion and incidents change hourly travel
times.  The evacuation phase continues the same clock: diurnal peaking is
flattened and a surge proportional to the lagged ordered population is added,
concentrated near the ordering zones, in daytime and as landfall approaches.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from ..graphdyn import Detector, DetectorNetwork
from .cleaning import CAPACITY_PER_LANE
from .features import EVACUATION_LAG_HOURS, EvacuationZone, period_index, zone_distances
from .series import DetectorSeries

MILES_PER_DEG_LAT = 69.0


class ScenarioConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    seed: int = 7
    n_nodes: int = 40
    n_corridors: int = 3
    spacing_miles: tuple[float, float] = (0.3, 4.0)
    lanes: tuple[int, int] = (3, 5)
    free_flow_mph: tuple[float, float] = (60.0, 70.0)
    base_flow_per_lane: tuple[float, float] = (300.0, 600.0)
    regular_hours: int = 2148
    evacuation_hours: int = 120
    start: str = "2017-05-01T00:00:00"
    night_level: float = 0.25
    am_peak_hour: float = 8.0
    pm_peak_hour: float = 17.0
    am_amplitude: float = 0.9
    pm_amplitude: float = 1.0
    weekend_factor: float = 0.8
    day_factor_sd: float = 0.05
    noise_sd: float = 0.04
    speed_noise_mph: float = 1.0
    incident_rate: float = 0.004
    incident_hours: tuple[int, int] = (3, 8)
    incident_speed_factor: float = 0.35
    incident_flow_factor: float = 0.6
    zones: list[dict] | None = None
    landfall_hour: float = 100.0
    trip_factor: float = 2.0
    surge_decay_miles: float = 25.0
    daytime_amplification: float = 2.0
    urgency: float = 1.0
    lag_hours: float = EVACUATION_LAG_HOURS
    missing_rate: float = 0.01
    outlier_rate: float = 0.001
    sparse_detectors: list[int] = field(default_factory=list)
    sparse_missing_rate: float = 0.3

    def validate(self) -> None:
        if self.n_nodes < 2:
            raise ScenarioConfigError("need at least 2 nodes")
        if not 1 <= self.n_corridors <= self.n_nodes:
            raise ScenarioConfigError("n_corridors must lie in [1, n_nodes]")
        if self.regular_hours < 1 or self.evacuation_hours < 1:
            raise ScenarioConfigError("phase lengths must be positive")
        if not 0 <= self.landfall_hour <= self.evacuation_hours:
            raise ScenarioConfigError(
                f"landfall hour {self.landfall_hour} outside the evacuation window 0..{self.evacuation_hours}"
            )
        lo, hi = self.spacing_miles
        if not 0 < lo <= hi:
            raise ScenarioConfigError("spacing range must be positive and ordered")
        for z in self.zones or []:
            if float(z["population"]) <= 0:
                raise ScenarioConfigError(f"zone {z.get('id')} has nonpositive population")
        for rate in (self.missing_rate, self.outlier_rate, self.sparse_missing_rate, self.incident_rate):
            if not 0 <= rate < 1:
                raise ScenarioConfigError("rates must lie in [0, 1)")
        try:
            datetime.fromisoformat(self.start)
        except ValueError:
            raise ScenarioConfigError(f"bad start timestamp {self.start!r}") from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ScenarioConfigError(f"unknown scenario fields: {sorted(unknown)}")
        cfg = cls(**d)
        for name in ("spacing_miles", "lanes", "free_flow_mph", "base_flow_per_lane", "incident_hours"):
            setattr(cfg, name, tuple(getattr(cfg, name)))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (TypeError, json.JSONDecodeError) as exc:
            raise ScenarioConfigError(str(exc)) from None


@dataclass
class SyntheticScenario:
    config: ScenarioConfig
    network: DetectorNetwork
    regular: DetectorSeries
    evacuation: DetectorSeries
    zones: list[EvacuationZone]
    landfall_hour: float
    true_regular_flow: np.ndarray
    true_evacuation_flow: np.ndarray
    surge: np.ndarray  # [T_evac, N] added evacuation demand, vehicles/hour
    incidents: list[tuple[int, int, int]]  # (node index, start hour, duration) on the joint clock


def _corridor_sizes(n: int, k: int) -> list[int]:
    base, extra = divmod(n, k)
    return [base + (1 if c < extra else 0) for c in range(k)]


def build_network(cfg: ScenarioConfig, rng: np.random.Generator) -> DetectorNetwork:
    """A north-south trunk with eastbound branches joined at interchanges."""
    sizes = _corridor_sizes(cfg.n_nodes, cfg.n_corridors)
    lat0, lon0 = 26.0, -81.8
    nodes: list[Detector] = []
    edges: dict[tuple[int, int], float] = {}
    trunk_pos: list[tuple[float, float]] = []
    next_id = 1
    for c, size in enumerate(sizes):
        name = f"C{c + 1}"
        # log-uniform spacing: travel-time spread comparable to typical travel times
        gaps = np.exp(rng.uniform(*np.log(cfg.spacing_miles), size=size))
        lanes = rng.integers(cfg.lanes[0], cfg.lanes[1] + 1, size=size)
        if c == 0:
            lat, lon, heading = lat0, lon0, (1.0, 0.0)
            attach = None
            milepost = 0.0
            gaps[0] = 0.0
        else:
            anchor = int(round(c * sizes[0] / cfg.n_corridors))
            attach = anchor + 1  # trunk ids are 1..sizes[0]
            lat, lon = trunk_pos[anchor]
            heading = (0.25, 1.0)
            milepost = 0.0
        norm = np.hypot(*heading)
        prev = attach
        for k in range(size):
            step = float(gaps[k])
            milepost += step
            lat += heading[0] / norm * step / MILES_PER_DEG_LAT
            lon += heading[1] / norm * step / (MILES_PER_DEG_LAT * np.cos(np.radians(lat)))
            nodes.append(Detector(next_id, name, round(milepost, 3), int(lanes[k]), round(lat, 6), round(lon, 6)))
            if c == 0:
                trunk_pos.append((lat, lon))
            if prev is not None:
                edges[(prev, next_id)] = round(step, 3)
            prev = next_id
            next_id += 1
    return DetectorNetwork(nodes, edges)


def default_zones(network: DetectorNetwork) -> list[dict]:
    """Four coastal zones beside the southern trunk, ordered over the first day and a half."""
    trunk = [n for n in network.nodes if n.corridor == "C1"]
    picks = [trunk[min(k, len(trunk) - 1)] for k in (0, 2, 4, 6)]
    pops = [250_000, 400_000, 300_000, 200_000]
    orders = [0, 6, 20, 30]
    out = []
    for zid, (node, pop, order) in enumerate(zip(picks, pops, orders), start=1):
        west = 5.0 / (MILES_PER_DEG_LAT * np.cos(np.radians(node.lat)))
        out.append(
            {
                "id": zid,
                "population": float(pop),
                "order_issue_hour": float(order),
                "lat": round(node.lat, 6),
                "lon": round(node.lon - west, 6),
            }
        )
    return out


def diurnal_profile(hour_of_day: np.ndarray, cfg: ScenarioConfig) -> np.ndarray:
    h = np.asarray(hour_of_day, dtype=float)
    shape = 1.0 - cfg.night_level
    daytime = 1.0 / (1.0 + np.exp(-(h - 6.0))) - 1.0 / (1.0 + np.exp(-(h - 21.0)))
    am = cfg.am_amplitude * np.exp(-0.5 * ((h - cfg.am_peak_hour) / 1.5) ** 2)
    pm = cfg.pm_amplitude * np.exp(-0.5 * ((h - cfg.pm_peak_hour) / 2.0) ** 2)
    return cfg.night_level + shape * daytime * 0.6 + am + pm


def flat_level(cfg: ScenarioConfig) -> float:
    return float(diurnal_profile(np.arange(24), cfg).mean())


def surge_time_weights(hours: np.ndarray, hour_of_day: np.ndarray, cfg: ScenarioConfig) -> np.ndarray:
    """Relative evacuation departure intensity per hour before landfall (0 after it)."""
    hours = np.asarray(hours, dtype=float)
    period = period_index(hour_of_day)
    day = np.where((period >= 2) & (period <= 4), cfg.daytime_amplification, 1.0)
    t_l = np.maximum(0.0, cfg.landfall_hour - hours)
    urgency = 1.0 + cfg.urgency * (1.0 - t_l / max(cfg.landfall_hour, 1.0))
    return np.where(hours < cfg.landfall_hour, day * urgency, 0.0)


def evacuation_surge(
    zones: list[EvacuationZone], network: DetectorNetwork, cfg: ScenarioConfig, hour_of_day: np.ndarray
) -> np.ndarray:
    """[T_evac, N] surge; each zone's trips spread over hours after its lagged order."""
    T = cfg.evacuation_hours
    hours = np.arange(T, dtype=float)
    surge = np.zeros((T, network.n))
    if not zones:
        return surge
    dist = zone_distances(zones, network)
    base_w = surge_time_weights(hours, hour_of_day, cfg)
    for zi, z in enumerate(zones):
        w = np.where(hours >= z.order_issue_hour + cfg.lag_hours, base_w, 0.0)
        if w.sum() == 0:
            continue
        spatial = np.exp(-dist[:, zi] / cfg.surge_decay_miles)
        spatial /= spatial.sum()
        surge += cfg.trip_factor * z.population * np.outer(w / w.sum(), spatial)
    return surge


def expected_total_surge(zones: list[EvacuationZone], cfg: ScenarioConfig) -> float:
    """Trip factor times the population whose lagged order falls before landfall and the window end."""
    end = min(cfg.landfall_hour, cfg.evacuation_hours)
    total = 0.0
    for z in zones:
        start = max(0.0, z.order_issue_hour + cfg.lag_hours)
        if np.ceil(start) < end:
            total += z.population
    return cfg.trip_factor * total


def _incidents(cfg, rng, T, N):
    events = []
    busy_until = np.zeros(N, dtype=int)
    starts = rng.random((T, N)) < cfg.incident_rate
    durations = rng.integers(cfg.incident_hours[0], cfg.incident_hours[1] + 1, size=(T, N))
    for t, k in zip(*np.nonzero(starts)):
        if t >= busy_until[k]:
            events.append((int(k), int(t), int(durations[t, k])))
            busy_until[k] = t + durations[t, k] + 1
    return events


def generate_synthetic(cfg: ScenarioConfig) -> SyntheticScenario:
    """Deterministic per ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    network = build_network(cfg, rng)
    N = network.n
    zones_raw = cfg.zones if cfg.zones is not None else default_zones(network)
    zones = [EvacuationZone.from_json(z) for z in zones_raw]

    T_reg, T_evc = cfg.regular_hours, cfg.evacuation_hours
    T = T_reg + T_evc
    start = datetime.fromisoformat(cfg.start)
    clock = start.hour + np.arange(T)
    hod = clock % 24
    weekday = np.array([(start + timedelta(hours=int(k))).weekday() for k in range(T)])

    lanes = network.lanes
    cap = lanes * CAPACITY_PER_LANE
    base = lanes * rng.uniform(*cfg.base_flow_per_lane, size=N)
    free_flow = rng.uniform(*cfg.free_flow_mph, size=N)
    corridor_of = np.array([int(n.corridor[1:]) - 1 for n in network.nodes])

    n_days = T // 24 + 2
    day_factor = 1.0 + cfg.day_factor_sd * rng.standard_normal((n_days, cfg.n_corridors))
    day_idx = (start.hour + np.arange(T)) // 24

    profile = diurnal_profile(hod, cfg)
    weekend = weekday >= 5
    reg_shape = np.where(weekend, cfg.weekend_factor * (0.5 * profile + 0.5 * flat_level(cfg)), profile)
    demand = base[None, :] * reg_shape[:, None] * day_factor[day_idx][:, corridor_of]
    demand[T_reg:] = base[None, :] * flat_level(cfg)

    surge = evacuation_surge(zones, network, cfg, hod[T_reg:])
    demand[T_reg:] += surge

    flow_noise = rng.standard_normal((T, N))
    speed_noise = rng.standard_normal((T, N))
    flow = demand * (1.0 + cfg.noise_sd * flow_noise)

    incidents = _incidents(cfg, rng, T, N)
    speed_factor = np.ones((T, N))
    flow_factor = np.ones((T, N))
    upstream = {}
    for i, j in network.edges:
        a, b = network.nodes[i - 1], network.nodes[j - 1]
        if a.corridor == b.corridor and a.milepost < b.milepost:
            upstream.setdefault(j - 1, []).append(i - 1)
    for k, s, d in incidents:
        speed_factor[s : s + d, k] = cfg.incident_speed_factor
        for u in upstream.get(k, []):
            speed_factor[s : s + d, u] = np.minimum(speed_factor[s : s + d, u], 0.5 + 0.5 * cfg.incident_speed_factor)
        flow_factor[s + 1 : s + d + 1, k] = cfg.incident_flow_factor

    flow = np.clip(flow * flow_factor, 0.0, 0.95 * cap[None, :])
    ratio = flow / cap[None, :]
    speed = free_flow[None, :] * np.maximum(0.3, 1.0 - 0.6 * ratio**2) * speed_factor
    speed = np.maximum(speed + cfg.speed_noise_mph * speed_noise, 3.0)
    flow = np.round(flow, 1)
    speed = np.round(speed, 1)
    true_flow = flow.copy()

    observed_flow, observed_speed = flow.copy(), speed.copy()
    miss_rate = np.full(N, cfg.missing_rate)
    for node_id in cfg.sparse_detectors:
        if not 1 <= node_id <= N:
            raise ScenarioConfigError(f"sparse detector {node_id} not in 1..{N}")
        miss_rate[node_id - 1] = cfg.sparse_missing_rate
    missing = rng.random((T, N)) < miss_rate[None, :]
    outlier = (rng.random((T, N)) < cfg.outlier_rate) & ~missing
    spike = np.round(cap[None, :] * rng.uniform(1.05, 1.5, size=(T, N)), 1)
    observed_flow = np.where(outlier, spike, observed_flow)
    observed_flow[missing] = np.nan
    observed_speed[missing] = np.nan

    ids = np.arange(1, N + 1)
    regular = DetectorSeries(observed_flow[:T_reg], observed_speed[:T_reg], lanes, ids, start)
    evacuation = DetectorSeries(
        observed_flow[T_reg:], observed_speed[T_reg:], lanes, ids, start + timedelta(hours=T_reg)
    )
    return SyntheticScenario(
        cfg,
        network,
        regular,
        evacuation,
        zones,
        cfg.landfall_hour,
        true_flow[:T_reg],
        true_flow[T_reg:],
        surge,
        incidents,
    )
