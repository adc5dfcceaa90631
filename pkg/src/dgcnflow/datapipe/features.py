"""Hourly node features for the regular traffic and evacuation-demand inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..graphdyn import DetectorNetwork, haversine_miles

PERIODS = ("late_night", "early_morning", "morning", "mid_day", "evening", "night")
REGULAR_FEATURES = (
    "zone_id",
    *PERIODS,
    "flow",
    "prev_day_mean",
    "prev_day_std",
    "prev_period_mean",
    "prev_period_std",
)
DEMAND_FEATURES = (*PERIODS, "evac_population", "evac_distance", "hours_to_landfall")
EVACUATION_LAG_HOURS = 18
MIN_HISTORY_HOURS = 48


class InsufficientHistoryError(ValueError):
    pass


class ZoneConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvacuationZone:
    id: int
    population: float
    order_issue_hour: float
    lat: float | None
    lon: float | None

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "population": self.population,
            "order_issue_hour": self.order_issue_hour,
            "lat": self.lat,
            "lon": self.lon,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvacuationZone":
        return cls(
            int(d["id"]),
            float(d["population"]),
            float(d["order_issue_hour"]),
            None if d.get("lat") is None else float(d["lat"]),
            None if d.get("lon") is None else float(d["lon"]),
        )


def period_index(hour_of_day) -> np.ndarray:
    """0 late night (0-4h), 1 early morning, 2 morning, 3 mid-day, 4 evening, 5 night (20-24h)."""
    return (np.asarray(hour_of_day, dtype=int) % 24) // 4


def period_one_hot(hour_of_day) -> np.ndarray:
    idx = period_index(hour_of_day)
    out = np.zeros(idx.shape + (6,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def _block_stats(flow: np.ndarray, block_start: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    idx = block_start[:, None] + np.arange(4)[None, :]
    blocks = flow[idx]  # [T', 4, N]
    return blocks.mean(axis=1), blocks.std(axis=1)


def extract_regular_features(
    flow: np.ndarray,
    hour_of_day: np.ndarray,
    zone_ids: np.ndarray,
    first: int = MIN_HISTORY_HOURS,
) -> np.ndarray:
    """[T - first, N, 12] features for hours ``first..T-1`` of a complete flow matrix.

    Previous-day statistics cover the same 4-hour clock period one day earlier;
    previous-period statistics cover the 4-hour period just before the current one.
    """
    flow = np.asarray(flow, dtype=float)
    T, N = flow.shape
    if first < MIN_HISTORY_HOURS:
        raise InsufficientHistoryError(
            f"hour {first} has under {MIN_HISTORY_HOURS} h of history; first valid hour is {MIN_HISTORY_HOURS}"
        )
    if T <= first:
        raise InsufficientHistoryError(
            f"series of {T} h ends before the first valid hour {MIN_HISTORY_HOURS}"
        )
    if not np.isfinite(flow).all():
        raise ValueError("flow matrix has missing values; clean it first")
    hours = np.arange(first, T)
    hod = np.asarray(hour_of_day)[hours]
    block = hours - (hod % 4)
    day_mean, day_std = _block_stats(flow, block - 24)
    prd_mean, prd_std = _block_stats(flow, block - 4)
    n_out = hours.size
    out = np.empty((n_out, N, len(REGULAR_FEATURES)))
    out[:, :, 0] = np.asarray(zone_ids, dtype=float)[None, :] / N
    out[:, :, 1:7] = period_one_hot(hod)[:, None, :]
    out[:, :, 7] = flow[hours]
    out[:, :, 8] = day_mean
    out[:, :, 9] = day_std
    out[:, :, 10] = prd_mean
    out[:, :, 11] = prd_std
    return out


def cumulative_evacuation_population(
    zones: list[EvacuationZone], hours: np.ndarray, lag: float = EVACUATION_LAG_HOURS
) -> np.ndarray:
    """Population of zones whose order was issued at least ``lag`` hours before each hour."""
    hours = np.asarray(hours, dtype=float)
    total = np.zeros(hours.shape)
    for z in zones:
        total = total + np.where(z.order_issue_hour <= hours - lag, z.population, 0.0)
    return total


def zone_distances(zones: list[EvacuationZone], network: DetectorNetwork) -> np.ndarray:
    """[N, Z] straight-line miles from each detector to each zone centroid."""
    for z in zones:
        if z.lat is None or z.lon is None:
            raise ZoneConfigError(f"evacuation zone {z.id} has no location")
    lat = np.array([n.lat for n in network.nodes])[:, None]
    lon = np.array([n.lon for n in network.nodes])[:, None]
    zlat = np.array([z.lat for z in zones])[None, :]
    zlon = np.array([z.lon for z in zones])[None, :]
    return haversine_miles(lat, lon, zlat, zlon)


def extract_demand_features(
    zones: list[EvacuationZone],
    landfall_hour: float,
    network: DetectorNetwork,
    hours: np.ndarray,
    hour_of_day: np.ndarray,
    lag: float = EVACUATION_LAG_HOURS,
) -> np.ndarray:
    """[T, N, 9] demand features; ``hours`` count from the start of the evacuation phase."""
    hours = np.asarray(hours, dtype=float)
    N = network.n
    if zones:
        d_evc = zone_distances(zones, network).min(axis=1)
    else:
        d_evc = np.zeros(N)
    out = np.empty((hours.size, N, len(DEMAND_FEATURES)))
    out[:, :, 0:6] = period_one_hot(hour_of_day)[:, None, :]
    out[:, :, 6] = cumulative_evacuation_population(zones, hours, lag)[:, None]
    out[:, :, 7] = d_evc[None, :]
    out[:, :, 8] = np.maximum(0.0, landfall_hour - hours)[:, None]
    return out
