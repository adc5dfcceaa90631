"""Dataset directories and the clean -> features -> graph -> windows pipeline.

A dataset directory holds ``regular.csv`` and ``evacuation.csv`` (detector
series, see :mod:`.series`), ``topology.json`` (nodes and edges with
distances in miles), ``zones.json`` (evacuation zones: population in
persons, order hour counted from the first evacuation-phase hour, centroid
lat/lon in degrees) and ``scenario.json`` (the generator config, whose
``landfall_hour`` and ``lag_hours`` are read back).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..graphdyn import DEFAULT_THRESHOLD, DetectorNetwork, build_dynamic_graph, static_distance_graph, travel_time_std
from .cleaning import CleaningReport, clean
from .features import (
    EVACUATION_LAG_HOURS,
    MIN_HISTORY_HOURS,
    EvacuationZone,
    extract_demand_features,
    extract_regular_features,
)
from .samples import SampleSet
from .series import DetectorSeries, concat_series, read_csv, split_series, write_csv
from .synthetic import SyntheticScenario


class DatasetError(FileNotFoundError):
    pass


@dataclass
class RawDataset:
    network: DetectorNetwork
    regular: DetectorSeries
    evacuation: DetectorSeries
    zones: list[EvacuationZone]
    landfall_hour: float
    lag_hours: float = EVACUATION_LAG_HOURS

    @classmethod
    def from_scenario(cls, sc: SyntheticScenario) -> "RawDataset":
        return cls(sc.network, sc.regular, sc.evacuation, sc.zones, sc.landfall_hour, sc.config.lag_hours)


def save_dataset(sc: SyntheticScenario, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "regular": out / "regular.csv",
        "evacuation": out / "evacuation.csv",
        "topology": out / "topology.json",
        "zones": out / "zones.json",
        "scenario": out / "scenario.json",
    }
    write_csv(sc.regular, paths["regular"])
    write_csv(sc.evacuation, paths["evacuation"])
    sc.network.save(paths["topology"])
    paths["zones"].write_text(json.dumps([z.to_json() for z in sc.zones], indent=2) + "\n")
    cfg = sc.config.to_dict()
    cfg["zones"] = [z.to_json() for z in sc.zones]
    paths["scenario"].write_text(json.dumps(cfg, indent=2) + "\n")
    return list(paths.values())


def load_dataset(data_dir: str | Path) -> RawDataset:
    d = Path(data_dir)
    for name in ("regular.csv", "evacuation.csv", "topology.json", "zones.json", "scenario.json"):
        if not (d / name).exists():
            raise DatasetError(f"dataset file missing: {d / name}")
    network = DetectorNetwork.load(d / "topology.json")
    lanes = network.lanes
    regular = read_csv(d / "regular.csv", lanes)
    evacuation = read_csv(d / "evacuation.csv", lanes)
    zones = [EvacuationZone.from_json(z) for z in json.loads((d / "zones.json").read_text())]
    scenario = json.loads((d / "scenario.json").read_text())
    return RawDataset(
        network,
        regular,
        evacuation,
        zones,
        float(scenario["landfall_hour"]),
        float(scenario.get("lag_hours", EVACUATION_LAG_HOURS)),
    )


@dataclass
class PreparedData:
    network: DetectorNetwork
    regular: SampleSet
    evacuation: SampleSet
    report: CleaningReport
    tt_std: float
    regular_series: DetectorSeries
    evacuation_series: DetectorSeries
    zones: list[EvacuationZone]
    landfall_hour: float
    first_regular_hour: int


def prepare(
    raw: RawDataset,
    l: int = 6,
    p: int = 6,
    r: float = DEFAULT_THRESHOLD,
    degree: str = "weighted",
    stride: int = 1,
) -> PreparedData:
    """Clean both phases jointly and build regular and evacuation sample sets.

    Regular features start after ``MIN_HISTORY_HOURS`` of warm-up; evacuation
    features draw their history from the preceding regular hours.  The
    travel-time spread is fitted on the regular phase and reused for evacuation graphs.
    """
    joint = concat_series(raw.regular, raw.evacuation)
    cleaned, report = clean(joint)
    network = raw.network
    if report.dropped:
        network = network.subset([int(i) for i in cleaned.node_ids])
        cleaned = DetectorSeries(
            cleaned.flow, cleaned.speed, cleaned.lanes, np.arange(1, cleaned.n + 1), cleaned.start
        )
    T_reg = raw.regular.hours
    regular, evacuation = split_series(cleaned, T_reg)
    zone_ids = cleaned.node_ids

    first = MIN_HISTORY_HOURS
    reg_feat = extract_regular_features(regular.flow, regular.hour_of_day(), zone_ids, first)
    tt_std = travel_time_std(network, regular.speed)
    reg_graph = build_dynamic_graph(network, regular.speed[first:], r, tt_std, degree)
    static = static_distance_graph(network, r, degree)
    reg_samples = SampleSet.build(
        reg_feat,
        regular.flow[first:],
        l,
        p,
        stride,
        a_hat=reg_graph.a_hat,
        static_a_hat=static,
    )

    if T_reg < MIN_HISTORY_HOURS:
        raise DatasetError(f"regular phase ({T_reg} h) too short to warm up evacuation features")
    evc_feat = extract_regular_features(cleaned.flow, cleaned.hour_of_day(), zone_ids, T_reg)
    hours = np.arange(evacuation.hours)
    demand = extract_demand_features(
        raw.zones, raw.landfall_hour, network, hours, evacuation.hour_of_day(), raw.lag_hours
    )
    evc_graph = build_dynamic_graph(network, evacuation.speed, r, tt_std, degree)
    evc_samples = SampleSet.build(
        evc_feat,
        evacuation.flow,
        l,
        p,
        stride,
        a_hat=evc_graph.a_hat,
        static_a_hat=static,
        demand=demand,
    )
    return PreparedData(
        network,
        reg_samples,
        evc_samples,
        report,
        tt_std,
        regular,
        evacuation,
        raw.zones,
        raw.landfall_hour,
        first,
    )
