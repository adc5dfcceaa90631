"""Travel-time weighted dynamic adjacency and its symmetric normalization."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPEED_FLOOR_MPH = 5.0
DEFAULT_THRESHOLD = 0.1


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class Detector:
    id: int
    corridor: str
    milepost: float
    lanes: int
    lat: float = 0.0
    lon: float = 0.0


@dataclass
class DetectorNetwork:
    nodes: list[Detector]
    edges: dict[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        ids = sorted(n.id for n in self.nodes)
        if ids != list(range(1, len(self.nodes) + 1)):
            raise GraphError("node ids must be a permutation of 1..N")
        # stored sorted by id so that row k of every matrix is node k+1
        self.nodes = sorted(self.nodes, key=lambda n: n.id)
        sym: dict[tuple[int, int], float] = {}
        for (i, j), d in self.edges.items():
            if i == j:
                raise GraphError(f"self edge on node {i}")
            if not d > 0:
                raise GraphError(f"edge ({i},{j}) has nonpositive distance {d}")
            other = self.edges.get((j, i))
            if other is not None and other != d:
                raise GraphError(f"edge ({i},{j}) stored asymmetrically: {d} vs {other}")
            sym[(i, j)] = d
            sym[(j, i)] = d
        self.edges = sym

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def lanes(self) -> np.ndarray:
        return np.array([n.lanes for n in self.nodes], dtype=float)

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Zero-based (i, j, distance) for every stored direction."""
        keys = sorted(self.edges)
        i = np.array([k[0] - 1 for k in keys], dtype=int)
        j = np.array([k[1] - 1 for k in keys], dtype=int)
        d = np.array([self.edges[k] for k in keys], dtype=float)
        return i, j, d

    def corridor_segments(self) -> list[list[int]]:
        """Zero-based node indices per corridor, ascending milepost."""
        corridors: dict[str, list[Detector]] = {}
        for node in self.nodes:
            corridors.setdefault(node.corridor, []).append(node)
        return [
            [n.id - 1 for n in sorted(corridors[name], key=lambda n: n.milepost)]
            for name in sorted(corridors)
        ]

    def corridor_order(self) -> list[int]:
        return [k for seg in self.corridor_segments() for k in seg]

    def subset(self, keep_ids: list[int]) -> "DetectorNetwork":
        """Network restricted to ``keep_ids``, renumbered 1..M in the original order.

        Neighbors of a removed detector are joined with the summed distance so corridors stay connected.
        """
        keep = set(keep_ids)
        adj: dict[int, dict[int, float]] = {n.id: {} for n in self.nodes}
        for (i, j), d in self.edges.items():
            adj[i][j] = d
        for node in self.nodes:
            k = node.id
            if k in keep:
                continue
            nbrs = list(adj[k].items())
            for a, da in nbrs:
                for b, db in nbrs:
                    if a != b and b not in adj[a]:
                        adj[a][b] = da + db
            for a, _ in nbrs:
                adj[a].pop(k, None)
            adj[k] = {}
        old = [n for n in self.nodes if n.id in keep]
        remap = {n.id: k + 1 for k, n in enumerate(old)}
        nodes = [
            Detector(remap[n.id], n.corridor, n.milepost, n.lanes, n.lat, n.lon) for n in old
        ]
        edges = {
            (remap[i], remap[j]): d
            for i in remap
            for j, d in adj[i].items()
            if j in remap
        }
        return DetectorNetwork(nodes, edges)

    def to_json(self) -> dict:
        return {
            "nodes": [
                {
                    "id": n.id,
                    "corridor": n.corridor,
                    "milepost": n.milepost,
                    "lanes": n.lanes,
                    "lat": n.lat,
                    "lon": n.lon,
                }
                for n in self.nodes
            ],
            "edges": [
                {"i": i, "j": j, "distance_miles": d}
                for (i, j), d in sorted(self.edges.items())
                if i < j
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DetectorNetwork":
        nodes = [
            Detector(
                int(n["id"]),
                str(n["corridor"]),
                float(n["milepost"]),
                int(n["lanes"]),
                float(n.get("lat", 0.0)),
                float(n.get("lon", 0.0)),
            )
            for n in obj["nodes"]
        ]
        edges = {(int(e["i"]), int(e["j"])): float(e["distance_miles"]) for e in obj["edges"]}
        return cls(nodes, edges)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DetectorNetwork":
        return cls.from_json(json.loads(Path(path).read_text()))


def travel_time(distance, speed_i, speed_j, floor: float = SPEED_FLOOR_MPH):
    """Hours to cover ``distance`` miles at the mean of the two detector speeds."""
    distance = np.asarray(distance, dtype=float)
    if np.any(distance <= 0):
        raise GraphError("travel distance must be positive")
    si = np.maximum(np.asarray(speed_i, dtype=float), floor)
    sj = np.maximum(np.asarray(speed_j, dtype=float), floor)
    out = 2.0 * distance / (si + sj)
    return float(out) if out.ndim == 0 else out


def kernelize(tt, tt_std: float, r: float = DEFAULT_THRESHOLD):
    """Gaussian travel-time kernel, zeroed below the sparsity threshold ``r``."""
    if not tt_std > 0:
        raise GraphError("travel-time spread must be positive")
    if not 0 <= r < 1:
        raise GraphError(f"threshold must lie in [0, 1), got {r}")
    w = np.exp(-np.square(np.asarray(tt, dtype=float)) / (tt_std * tt_std))
    w = np.where(w >= r, w, 0.0)
    return float(w) if w.ndim == 0 else w


def normalize(a_bar: np.ndarray, degree: str = "weighted") -> np.ndarray:
    """D^-1/2 A D^-1/2 for one matrix or a stack of matrices (last two axes).

    ``degree="weighted"`` uses row sums; ``"links"`` counts nonzero entries per row.
    """
    a_bar = np.asarray(a_bar, dtype=float)
    if a_bar.shape[-1] != a_bar.shape[-2]:
        raise GraphError(f"adjacency must be square, got {a_bar.shape}")
    if np.any(a_bar < 0):
        raise GraphError("adjacency entries must be nonnegative")
    if degree == "weighted":
        deg = a_bar.sum(axis=-1)
    elif degree == "links":
        deg = (a_bar != 0).sum(axis=-1).astype(float)
    else:
        raise GraphError(f"unknown degree mode {degree!r}")
    assert np.all(deg > 0), "zero degree despite self-loops"
    inv = 1.0 / np.sqrt(deg)
    return inv[..., :, None] * a_bar * inv[..., None, :]


@dataclass(frozen=True)
class DynamicGraph:
    adjacency: np.ndarray  # [T, N, N] kernel weights, zero diagonal
    tt_std: float
    threshold: float
    degree: str = "weighted"

    @property
    def a_bar(self) -> np.ndarray:
        return self.adjacency + np.eye(self.adjacency.shape[-1])

    @property
    def a_hat(self) -> np.ndarray:
        return normalize(self.a_bar, self.degree)

    def __len__(self) -> int:
        return self.adjacency.shape[0]


def edge_travel_times(network: DetectorNetwork, speeds: np.ndarray) -> np.ndarray:
    """[T, E] travel times for every stored edge direction."""
    speeds = np.atleast_2d(np.asarray(speeds, dtype=float))
    if speeds.shape[1] != network.n:
        raise GraphError(f"speed series covers {speeds.shape[1]} nodes, network has {network.n}")
    if not np.isfinite(speeds).all():
        raise GraphError("speed series has missing values; clean it first")
    i, j, d = network.edge_arrays()
    if d.size == 0:
        return np.zeros((speeds.shape[0], 0))
    return travel_time(d[None, :], speeds[:, i], speeds[:, j])


def travel_time_std(network: DetectorNetwork, speeds: np.ndarray) -> float:
    tt = edge_travel_times(network, speeds)
    tt = tt[np.isfinite(tt)]
    if tt.size == 0:
        return 1.0
    std = float(np.std(tt))
    if not std > 0:
        # uniform travel times: fall back to their common value so the kernel is exp(-1)
        std = float(np.mean(tt)) if tt.size else 1.0
    return std


def build_dynamic_graph(
    network: DetectorNetwork,
    speeds: np.ndarray,
    r: float = DEFAULT_THRESHOLD,
    tt_std: float | None = None,
    degree: str = "weighted",
) -> DynamicGraph:
    """Kernel weights on network edges for each hour of ``speeds`` ([T, N] mph)."""
    speeds = np.atleast_2d(np.asarray(speeds, dtype=float))
    tt = edge_travel_times(network, speeds)
    if tt_std is None:
        tt_std = travel_time_std(network, speeds)
    T, N = speeds.shape
    adj = np.zeros((T, N, N))
    i, j, _ = network.edge_arrays()
    if i.size:
        adj[:, i, j] = kernelize(tt, tt_std, r)
    isolated = np.where((adj.sum(axis=2) == 0).any(axis=0))[0]
    if N > 1 and isolated.size:
        log.warning(
            "%d detector(s) lose every neighbor at some hour after thresholding: %s",
            isolated.size,
            ", ".join(str(k + 1) for k in isolated[:10]),
        )
    return DynamicGraph(adj, float(tt_std), r, degree)


def static_distance_graph(
    network: DetectorNetwork, r: float = DEFAULT_THRESHOLD, degree: str = "weighted"
) -> np.ndarray:
    """Normalized adjacency with time-constant weights from edge distances."""
    N = network.n
    adj = np.zeros((N, N))
    i, j, d = network.edge_arrays()
    if d.size:
        std = float(np.std(d)) or float(np.mean(d))
        adj[i, j] = kernelize(d, std, r)
    return normalize(adj + np.eye(N), degree)


def spectral_radius(m: np.ndarray, iters: int = 500, seed: int = 0) -> float:
    """Largest |eigenvalue| of a symmetric matrix by power iteration."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(m.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = m @ v
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 0.0
        lam = nrm
        v = w / nrm
    return float(lam)


def haversine_miles(lat1, lon1, lat2, lon2):
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * 3958.8 * np.arcsin(np.sqrt(np.minimum(a, 1.0)))


def export_adjacency_csv(graph: DynamicGraph, path: str | Path) -> None:
    a_hat = graph.a_hat
    with open(path, "w") as fh:
        fh.write("t,i,j,weight\n")
        for t in range(a_hat.shape[0]):
            ii, jj = np.nonzero(a_hat[t])
            for i, j in zip(ii, jj):
                fh.write(f"{t},{i + 1},{j + 1},{a_hat[t, i, j]!r}\n")


__all__ = [
    "Detector",
    "DetectorNetwork",
    "DynamicGraph",
    "GraphError",
    "SPEED_FLOOR_MPH",
    "build_dynamic_graph",
    "edge_travel_times",
    "export_adjacency_csv",
    "haversine_miles",
    "kernelize",
    "normalize",
    "spectral_radius",
    "static_distance_graph",
    "travel_time",
    "travel_time_std",
]
