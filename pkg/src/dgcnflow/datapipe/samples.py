"""Sliding-window samples, train/val/test splits and min-max scaling."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

FLOW_COLUMNS = (7, 8, 10)  # flow-valued regular features, mapped onto [0, 1]
SPREAD_COLUMNS = (9, 11)  # standard deviations, divided by the range only


class DegenerateScalerError(ValueError):
    pass


class EmptySampleSetError(ValueError):
    pass


@dataclass(frozen=True)
class FlowScaler:
    """Affine map of flows onto [-1, 1]; inverse results are clamped at zero."""

    min: float
    max: float

    def __post_init__(self):
        if not self.max > self.min:
            raise DegenerateScalerError(f"flow range is degenerate: min={self.min}, max={self.max}")

    @classmethod
    def fit(cls, targets: np.ndarray) -> "FlowScaler":
        targets = np.asarray(targets, dtype=float)
        return cls(float(targets.min()), float(targets.max()))

    def apply(self, x):
        return 2.0 * (np.asarray(x, dtype=float) - self.min) / (self.max - self.min) - 1.0

    def invert(self, y, clamp: bool = True):
        out = (np.asarray(y, dtype=float) + 1.0) * (self.max - self.min) / 2.0 + self.min
        return np.maximum(out, 0.0) if clamp else out


def window_starts(n_hours: int, l: int, p: int, stride: int = 1) -> np.ndarray:
    """First input hour of each window pairing ``l`` input hours with the next ``p`` hours."""
    if l < 1 or p < 1 or stride < 1:
        raise ValueError("l, p and stride must be >= 1")
    if n_hours < l + p:
        raise EmptySampleSetError(f"{n_hours} h cannot hold a window of {l} + {p} h")
    return np.arange(0, n_hours - l - p + 1, stride)


def split_indices(n: int, ratios: tuple[float, float, float], seed: int) -> dict[str, np.ndarray]:
    """Random train/val/test partition of ``n`` samples."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    n_train = n - n_val - n_test
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train : n_train + n_val]),
        "test": np.sort(perm[n_train + n_val :]),
    }


def scale_regular_inputs(features: np.ndarray, scaler: FlowScaler) -> np.ndarray:
    """Flow inputs go to [0, 1] rather than the targets' [-1, 1].

    The graph convolution ends in a relu, and negative inputs would lose every
    below-midrange flow before the recurrent stage sees it.
    """
    out = features.copy()
    span = scaler.max - scaler.min
    for k in FLOW_COLUMNS:
        out[..., k] = (features[..., k] - scaler.min) / span
    for k in SPREAD_COLUMNS:
        out[..., k] = features[..., k] / span
    return out


@dataclass
class SampleSet:
    """Windows over hourly arrays; a sample is referenced by its first input hour.

    ``features`` [T, N, c], ``flow`` [T, N] targets, optional ``a_hat`` [T, N, N]
    (hourly), ``static_a_hat`` [N, N] and ``demand`` [T, N, c_d].
    """

    features: np.ndarray
    flow: np.ndarray
    l: int
    p: int
    starts: np.ndarray
    a_hat: np.ndarray | None = None
    static_a_hat: np.ndarray | None = None
    demand: np.ndarray | None = None
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    input_scaler: FlowScaler | None = None
    target_scaler: FlowScaler | None = None
    demand_scale: np.ndarray | None = None

    @classmethod
    def build(cls, features, flow, l, p, stride=1, **kw) -> "SampleSet":
        starts = window_starts(features.shape[0], l, p, stride)
        return cls(np.asarray(features, float), np.asarray(flow, float), l, p, starts, **kw)

    def __len__(self) -> int:
        return len(self.starts)

    @property
    def n_nodes(self) -> int:
        return self.flow.shape[1]

    def input_hours(self, idx) -> np.ndarray:
        return self.starts[np.asarray(idx)][..., None] + np.arange(self.l)

    def target_hours(self, idx) -> np.ndarray:
        return self.starts[np.asarray(idx)][..., None] + self.l + np.arange(self.p)

    def raw_targets(self, idx) -> np.ndarray:
        return self.flow[self.target_hours(idx)]

    def with_split(
        self, ratios: tuple[float, float, float], seed: int, input_scaler: FlowScaler | None = None
    ) -> "SampleSet":
        """Split randomly and fit the target scaler on the training targets only.

        ``input_scaler`` pins the scaling of flow-valued inputs (e.g. to a pretrained model's);
        by default inputs use the freshly fitted target scaler.
        """
        splits = split_indices(len(self), ratios, seed)
        if splits["train"].size == 0:
            raise EmptySampleSetError("training split is empty")
        target_scaler = FlowScaler.fit(self.raw_targets(splits["train"]))
        demand_scale = None
        if self.demand is not None:
            hours = np.unique(self.input_hours(splits["train"]))
            demand_scale = np.abs(self.demand[hours]).max(axis=(0, 1))
            demand_scale = np.where(demand_scale > 0, demand_scale, 1.0)
        return replace(
            self,
            splits=splits,
            target_scaler=target_scaler,
            input_scaler=input_scaler or target_scaler,
            demand_scale=demand_scale,
        )

    def with_scalers(self, input_scaler, target_scaler, demand_scale=None) -> "SampleSet":
        return replace(
            self,
            input_scaler=input_scaler,
            target_scaler=target_scaler,
            demand_scale=None if demand_scale is None else np.asarray(demand_scale, float),
        )

    def batch(self, idx, adjacency: str | None = "dynamic") -> dict[str, np.ndarray]:
        """Scaled model inputs and targets for sample indices ``idx``."""
        if self.input_scaler is None or self.target_scaler is None:
            raise ValueError("sample set has no scalers; call with_split or with_scalers first")
        idx = np.asarray(idx)
        hours_in = self.input_hours(idx)
        out = {
            "x": scale_regular_inputs(self.features[hours_in], self.input_scaler),
            "y": self.target_scaler.apply(self.raw_targets(idx)),
        }
        if adjacency == "dynamic":
            if self.a_hat is None:
                raise ValueError("sample set carries no dynamic adjacency")
            out["adj"] = self.a_hat[hours_in]
        elif adjacency == "static":
            if self.static_a_hat is None:
                raise ValueError("sample set carries no static adjacency")
            out["adj"] = np.broadcast_to(self.static_a_hat, hours_in.shape + self.static_a_hat.shape).copy()
        if self.demand is not None:
            scale = self.demand_scale if self.demand_scale is not None else 1.0
            out["xd"] = self.demand[hours_in] / scale
        return out
