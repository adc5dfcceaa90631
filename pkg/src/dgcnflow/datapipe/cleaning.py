"""Detector cleaning: sparse-detector removal, capacity outliers, chained-regression imputation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .series import DetectorSeries

log = logging.getLogger(__name__)

CAPACITY_PER_LANE = 2500.0
MAX_MISSING = 0.20


class EmptyNetworkError(ValueError):
    pass


class ImputationError(ValueError):
    pass


@dataclass
class CleaningReport:
    dropped: list[tuple[int, float]] = field(default_factory=list)
    outliers: int = 0
    imputed: int = 0
    rounds: int = 0

    def to_dict(self) -> dict:
        return {
            "dropped": [{"node_id": i, "missing_fraction": f} for i, f in self.dropped],
            "outliers": self.outliers,
            "imputed": self.imputed,
            "rounds": self.rounds,
        }


def drop_sparse_detectors(
    series: DetectorSeries, max_missing: float = MAX_MISSING
) -> tuple[DetectorSeries, list[tuple[int, float]]]:
    """Remove detectors whose share of hours with missing flow or speed exceeds ``max_missing``."""
    if not 0 <= max_missing <= 1:
        raise ValueError(f"max_missing must lie in [0, 1], got {max_missing}")
    frac = series.missing.mean(axis=0)
    keep = np.where(frac <= max_missing)[0]
    dropped = [(int(series.node_ids[k]), float(frac[k])) for k in np.where(frac > max_missing)[0]]
    if keep.size == 0:
        raise EmptyNetworkError("every detector exceeds the missing-value threshold")
    if dropped:
        log.info("dropping %d sparse detector(s): %s", len(dropped), dropped)
    return series.select(keep), dropped


def flag_outliers(
    series: DetectorSeries, capacity_per_lane: float = CAPACITY_PER_LANE
) -> tuple[DetectorSeries, int]:
    """Mark hourly flows above lanes x capacity as missing."""
    if capacity_per_lane <= 0:
        raise ValueError("capacity_per_lane must be positive")
    cap = series.lanes[None, :] * capacity_per_lane
    with np.errstate(invalid="ignore"):
        bad = np.isfinite(series.flow) & (series.flow > cap)
    flow = np.where(bad, np.nan, series.flow)
    return series.with_values(flow=flow), int(bad.sum())


def _impute_matrix(
    values: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    max_rounds: int,
    tol: float,
    k_predictors: int,
) -> tuple[np.ndarray, int]:
    mask = ~np.isfinite(values)
    if not mask.any():
        return values.copy(), 0
    T, N = values.shape
    observed_share = 1.0 - mask.mean(axis=0)
    if np.any(observed_share < 0.5):
        bad = np.where(observed_share < 0.5)[0]
        raise ImputationError(f"columns {bad.tolist()} have fewer than 50% observed values")
    filled = values.copy()
    col_mean = np.nanmean(values, axis=0)
    filled[mask] = np.broadcast_to(col_mean, values.shape)[mask]
    filled = np.clip(filled, lower, upper)
    gappy = np.where(mask.any(axis=0))[0]
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        max_change = 0.0
        for j in gappy:
            miss = mask[:, j]
            others = np.delete(np.arange(N), j)
            if others.size == 0:
                continue
            with np.errstate(invalid="ignore", divide="ignore"):
                corr = np.corrcoef(filled.T)[j, others]
            corr = np.nan_to_num(np.abs(corr), nan=0.0)
            kk = min(k_predictors, others.size)
            pred_cols = others[np.argsort(-corr, kind="stable")[:kk]]
            design = np.column_stack([np.ones(T), filled[:, pred_cols]])
            fit_rows = ~miss
            X, y = design[fit_rows], filled[fit_rows, j]
            if np.linalg.matrix_rank(X) < X.shape[1]:
                new = np.full(miss.sum(), col_mean[j])
            else:
                coef, *_ = np.linalg.lstsq(X, y, rcond=None)
                new = design[miss] @ coef
            new = np.clip(new, lower[j], upper[j])
            max_change = max(max_change, float(np.max(np.abs(new - filled[miss, j]))))
            filled[miss, j] = new
        if max_change < tol:
            break
    return filled, rounds


def impute_iterative(
    series: DetectorSeries,
    max_rounds: int = 10,
    tol: float = 1e-3,
    k_predictors: int = 5,
    capacity_per_lane: float = CAPACITY_PER_LANE,
) -> tuple[DetectorSeries, int, int]:
    """Fill missing flow and speed cells by round-robin least squares on correlated detectors.

    Returns the completed series, the number of imputed cells and the rounds used.
    """
    flow, speed = series.flow, series.speed
    n_missing = int((~np.isfinite(flow)).sum() + (~np.isfinite(speed)).sum())
    if n_missing == 0:
        return series, 0, 0
    cap = series.lanes * capacity_per_lane
    new_flow, r1 = _impute_matrix(flow, np.zeros(series.n), cap, max_rounds, tol, k_predictors)
    s_lo = np.nanmin(speed, axis=0)
    s_hi = np.nanmax(speed, axis=0)
    new_speed, r2 = _impute_matrix(speed, s_lo, s_hi, max_rounds, tol, k_predictors)
    return series.with_values(flow=new_flow, speed=new_speed), n_missing, max(r1, r2)


def clean(
    series: DetectorSeries,
    max_missing: float = MAX_MISSING,
    capacity_per_lane: float = CAPACITY_PER_LANE,
    max_rounds: int = 10,
    tol: float = 1e-3,
) -> tuple[DetectorSeries, CleaningReport]:
    report = CleaningReport()
    series, report.dropped = drop_sparse_detectors(series, max_missing)
    series, report.outliers = flag_outliers(series, capacity_per_lane)
    series, report.imputed, report.rounds = impute_iterative(
        series, max_rounds, tol, capacity_per_lane=capacity_per_lane
    )
    return series, report
