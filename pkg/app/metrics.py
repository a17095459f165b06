# app/metrics.py
"""Trajectory evaluation: timespan, spread of the system mean value, and linearity loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .cloud_objects import CloudSystem
from .tracker import Trajectory, TrajectorySet

log = logging.getLogger(__name__)

MIN_ENTRIES = 3

PER_TRAJECTORY_COLUMNS = [
    "trajectory_id",
    "entries",
    "start_time",
    "timespan_minutes",
    "sd_mean_value",
    "linearity_loss_km",
]


def trajectory_timespan(traj: Trajectory, interval_minutes: float) -> float:
    return len(traj) * interval_minutes


def population_sd(values: Sequence[float]) -> float:
    return float(np.std(np.asarray(values, dtype=np.float64)))


def linearity_loss(points) -> float:
    """RMS orthogonal distance of the points to their total-least-squares line."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) == 0:
        raise ValueError(f"expected (n, 2) points, got shape {pts.shape}")
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv.size < 2:
        return 0.0
    return float(sv[1] / np.sqrt(len(pts)))


def passes_filter(traj: Trajectory, interval_minutes: float, median_timespan: float) -> bool:
    """At least three entries and strictly longer than the run's median timespan."""
    return len(traj) >= MIN_ENTRIES and trajectory_timespan(traj, interval_minutes) > median_timespan


SystemIndex = Sequence[Mapping[int, CloudSystem]]


def trajectory_mean_value_sd(
    traj: Trajectory,
    systems: SystemIndex,
    interval_minutes: float,
    median_timespan: float,
) -> Optional[float]:
    if not passes_filter(traj, interval_minutes, median_timespan):
        return None
    return population_sd([systems[t][sid].mean_value for t, sid in traj.entries])


def trajectory_linearity_loss(
    traj: Trajectory,
    systems: SystemIndex,
    interval_minutes: float,
    median_timespan: float,
) -> Optional[float]:
    if not passes_filter(traj, interval_minutes, median_timespan):
        return None
    return linearity_loss([systems[t][sid].centroid_km for t, sid in traj.entries])


def timespan_histogram(entries: Sequence[int], interval_minutes: float) -> pd.DataFrame:
    """Counts of trajectory lengths in log2 bins [2^k, 2^(k+1)) frames."""
    n = np.asarray(entries, dtype=np.int64)
    top = int(np.floor(np.log2(n.max()))) + 1 if n.size else 1
    lows = 2 ** np.arange(top)
    highs = lows * 2
    counts = [int(((n >= lo) & (n < hi)).sum()) for lo, hi in zip(lows, highs)]
    return pd.DataFrame(
        {
            "bin_low_steps": lows,
            "bin_high_steps": highs,
            "bin_low_minutes": lows * interval_minutes,
            "bin_high_minutes": highs * interval_minutes,
            "count": counts,
        }
    )


MATCHED_DISTANCE_COLUMNS = ["time_index", "source_node", "target_node", "mass", "distance_km"]


def matched_distances(
    time_index: int,
    coupling: np.ndarray,
    nodes_t: Sequence[int],
    nodes_t1: Sequence[int],
    locations_t: np.ndarray,
    locations_t1: np.ndarray,
    mass_epsilon: float = 1e-6,
) -> pd.DataFrame:
    """One row per coupling entry carrying at least `mass_epsilon`, with the anchor distance."""
    C = np.asarray(coupling, dtype=np.float64)
    rows, cols = np.nonzero(C >= mass_epsilon)
    dist = np.hypot(*(np.asarray(locations_t)[rows] - np.asarray(locations_t1)[cols]).T)
    return pd.DataFrame(
        {
            "time_index": np.full(rows.size, time_index, dtype=np.int64),
            "source_node": np.asarray(nodes_t, dtype=np.int64)[rows],
            "target_node": np.asarray(nodes_t1, dtype=np.int64)[cols],
            "mass": C[rows, cols],
            "distance_km": dist,
        },
        columns=MATCHED_DISTANCE_COLUMNS,
    )


def distance_histogram(distances: Sequence[float], bin_km: float = 2.0, top_km: float = 0.0) -> pd.DataFrame:
    """Counts of matched distances in `bin_km` bins from 0 up to max(top_km, largest distance)."""
    d = np.asarray(distances, dtype=np.float64)
    top = max(top_km, float(d.max()) if d.size else 0.0)
    n_bins = max(1, int(np.ceil(top / bin_km - 1e-9)))
    edges = np.arange(n_bins + 1) * bin_km
    counts, _ = np.histogram(np.clip(d, 0.0, edges[-1]), bins=edges)
    return pd.DataFrame({"bin_low_km": edges[:-1], "bin_high_km": edges[1:], "count": counts})


def _aggregate(col: pd.Series) -> Dict[str, Any]:
    vals = col.dropna().to_numpy(dtype=np.float64)
    if vals.size == 0:
        return {"n": 0, "median": None, "mean": None, "iqr": None}
    q1, q3 = np.percentile(vals, [25, 75])
    return {
        "n": int(vals.size),
        "median": float(np.median(vals)),
        "mean": float(vals.mean()),
        "iqr": float(q3 - q1),
    }


def _empty_matched() -> pd.DataFrame:
    return pd.DataFrame(columns=MATCHED_DISTANCE_COLUMNS)


@dataclass
class StatsReport:
    per_trajectory: pd.DataFrame
    aggregates: Dict[str, Dict[str, Any]]
    histogram: pd.DataFrame
    filters: Dict[str, Any] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)
    matched: pd.DataFrame = field(default_factory=_empty_matched)
    distance_bins: pd.DataFrame = field(default_factory=lambda: distance_histogram([]))

    def to_dict(self) -> Dict[str, Any]:
        return {"aggregates": self.aggregates, "filters": self.filters, "counts": self.counts}


def summarize_run(
    trajset: TrajectorySet,
    systems: SystemIndex,
    interval_minutes: float,
    matched: Optional[pd.DataFrame] = None,
    match_limit_km: Optional[float] = None,
) -> StatsReport:
    """
    Per-trajectory metrics over the main trajectories plus median / mean / IQR of each.
    The SD and linearity metrics only cover trajectories passing `passes_filter`, with the
    median timespan taken over every main trajectory of the run.

    `matched` (rows of `matched_distances`) adds the distribution of distances between
    matched anchor points, compared against `match_limit_km`.
    """
    mains = trajset.main()
    spans = [trajectory_timespan(t, interval_minutes) for t in mains]
    median_span = float(np.median(spans)) if spans else 0.0

    rows = []
    for traj, span in zip(mains, spans):
        rows.append(
            {
                "trajectory_id": traj.trajectory_id,
                "entries": len(traj),
                "start_time": traj.start,
                "timespan_minutes": span,
                "sd_mean_value": trajectory_mean_value_sd(traj, systems, interval_minutes, median_span),
                "linearity_loss_km": trajectory_linearity_loss(traj, systems, interval_minutes, median_span),
            }
        )
    per = pd.DataFrame(rows, columns=PER_TRAJECTORY_COLUMNS)
    per["sd_mean_value"] = per["sd_mean_value"].astype("float64")
    per["linearity_loss_km"] = per["linearity_loss_km"].astype("float64")

    if matched is None:
        matched = _empty_matched()
    dist = matched["distance_km"].astype("float64")

    aggregates = {
        "timespan_minutes": _aggregate(per["timespan_minutes"]),
        "sd_mean_value": _aggregate(per["sd_mean_value"]),
        "linearity_loss_km": _aggregate(per["linearity_loss_km"]),
        "matched_distance_km": _aggregate(dist),
    }
    filters = {
        "min_entries": MIN_ENTRIES,
        "median_timespan_minutes": median_span,
        "interval_minutes": interval_minutes,
        "match_limit_km": match_limit_km,
    }
    counts = {
        "frames": trajset.frames,
        "main_trajectories": len(mains),
        "secondary_links": len(trajset.secondary()),
        **{f"{kind}_events": len(trajset.events_of(kind)) for kind in ("birth", "termination", "merge", "split")},
        "matched_anchor_pairs": int(len(matched)),
        "matched_beyond_limit": int((dist > match_limit_km).sum()) if match_limit_km else 0,
    }
    log.debug("median timespan %.1f min over %d trajectories", median_span, len(mains))
    return StatsReport(
        per,
        aggregates,
        timespan_histogram([len(t) for t in mains], interval_minutes),
        filters,
        counts,
        matched,
        distance_histogram(dist, top_km=match_limit_km or 0.0),
    )
