# app/pipeline.py
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import partial
from typing import Callable, Dict, Iterable, List, Optional

import pandas as pd
from joblib import Parallel, delayed

from . import TopoTrackError
from .cloud_objects import (
    CloudObjectLabeling,
    CloudSystem,
    attach_anchor_points,
    build_cloud_systems,
    detect_objects,
    filter_small_objects,
)
from .field_io import FieldSequence, ScalarField, load_sequence
from .measure_net import MeasureNetwork, to_measure_network
from .merge_tree import MergeTree, auto_simplify, build_merge_tree, simplify_by_zone_area
from .metrics import MATCHED_DISTANCE_COLUMNS, StatsReport, matched_distances, summarize_run
from .models import RunConfig
from .pfgw import MassSelection, auto_select_mass
from .tracker import PairMatching, TrajectorySet, assemble_trajectories, empty_matching, track_pair

log = logging.getLogger(__name__)


class StageError(TopoTrackError, RuntimeError):
    """A module error tagged with the frame or pair it happened in."""


@dataclass(frozen=True, eq=False)
class FrameResult:
    time_index: int
    tree: MergeTree
    zone_threshold: int
    labeling: CloudObjectLabeling
    systems: List[CloudSystem]
    network: Optional[MeasureNetwork]    # None when the frame has no systems


@dataclass(frozen=True, eq=False)
class PairResult:
    time_index: int                      # transition time_index -> time_index + 1
    selection: Optional[MassSelection]   # None when either frame has no systems
    matching: PairMatching


@dataclass(frozen=True, eq=False)
class RunResult:
    config: RunConfig
    frames: List[FrameResult]
    pairs: List[PairResult]
    trajectories: TrajectorySet
    stats: StatsReport

    def system_index(self) -> List[Dict[int, CloudSystem]]:
        return [{s.system_id: s for s in f.systems} for f in self.frames]


def process_frame(fld: ScalarField, cfg: RunConfig) -> FrameResult:
    t = fld.time_index
    try:
        tree, zones = build_merge_tree(fld)
        if cfg.min_zone_px is not None:
            tree, zones = simplify_by_zone_area(tree, zones, cfg.min_zone_px)
            zone_threshold = cfg.min_zone_px
        else:
            tree, zones, zone_threshold = auto_simplify(tree, zones, cfg.zone_node_cap, cfg.zone_step)

        labeling = detect_objects(fld, cfg.detection_threshold, cfg.connectivity)
        labeling = filter_small_objects(labeling, cfg.min_area_px)
        anchors = attach_anchor_points(labeling, tree)
        systems = build_cloud_systems(labeling, anchors, cfg.merge_radius_km)
        network = None
        if systems:
            used = frozenset().union(*(s.anchors for s in systems))
            network = to_measure_network(tree, anchor_filter=used)
    except TopoTrackError as e:
        raise StageError(f"frame {t}: {e}") from e

    log.info(
        "frame %d: %d tree nodes (zone %d px), %d objects, %d systems",
        t, len(tree), zone_threshold, len(labeling), len(systems),
    )
    return FrameResult(t, tree, zone_threshold, labeling, systems, network)


def _match(selection: Optional[MassSelection], a: FrameResult, b: FrameResult, r: float) -> PairMatching:
    if selection is None:
        return empty_matching()
    return track_pair(
        selection.result.coupling.matrix,
        a.systems,
        b.systems,
        a.network.node_ids,
        b.network.node_ids,
        r,
    )


def process_pair(a: FrameResult, b: FrameResult, cfg: RunConfig) -> PairResult:
    t = a.time_index
    if a.network is None or b.network is None:
        log.info("pair %d->%d: skipped, a frame has no systems", t, t + 1)
        return PairResult(t, None, empty_matching())
    try:
        selection = auto_select_mass(
            a.network,
            b.network,
            cfg.alpha,
            cfg.match_limit_km,
            m_range=cfg.m_range,
            step=cfg.m_step,
            q=cfg.q,
            mass_epsilon=cfg.mass_epsilon,
            max_iter=cfg.max_iter,
            normalize=cfg.normalize,
        )
        matching = _match(selection, a, b, cfg.r)
    except TopoTrackError as e:
        raise StageError(f"pair {t}->{t + 1}: {e}") from e

    log.info(
        "pair %d->%d: m=%.2f, %d valid links, %d main matches",
        t, t + 1, selection.m, len(matching.valid), len(matching.main),
    )
    return PairResult(t, selection, matching)


def _map(fn: Callable, jobs: int, *iterables: Iterable) -> list:
    if jobs <= 1:
        return list(map(fn, *iterables))
    # loky workers, results in input order
    return Parallel(n_jobs=jobs)(delayed(fn)(*args) for args in zip(*iterables))


def _matched_table(frames: List[FrameResult], pairs: List[PairResult], mass_epsilon: float) -> pd.DataFrame:
    parts = []
    for p in pairs:
        if p.selection is None:
            continue
        a, b = frames[p.time_index].network, frames[p.time_index + 1].network
        parts.append(
            matched_distances(
                p.time_index,
                p.selection.result.coupling.matrix,
                a.node_ids,
                b.node_ids,
                a.locations_km,
                b.locations_km,
                mass_epsilon,
            )
        )
    if not parts:
        return pd.DataFrame(columns=MATCHED_DISTANCE_COLUMNS)
    return pd.concat(parts, ignore_index=True)


def _summarize(
    cfg: RunConfig,
    frames: List[FrameResult],
    pairs: List[PairResult],
    matchings: List[PairMatching],
    interval_minutes: float,
) -> tuple[TrajectorySet, StatsReport]:
    trajset = assemble_trajectories(matchings, [[s.system_id for s in f.systems] for f in frames])
    index = [{s.system_id: s for s in f.systems} for f in frames]
    stats = summarize_run(
        trajset,
        index,
        interval_minutes,
        matched=_matched_table(frames, pairs, cfg.mass_epsilon),
        match_limit_km=cfg.match_limit_km,
    )
    return trajset, stats


def run_pipeline(cfg: RunConfig, jobs: int = 1, seq: Optional[FieldSequence] = None) -> RunResult:
    """
    Frames are processed independently, then each adjacent pair; both stages run on
    `jobs` worker processes and keep input order. Assembly and metrics are sequential.
    """
    if seq is None:
        seq = load_sequence(cfg.input_dir, cfg.interval_minutes)
    log.debug("run config: %s", cfg.model_dump(mode="json"))

    frames = _map(partial(process_frame, cfg=cfg), jobs, seq.fields)
    pairs = _map(partial(process_pair, cfg=cfg), jobs, frames[:-1], frames[1:])

    trajset, stats = _summarize(cfg, frames, pairs, [p.matching for p in pairs], seq.interval_minutes)
    return RunResult(cfg, frames, pairs, trajset, stats)


DEFAULT_R_SWEEP = (0.1, 0.15, 0.2, 0.25, 0.3)

R_SWEEP_COLUMNS = [
    "r",
    "main_trajectories",
    "secondary_links",
    "merge_events",
    "split_events",
    "timespan_median_minutes",
    "timespan_mean_minutes",
    "timespan_iqr_minutes",
]


def r_sensitivity(result: RunResult, values: Iterable[float] = DEFAULT_R_SWEEP) -> pd.DataFrame:
    """
    Re-track a finished run for each relative threshold `r`, reusing its couplings,
    and compare the resulting timespan distributions.
    """
    interval = result.stats.filters["interval_minutes"]
    rows = []
    for r in values:
        try:
            matchings = [
                _match(p.selection, result.frames[p.time_index], result.frames[p.time_index + 1], r)
                for p in result.pairs
            ]
        except TopoTrackError as e:
            raise StageError(f"r={r}: {e}") from e
        trajset, stats = _summarize(result.config, result.frames, result.pairs, matchings, interval)
        span = stats.aggregates["timespan_minutes"]
        rows.append(
            {
                "r": r,
                "main_trajectories": stats.counts["main_trajectories"],
                "secondary_links": stats.counts["secondary_links"],
                "merge_events": stats.counts["merge_events"],
                "split_events": stats.counts["split_events"],
                "timespan_median_minutes": span["median"],
                "timespan_mean_minutes": span["mean"],
                "timespan_iqr_minutes": span["iqr"],
            }
        )
        log.info("r=%.2f: %d main trajectories", r, stats.counts["main_trajectories"])
    return pd.DataFrame(rows, columns=R_SWEEP_COLUMNS)
