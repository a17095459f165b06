# app/logger.py
import json
import logging
import os
from typing import Any, Dict, List, Optional

import pandas as pd

from .cloud_objects import objects_table, system_label_grid
from .config import config_echo
from .field_io import check_label_grid, write_label_map
from .merge_tree import dump_tree
from .pipeline import RunResult

log = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

TRAJECTORY_COLUMNS = [
    "trajectory_id",
    "kind",
    "time_index",
    "system_id",
    "centroid_x_km",
    "centroid_y_km",
    "area_px",
    "mean_value",
]
EVENT_COLUMNS = ["time_index", "kind", "from_ids", "to_ids"]
OBJECT_COLUMNS = [
    "time_index",
    "label",
    "area_px",
    "centroid_x_km",
    "centroid_y_km",
    "mean_value",
    "system_id",
]
COUPLING_COLUMNS = ["t", "node_id_t", "node_id_t1", "mass", "m", "within_limit"]


def setup_logging(level: str = "INFO") -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(level.upper())


def _ensure_dir(path: str) -> None:
    os.makedirs(path, exist_ok=True)


def _ids(ids) -> str:
    return " ".join(str(i) for i in ids)


def trajectories_frame(result: RunResult) -> pd.DataFrame:
    index = result.system_index()
    rows = []
    for traj in result.trajectories.trajectories:
        for t, sid in traj.entries:
            s = index[t][sid]
            rows.append(
                {
                    "trajectory_id": traj.trajectory_id,
                    "kind": traj.kind,
                    "time_index": t,
                    "system_id": sid,
                    "centroid_x_km": s.centroid_km[0],
                    "centroid_y_km": s.centroid_km[1],
                    "area_px": s.area_px,
                    "mean_value": s.mean_value,
                }
            )
    return pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)


def events_frame(result: RunResult) -> pd.DataFrame:
    rows = [
        {"time_index": e.time_index, "kind": e.kind, "from_ids": _ids(e.from_ids), "to_ids": _ids(e.to_ids)}
        for e in result.trajectories.events
    ]
    return pd.DataFrame(rows, columns=EVENT_COLUMNS)


def objects_frame(result: RunResult) -> pd.DataFrame:
    rows: List[Dict[str, Any]] = []
    for f in result.frames:
        rows.extend(objects_table(f.time_index, f.labeling, f.systems))
    return pd.DataFrame(rows, columns=OBJECT_COLUMNS)


def couplings_frame(result: RunResult, min_mass: float = 0.0) -> pd.DataFrame:
    """Nonzero coupling entries of every transition, keyed by tree node ids."""
    rows = []
    for pair in result.pairs:
        if pair.selection is None:
            continue
        src = result.frames[pair.time_index].network.node_ids
        dst = result.frames[pair.time_index + 1].network.node_ids
        C = pair.selection.result.coupling.matrix
        for i, j in zip(*C.nonzero()):
            if C[i, j] > min_mass:
                rows.append(
                    {
                        "t": pair.time_index,
                        "node_id_t": src[i],
                        "node_id_t1": dst[j],
                        "mass": float(C[i, j]),
                        "m": pair.selection.m,
                        "within_limit": pair.selection.within_limit,
                    }
                )
    return pd.DataFrame(rows, columns=COUPLING_COLUMNS)


def stats_document(result: RunResult) -> Dict[str, Any]:
    doc = result.stats.to_dict()
    doc["config"] = config_echo(result.config)
    doc["mass_selection"] = [
        {
            "time_index": p.time_index,
            "m": None if p.selection is None else p.selection.m,
            "within_limit": None if p.selection is None else p.selection.within_limit,
            "iterations": None if p.selection is None else p.selection.result.iterations,
            "distance_q": None if p.selection is None else p.selection.result.distance_q,
        }
        for p in result.pairs
    ]
    doc["zone_thresholds"] = [f.zone_threshold for f in result.frames]
    return doc


def write_run_artifacts(result: RunResult, output_dir: Optional[str] = None) -> List[str]:
    """
    Writes every artifact of a finished run into `output_dir` and returns the paths.
    Called once after all frames and pairs succeeded; label grids are range-checked
    before anything touches the disk.
    """
    out = str(output_dir or result.config.output_dir)
    cfg = result.config
    label_grids = [
        (
            fr.time_index,
            check_label_grid(fr.labeling),
            check_label_grid(system_label_grid(fr.labeling, fr.systems)),
        )
        for fr in result.frames
    ]

    _ensure_dir(out)
    written: List[str] = []

    def csv(df: pd.DataFrame, name: str) -> None:
        path = os.path.join(out, name)
        df.to_csv(path, index=False)
        written.append(path)

    csv(trajectories_frame(result), "trajectories.csv")
    csv(events_frame(result), "events.csv")
    csv(objects_frame(result), "objects.csv")
    csv(result.stats.per_trajectory, "per_trajectory.csv")
    csv(result.stats.histogram, "timespan_histogram.csv")
    csv(result.stats.matched, "matched_distances.csv")
    csv(result.stats.distance_bins, "matched_distance_histogram.csv")
    if cfg.dump_couplings:
        csv(couplings_frame(result), "couplings.csv")

    for name, doc in (("stats.json", stats_document(result)), ("config.json", config_echo(cfg))):
        path = os.path.join(out, name)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
        written.append(path)

    labels_dir = os.path.join(out, "labels")
    for t, objects, systems in label_grids:
        obj_path = os.path.join(labels_dir, f"objects_{t:03d}.pgm")
        sys_path = os.path.join(labels_dir, f"systems_{t:03d}.pgm")
        write_label_map(objects, obj_path)
        write_label_map(systems, sys_path)
        written.extend([obj_path, sys_path])

    if cfg.dump_trees:
        for fr in result.frames:
            tree_path = os.path.join(out, "trees", f"tree_{fr.time_index:03d}.txt")
            dump_tree(fr.tree, tree_path)
            written.append(tree_path)

    log.info("wrote %d artifacts to %s", len(written), out)
    return written
