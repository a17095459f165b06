# app/cloud_objects.py
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Dict, FrozenSet, Iterable, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import TopoTrackError
from .field_io import ScalarField
from .merge_tree import MergeTree

log = logging.getLogger(__name__)

Connectivity = Literal[4, 8]

# sensitivity sweep grid used for the marine regime
DEFAULT_SWEEP = tuple(np.round(np.arange(0.5, 5.0 + 1e-9, 0.5), 2))


class CloudObjectError(TopoTrackError, ValueError):
    pass


class AnchorError(TopoTrackError, RuntimeError):
    pass


# ---------------------------------------------
# Models
# ---------------------------------------------

@dataclass(frozen=True, eq=False)
class CloudObject:
    label: int
    area_px: int
    centroid_km: Tuple[float, float]
    mean_value: float
    pixels: np.ndarray          # flat (row-major) indices, ascending


@dataclass(frozen=True, eq=False)
class CloudObjectLabeling:
    label_grid: np.ndarray      # 0 = background, objects 1..K
    objects: Tuple[CloudObject, ...]
    spacing_km: Tuple[float, float]
    threshold: float
    connectivity: int = 8

    def __len__(self) -> int:
        return len(self.objects)

    def areas(self) -> Dict[int, int]:
        return {o.label: o.area_px for o in self.objects}


@dataclass(frozen=True)
class CloudSystem:
    system_id: int
    member_labels: Tuple[int, ...]
    anchors: FrozenSet[int]
    area_px: int
    centroid_km: Tuple[float, float]
    mean_value: float


# ---------------------------------------------
# Detection
# ---------------------------------------------

def _structure(connectivity: int) -> np.ndarray:
    if connectivity not in (4, 8):
        raise CloudObjectError(f"connectivity must be 4 or 8, got {connectivity}")
    return ndimage.generate_binary_structure(2, 2 if connectivity == 8 else 1)


def _objects_from_grid(
    grid: np.ndarray, values: np.ndarray, spacing_km: Tuple[float, float]
) -> Tuple[CloudObject, ...]:
    k = int(grid.max()) if grid.size else 0
    if k == 0:
        return ()
    w = grid.shape[1]
    sx, sy = spacing_km
    flat = grid.ravel()
    order = np.argsort(flat, kind="stable")
    ends = np.cumsum(np.bincount(flat, minlength=k + 1))
    vals = values.ravel()

    objects = []
    for label in range(1, k + 1):
        pixels = order[ends[label - 1]:ends[label]]
        rows, cols = np.divmod(pixels, w)
        objects.append(
            CloudObject(
                label=label,
                area_px=int(pixels.size),
                centroid_km=(float(cols.mean() * sx), float(rows.mean() * sy)),
                mean_value=float(vals[pixels].mean()),
                pixels=pixels,
            )
        )
    return tuple(objects)


def detect_objects(
    fld: ScalarField, threshold: float, connectivity: Connectivity = 8
) -> CloudObjectLabeling:
    """Label the connected components of the superlevel set {f >= threshold}."""
    if threshold <= 0:
        raise CloudObjectError(f"detection threshold must be > 0, got {threshold}")
    values = fld.filled()
    grid, k = ndimage.label(values >= threshold, structure=_structure(connectivity))
    grid = grid.astype(np.int64)
    objects = _objects_from_grid(grid, values, fld.spacing_km)
    log.debug("frame %d: %d objects at threshold %.3g", fld.time_index, k, threshold)
    return CloudObjectLabeling(grid, objects, fld.spacing_km, float(threshold), connectivity)


def filter_small_objects(labeling: CloudObjectLabeling, min_area_px: int) -> CloudObjectLabeling:
    """Drop objects smaller than `min_area_px` pixels and renumber the rest 1..K'."""
    if min_area_px < 0:
        raise CloudObjectError("min_area_px must be >= 0")
    keep = [o for o in labeling.objects if o.area_px >= min_area_px]
    if len(keep) == len(labeling.objects):
        return labeling

    lut = np.zeros(len(labeling.objects) + 1, dtype=np.int64)
    objects = []
    for new_label, obj in enumerate(keep, start=1):
        lut[obj.label] = new_label
        objects.append(replace(obj, label=new_label))
    return replace(labeling, label_grid=lut[labeling.label_grid], objects=tuple(objects))


# ---------------------------------------------
# Anchor points and systems
# ---------------------------------------------

def attach_anchor_points(
    labeling: CloudObjectLabeling, tree: MergeTree
) -> Dict[int, FrozenSet[int]]:
    """Assign every tree maximum to the object whose pixels contain it."""
    grid = labeling.label_grid
    found: Dict[int, set] = {o.label: set() for o in labeling.objects}
    for nid in tree.maxima():
        col, row = tree.nodes[nid].location
        label = int(grid[row, col])
        if label:
            found[label].add(nid)

    empty = sorted(label for label, s in found.items() if not s)
    if empty:
        raise AnchorError(
            f"objects {empty} contain no merge-tree maximum after simplification; "
            "lower the zone simplification threshold"
        )
    return {label: frozenset(s) for label, s in found.items()}


def _boundary_mask(grid: np.ndarray) -> np.ndarray:
    pad = np.pad(grid, 1, constant_values=-1)
    center = pad[1:-1, 1:-1]
    differs = (
        (pad[:-2, 1:-1] != center)
        | (pad[2:, 1:-1] != center)
        | (pad[1:-1, :-2] != center)
        | (pad[1:-1, 2:] != center)
    )
    return (center > 0) & differs


def object_links(labeling: CloudObjectLabeling, merge_radius_km: float) -> List[Tuple[int, int]]:
    """
    Pairs of object labels whose nearest pixel centers lie within `merge_radius_km`.
    Only boundary pixels can realize the nearest distance between two objects.
    """
    if merge_radius_km <= 0 or len(labeling) < 2:
        return []
    grid = labeling.label_grid
    rows, cols = np.nonzero(_boundary_mask(grid))
    sx, sy = labeling.spacing_km
    coords = np.column_stack([cols * sx, rows * sy])
    labels = grid[rows, cols]

    pairs = cKDTree(coords).query_pairs(r=merge_radius_km + 1e-9, output_type="ndarray")
    if pairs.size == 0:
        return []
    a, b = labels[pairs[:, 0]], labels[pairs[:, 1]]
    cross = a != b
    lo, hi = np.minimum(a[cross], b[cross]), np.maximum(a[cross], b[cross])
    return sorted({(int(u), int(v)) for u, v in zip(lo, hi)})


def build_cloud_systems(
    labeling: CloudObjectLabeling,
    anchors: Mapping[int, FrozenSet[int]],
    merge_radius_km: float = 4.0,
) -> List[CloudSystem]:
    """Group objects closer than `merge_radius_km` (transitively) into systems."""
    if merge_radius_km < 0:
        raise CloudObjectError("merge_radius_km must be >= 0")
    k = len(labeling)
    if k == 0:
        return []

    links = object_links(labeling, merge_radius_km)
    if links:
        u = np.array([a for a, _ in links]) - 1
        v = np.array([b for _, b in links]) - 1
        graph = coo_matrix((np.ones(len(links)), (u, v)), shape=(k, k))
        _, comp = connected_components(graph, directed=False)
    else:
        comp = np.arange(k)

    members: Dict[int, List[int]] = {}
    for idx, c in enumerate(comp):
        members.setdefault(int(c), []).append(idx + 1)

    by_label = {o.label: o for o in labeling.objects}
    systems = []
    for sid, labels in enumerate(sorted(members.values(), key=min), start=1):
        objs = [by_label[label] for label in labels]
        area = sum(o.area_px for o in objs)
        cx = sum(o.area_px * o.centroid_km[0] for o in objs) / area
        cy = sum(o.area_px * o.centroid_km[1] for o in objs) / area
        mean = sum(o.area_px * o.mean_value for o in objs) / area
        pts = frozenset().union(*(anchors.get(label, frozenset()) for label in labels))
        if not pts:
            raise AnchorError(f"cloud system of objects {labels} has no anchor point")
        systems.append(
            CloudSystem(
                system_id=sid,
                member_labels=tuple(labels),
                anchors=pts,
                area_px=area,
                centroid_km=(cx, cy),
                mean_value=mean,
            )
        )
    log.debug("%d objects -> %d systems (radius %.3g km)", k, len(systems), merge_radius_km)
    return systems


def system_label_grid(labeling: CloudObjectLabeling, systems: Sequence[CloudSystem]) -> np.ndarray:
    lut = np.zeros(len(labeling) + 1, dtype=np.int64)
    for s in systems:
        lut[list(s.member_labels)] = s.system_id
    return lut[labeling.label_grid]


def objects_table(
    time_index: int, labeling: CloudObjectLabeling, systems: Sequence[CloudSystem]
) -> List[dict]:
    system_of = {label: s.system_id for s in systems for label in s.member_labels}
    return [
        {
            "time_index": time_index,
            "label": o.label,
            "area_px": o.area_px,
            "centroid_x_km": o.centroid_km[0],
            "centroid_y_km": o.centroid_km[1],
            "mean_value": o.mean_value,
            "system_id": system_of.get(o.label, 0),
        }
        for o in labeling.objects
    ]


# ---------------------------------------------
# Threshold sensitivity
# ---------------------------------------------

def threshold_sensitivity(
    fields: Iterable[ScalarField],
    thresholds: Optional[Sequence[float]] = None,
    min_area_px: int = 10,
    connectivity: Connectivity = 8,
) -> pd.DataFrame:
    """
    For each candidate threshold, pool the objects of all frames and report how many
    there are, how much area they cover, and which share of both the objects below
    `min_area_px` account for.
    """
    thresholds = list(thresholds if thresholds is not None else DEFAULT_SWEEP)
    fields = list(fields)
    rows = []
    for a in thresholds:
        areas = np.array(
            [o.area_px for fld in fields for o in detect_objects(fld, a, connectivity).objects],
            dtype=np.int64,
        )
        total = int(areas.sum())
        small = areas < min_area_px
        rows.append(
            {
                "threshold": float(a),
                "n_objects": int(areas.size),
                "total_area_px": total,
                "share_objects_small": float(small.mean()) if areas.size else 0.0,
                "share_area_small": float(areas[small].sum() / total) if total else 0.0,
                "median_area_px": float(np.median(areas)) if areas.size else 0.0,
            }
        )
    return pd.DataFrame(rows)
