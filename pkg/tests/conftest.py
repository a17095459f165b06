from __future__ import annotations

from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
import pytest

from app.cloud_objects import CloudSystem
from app.field_io import ScalarField
from app.merge_tree import MergeTree, NodeKind, TreeNode


def make_field(values, spacing=(1.0, 1.0), t: int = 0) -> ScalarField:
    return ScalarField(values=np.asarray(values, dtype=np.float64), spacing_km=spacing, time_index=t)


def make_tree(
    rows: Iterable[Tuple[int, float, Optional[int], Tuple[int, int]]],
    spacing=(1.0, 1.0),
) -> MergeTree:
    """rows: (node_id, value, parent_id or None for the root, (col, row))."""
    rows = list(rows)
    has_child = {p for _, _, p, _ in rows if p is not None}
    nodes, parent, root = {}, {}, None
    for nid, value, p, loc in rows:
        if p is None:
            kind, root = NodeKind.ROOT, nid
        elif nid in has_child:
            kind = NodeKind.SADDLE
        else:
            kind = NodeKind.MAXIMUM
        nodes[nid] = TreeNode(nid, kind, float(value), loc)
        if p is not None:
            parent[nid] = p
    tree = MergeTree(nodes, parent, root, spacing)
    tree.validate()
    return tree


def make_system(
    sid: int,
    anchors: Sequence[int],
    area: int = 10,
    centroid=(0.0, 0.0),
    mean: float = 1.0,
) -> CloudSystem:
    return CloudSystem(sid, (sid,), frozenset(anchors), area, tuple(centroid), mean)


# two trees that agree on eight nodes; the first carries an extra branch (nodes 9, 10)
# placed far from everything else
SEPARATION_KM = 50

TREE_A_SPEC = [
    (1, 0.0, None, (0, 0)),
    (2, 2.0, 1, (SEPARATION_KM, 0)),
    (3, 3.0, 2, (2 * SEPARATION_KM, 0)),
    (4, 4.0, 2, (3 * SEPARATION_KM, 0)),
    (5, 5.0, 4, (4 * SEPARATION_KM, 0)),
    (6, 6.0, 4, (5 * SEPARATION_KM, 0)),
    (7, 7.0, 6, (6 * SEPARATION_KM, 0)),
    (8, 8.0, 9, (7 * SEPARATION_KM, 0)),
    (9, 6.5, 6, (0, 4 * SEPARATION_KM)),
    (10, 10.0, 9, (2 * SEPARATION_KM, 4 * SEPARATION_KM)),
]
TREE_B_SPEC = [
    row if row[0] != 8 else (8, 8.0, 6, (7 * SEPARATION_KM, 0))
    for row in TREE_A_SPEC
    if row[0] not in (9, 10)
]


@pytest.fixture
def nested_trees():
    return make_tree(TREE_A_SPEC), make_tree(TREE_B_SPEC)


# one source system of three anchors splitting into two target systems of two anchors each
SPLIT_COUPLING = np.array(
    [
        [0.11, 0.03, 0.05, 0.06],
        [0.04, 0.02, 0.08, 0.03],
        [0.05, 0.02, 0.04, 0.06],
    ]
)
SPLIT_SOURCE_NODES = (11, 12, 13)
SPLIT_TARGET_NODES = (21, 22, 23, 24)


@pytest.fixture
def split_case():
    source = [make_system(1, SPLIT_SOURCE_NODES, area=120)]
    targets = [make_system(1, (21, 22), area=50), make_system(2, (23, 24), area=80)]
    return SPLIT_COUPLING, source, targets


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)
