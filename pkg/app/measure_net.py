# app/measure_net.py
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import AbstractSet, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import TopoTrackError
from .merge_tree import MergeTree

log = logging.getLogger(__name__)


class NetworkError(TopoTrackError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MeasureNetwork:
    """
    A merge tree seen as (nodes, p, W) with planar node locations in km.
    Only listed nodes carry mass; the rest of the tree shapes W.
    """
    node_ids: Tuple[int, ...]
    p: np.ndarray
    W: np.ndarray
    locations_km: np.ndarray    # (n, 2)

    def __len__(self) -> int:
        return len(self.node_ids)

    def index(self) -> Dict[int, int]:
        return {nid: i for i, nid in enumerate(self.node_ids)}


def uniform_mass(n: int) -> np.ndarray:
    """1/n each, the last entry absorbing rounding so the total is exactly 1."""
    p = np.full(n, 1.0 / n)
    p[-1] = 1.0 - p[:-1].sum()
    return p


def _ancestors(tree: MergeTree, node_id: int) -> List[int]:
    path = [node_id]
    while path[-1] in tree.parent:
        path.append(tree.parent[path[-1]])
    return path


def tree_distance(tree: MergeTree, u: int, v: int) -> float:
    """Length of the tree path u..v with edge weights |f(a) - f(b)|."""
    for nid in (u, v):
        if nid not in tree.nodes:
            raise NetworkError(f"node {nid} is not in the tree")
    up = _ancestors(tree, u)
    on_up = set(up)
    lca = next(x for x in _ancestors(tree, v) if x in on_up)
    f = tree.value
    return (f(u) - f(lca)) + (f(v) - f(lca))


def _postorder(tree: MergeTree) -> List[int]:
    children = tree.children()
    out, stack = [], [(tree.root_id, False)]
    while stack:
        nid, done = stack.pop()
        if done:
            out.append(nid)
            continue
        stack.append((nid, True))
        for c in reversed(children[nid]):
            stack.append((c, False))
    return out


def pairwise_tree_distances(tree: MergeTree, node_ids: Sequence[int]) -> np.ndarray:
    """
    All-pairs tree distances among `node_ids`. One bottom-up pass: two nodes first
    meet at their lowest common ancestor, whose value fixes f(lca).
    """
    index = {nid: i for i, nid in enumerate(node_ids)}
    if len(index) != len(node_ids):
        raise NetworkError("duplicate node ids")
    missing = [nid for nid in node_ids if nid not in tree.nodes]
    if missing:
        raise NetworkError(f"nodes {missing} are not in the tree")

    n = len(node_ids)
    meet = np.zeros((n, n), dtype=np.float64)
    children = tree.children()
    below: Dict[int, np.ndarray] = {}
    for nid in _postorder(tree):
        groups = [below.pop(c) for c in children[nid]]
        groups = [g for g in groups if g.size]
        if nid in index:
            groups.insert(0, np.array([index[nid]]))
        fv = tree.value(nid)
        for i in range(len(groups)):
            for j in range(i + 1, len(groups)):
                meet[np.ix_(groups[i], groups[j])] = fv
                meet[np.ix_(groups[j], groups[i])] = fv
        below[nid] = np.concatenate(groups) if groups else np.empty(0, dtype=np.int64)

    f = np.array([tree.value(nid) for nid in node_ids])
    W = f[:, None] + f[None, :] - 2.0 * meet
    np.fill_diagonal(W, 0.0)
    return W


def to_measure_network(
    tree: MergeTree,
    anchor_filter: Optional[AbstractSet[int]] = None,
    all_nodes: bool = False,
) -> MeasureNetwork:
    """
    Uniform mass on the tree's maxima (optionally only those in `anchor_filter`);
    `all_nodes` spreads it over every node instead.
    """
    if all_nodes:
        ids = sorted(tree.nodes)
    else:
        ids = tree.maxima()
    if anchor_filter is not None:
        ids = [nid for nid in ids if nid in anchor_filter]
    if not ids:
        raise NetworkError("tree has no maxima to carry mass")

    sx, sy = tree.spacing_km
    loc = np.array([tree.nodes[nid].location for nid in ids], dtype=np.float64)
    loc *= np.array([sx, sy])
    return MeasureNetwork(
        node_ids=tuple(ids),
        p=uniform_mass(len(ids)),
        W=pairwise_tree_distances(tree, ids),
        locations_km=loc,
    )
