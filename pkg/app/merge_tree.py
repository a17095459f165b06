# app/merge_tree.py
from __future__ import annotations

import heapq
import logging
import os
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, List, Tuple, Union

import numpy as np

from . import TopoTrackError
from .field_io import ScalarField

log = logging.getLogger(__name__)


class MergeTreeError(TopoTrackError, ValueError):
    pass


class NodeKind(str, Enum):
    MAXIMUM = "maximum"
    SADDLE = "saddle"
    ROOT = "root"


# ---------------------------------------------
# Models
# ---------------------------------------------

@dataclass(frozen=True)
class TreeNode:
    node_id: int
    kind: NodeKind
    value: float
    location: Tuple[int, int]   # (col, row)


@dataclass(frozen=True, eq=False)
class MergeTree:
    """
    Merge tree of -f: leaves are maxima of f, the root is its global minimum.
    `parent` maps every non-root node to its parent; node ids are never reused, so
    simplified trees keep the ids of the nodes they retain.
    """
    nodes: Dict[int, TreeNode]
    parent: Dict[int, int]
    root_id: int
    spacing_km: Tuple[float, float] = (1.0, 1.0)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def edges(self) -> List[Tuple[int, int]]:
        return sorted(self.parent.items())

    def children(self) -> Dict[int, List[int]]:
        out: Dict[int, List[int]] = {n: [] for n in self.nodes}
        for c, p in sorted(self.parent.items()):
            out[p].append(c)
        return out

    def maxima(self) -> List[int]:
        return sorted(n for n, node in self.nodes.items() if node.kind == NodeKind.MAXIMUM)

    def leaves(self) -> List[int]:
        has_child = set(self.parent.values())
        return sorted(n for n in self.nodes if n not in has_child)

    def value(self, node_id: int) -> float:
        return self.nodes[node_id].value

    def validate(self) -> None:
        """Raise MergeTreeError unless this is a rooted tree with decreasing values."""
        if self.root_id not in self.nodes or self.root_id in self.parent:
            raise MergeTreeError("root missing or has a parent")
        if set(self.parent) != set(self.nodes) - {self.root_id}:
            raise MergeTreeError("every non-root node needs exactly one parent")
        for c, p in self.parent.items():
            if p not in self.nodes:
                raise MergeTreeError(f"edge {c}->{p} points outside the tree")
            if self.nodes[c].value < self.nodes[p].value:
                raise MergeTreeError(f"value increases along edge {c}->{p}")
        for leaf in self.leaves():
            if leaf != self.root_id and self.nodes[leaf].kind != NodeKind.MAXIMUM:
                raise MergeTreeError(f"leaf {leaf} is not a maximum")
        for n in self.nodes:
            seen, x = set(), n
            while x in self.parent:
                if x in seen:
                    raise MergeTreeError(f"cycle through node {x}")
                seen.add(x)
                x = self.parent[x]
            if x != self.root_id:
                raise MergeTreeError(f"node {n} does not reach the root")


@dataclass(frozen=True, eq=False)
class ZoneMap:
    """Topological zones: each valid pixel names the edge (by child node id) it belongs to."""
    edge_of: np.ndarray          # (height, width) int64, -1 on missing pixels
    zone_area: Dict[int, int]    # child node id -> pixel count

    @property
    def total_area(self) -> int:
        return int(sum(self.zone_area.values()))


# ---------------------------------------------
# Union-find
# ---------------------------------------------

class _DisjointSet:
    def __init__(self, n: int) -> None:
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, x: int) -> int:
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return ra


# ---------------------------------------------
# Construction
# ---------------------------------------------

def sweep_order(values: np.ndarray) -> np.ndarray:
    """
    Valid pixel indices in decreasing value order. Equal values are broken by
    row-major index, lower index first (treated as infinitesimally larger).
    """
    flat = values.ravel()
    idx = np.flatnonzero(~np.isnan(flat))
    return idx[np.lexsort((idx, -flat[idx]))]


def build_merge_tree(fld: ScalarField) -> Tuple[MergeTree, ZoneMap]:
    """
    Sweep pixels from high to low with union-find over the 8-neighborhood.
    A pixel touching no swept component starts a maximum, one touching several
    creates a saddle, and the last pixel closes the tree at the root.
    """
    h, w = fld.values.shape
    order = sweep_order(fld.values).tolist()
    if not order:
        raise MergeTreeError("field has no valid pixels")
    if len(order) < 2:
        raise MergeTreeError("field needs at least two valid pixels")

    flat = fld.values.ravel().tolist()
    seen = [False] * (h * w)
    ds = _DisjointSet(h * w)
    head: Dict[int, int] = {}      # component root pixel -> lowest node of the component
    edge_of = [-1] * (h * w)
    nodes: Dict[int, TreeNode] = {}
    parent: Dict[int, int] = {}

    def new_node(kind: NodeKind, pix: int) -> int:
        nid = len(nodes)
        nodes[nid] = TreeNode(nid, kind, flat[pix], (pix % w, pix // w))
        return nid

    for pix in order:
        r, c = divmod(pix, w)
        comps: List[int] = []
        for rr in (r - 1, r, r + 1):
            if rr < 0 or rr >= h:
                continue
            base = rr * w
            for cc in (c - 1, c, c + 1):
                if cc < 0 or cc >= w:
                    continue
                q = base + cc
                if seen[q]:
                    root = ds.find(q)
                    if root not in comps:
                        comps.append(root)
        seen[pix] = True

        if not comps:
            nid = new_node(NodeKind.MAXIMUM, pix)
            head[pix] = nid
            edge_of[pix] = nid
        elif len(comps) == 1:
            hd = head.pop(comps[0])
            head[ds.union(comps[0], pix)] = hd
            edge_of[pix] = hd
        else:
            nid = new_node(NodeKind.SADDLE, pix)
            root = pix
            for cr in comps:
                parent[head.pop(cr)] = nid
                root = ds.union(root, cr)
            head[root] = nid
            edge_of[pix] = nid

    # close the tree at the last (lowest) pixel
    last = order[-1]
    last_head = head.pop(ds.find(last))
    if nodes[last_head].location == (last % w, last // w):
        # the last pixel already made a node (a saddle, or an isolated maximum)
        root_id = last_head
        nodes[root_id] = replace(nodes[root_id], kind=NodeKind.ROOT)
    else:
        root_id = new_node(NodeKind.ROOT, last)
        parent[last_head] = root_id
    # components cut off from the rest by missing pixels hang directly off the root
    for hd in sorted(head.values()):
        parent[hd] = root_id

    root_children = sorted(c for c, p in parent.items() if p == root_id)
    if not root_children:
        raise MergeTreeError("field needs at least two valid pixels")
    if edge_of[last] == root_id:
        edge_of[last] = root_children[0]

    edge_arr = np.asarray(edge_of, dtype=np.int64).reshape(h, w)
    counts = np.bincount(edge_arr[edge_arr >= 0], minlength=len(nodes))
    zone_area = {n: int(counts[n]) for n in nodes if n != root_id}

    tree = MergeTree(nodes, parent, root_id, fld.spacing_km)
    log.debug(
        "merge tree: %d nodes (%d maxima) over %d pixels", len(nodes), len(tree.maxima()), len(order)
    )
    return tree, ZoneMap(edge_arr, zone_area)


# ---------------------------------------------
# Simplification
# ---------------------------------------------

def simplify_by_zone_area(
    tree: MergeTree, zones: ZoneMap, min_zone_px: int
) -> Tuple[MergeTree, ZoneMap]:
    """
    Remove leaves whose edge zone is smaller than `min_zone_px`, smallest zone first
    (ties by node id). A saddle left with one child is spliced out and the surviving
    branch absorbs both zones; the last leaf is never removed.
    """
    if min_zone_px < 0:
        raise MergeTreeError("min_zone_px must be >= 0")
    if min_zone_px == 0:
        return tree, zones

    root = tree.root_id
    parent = dict(tree.parent)
    children: Dict[int, set] = {n: set() for n in tree.nodes}
    for c, p in parent.items():
        children[p].add(c)
    area = {n: zones.zone_area.get(n, 0) for n in tree.nodes if n != root}
    alias: Dict[int, int] = {}
    alive = set(tree.nodes)
    leaves = {n for n in alive if not children[n] and n != root}

    heap = [(area[n], n) for n in leaves if area[n] < min_zone_px]
    heapq.heapify(heap)

    while heap:
        a, leaf = heapq.heappop(heap)
        if leaf not in leaves:
            continue
        if a != area[leaf]:
            # zone grew since this entry was pushed
            if area[leaf] < min_zone_px:
                heapq.heappush(heap, (area[leaf], leaf))
            continue
        if len(leaves) <= 1:
            break

        p = parent.pop(leaf)
        children[p].discard(leaf)
        del children[leaf]
        alive.discard(leaf)
        leaves.discard(leaf)
        removed = area.pop(leaf)

        if p != root and len(children[p]) == 1:
            (target,) = children[p]
            gp = parent.pop(p)
            children[gp].discard(p)
            children[gp].add(target)
            parent[target] = gp
            area[target] += removed + area.pop(p)
            alias[leaf] = alias[p] = target
            alive.discard(p)
            del children[p]
        elif p != root:
            target = p
            area[p] += removed
            alias[leaf] = p
        else:
            target = max(children[p], key=lambda n: (area[n], -n))
            area[target] += removed
            alias[leaf] = target

        if target in leaves and area[target] < min_zone_px:
            heapq.heappush(heap, (area[target], target))

    if not alias:
        return tree, zones

    lut = np.arange(max(tree.nodes) + 1, dtype=np.int64)
    for n in alias:
        x = n
        while x in alias:
            x = alias[x]
        lut[n] = x
    edge_of = zones.edge_of.copy()
    valid = edge_of >= 0
    edge_of[valid] = lut[edge_of[valid]]

    new_tree = MergeTree(
        {n: tree.nodes[n] for n in sorted(alive)},
        {c: parent[c] for c in sorted(parent)},
        root,
        tree.spacing_km,
    )
    new_zones = ZoneMap(edge_of, {n: area[n] for n in sorted(area)})
    log.debug(
        "zone simplification at %d px: %d -> %d nodes", min_zone_px, len(tree), len(new_tree)
    )
    return new_tree, new_zones


def auto_simplify(
    tree: MergeTree, zones: ZoneMap, node_cap: int = 5000, step: int = 5
) -> Tuple[MergeTree, ZoneMap, int]:
    """Raise the zone threshold by `step` from 0 until the tree has fewer than `node_cap` nodes."""
    if node_cap < 2:
        raise MergeTreeError("node_cap must be >= 2")
    if step <= 0:
        raise MergeTreeError("step must be > 0")

    threshold = 0
    while True:
        t, z = simplify_by_zone_area(tree, zones, threshold)
        if len(t) < node_cap:
            if threshold:
                log.info("auto simplification: threshold %d px, %d -> %d nodes", threshold, len(tree), len(t))
            return t, z, threshold
        if threshold > z.total_area:
            raise MergeTreeError(
                f"cannot bring the tree under {node_cap} nodes: fully simplified tree has {len(t)}"
            )
        threshold += step


def dump_tree(tree: MergeTree, path: Union[str, os.PathLike]) -> None:
    """One line per node: `node_id kind value col row parent_id` (-1 for the root)."""
    parent_dir = os.path.dirname(str(path))
    if parent_dir:
        os.makedirs(parent_dir, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for nid in sorted(tree.nodes):
            node = tree.nodes[nid]
            col, row = node.location
            f.write(
                f"{nid} {node.kind.value} {node.value!r} {col} {row} {tree.parent.get(nid, -1)}\n"
            )


def superlevel_component_count(tree: MergeTree, level: float) -> int:
    """Number of components of {f >= level}, read off the tree's edges."""
    count = sum(
        1 for c, p in tree.parent.items()
        if tree.nodes[c].value >= level > tree.nodes[p].value
    )
    if tree.nodes[tree.root_id].value >= level:
        count += 1
    return count
