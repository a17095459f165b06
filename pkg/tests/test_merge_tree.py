import numpy as np
import pytest
from scipy import ndimage

from app.merge_tree import (
    MergeTreeError,
    NodeKind,
    auto_simplify,
    build_merge_tree,
    dump_tree,
    simplify_by_zone_area,
    superlevel_component_count,
    sweep_order,
)
from conftest import make_field

ROW = [[9.0, 5.0, 8.0, 3.0, 7.0, 1.0]]


def _values(tree, ids):
    return sorted(tree.value(n) for n in ids)


def test_row_profile_tree():
    tree, zones = build_merge_tree(make_field(ROW))
    tree.validate()
    assert len(tree) == 6
    assert _values(tree, tree.maxima()) == [7.0, 8.0, 9.0]
    assert tree.value(tree.root_id) == 1.0

    by_value = {node.value: nid for nid, node in tree.nodes.items()}
    children = tree.children()
    assert _values(tree, children[by_value[5.0]]) == [8.0, 9.0]
    assert _values(tree, children[by_value[3.0]]) == [5.0, 7.0]
    assert children[tree.root_id] == [by_value[3.0]]
    assert tree.nodes[by_value[3.0]].kind == NodeKind.SADDLE

    assert zones.total_area == 6
    assert zones.zone_area[by_value[3.0]] == 2
    assert zones.edge_of[0, 5] == by_value[3.0]


def test_sweep_order_breaks_ties_by_index():
    vals = np.array([[1.0, 2.0], [2.0, np.nan]])
    assert sweep_order(vals).tolist() == [1, 2, 0]


def test_plateau_has_single_maximum():
    tree, zones = build_merge_tree(make_field(np.ones((3, 3))))
    assert len(tree.maxima()) == 1
    assert tree.nodes[tree.maxima()[0]].location == (0, 0)
    assert zones.total_area == 9


@pytest.mark.parametrize("seed", range(200))
def test_component_counts_match_flood_fill(seed):
    vals = np.random.default_rng(seed).random((16, 16))
    tree, _ = build_merge_tree(make_field(vals))
    tree.validate()
    structure = np.ones((3, 3), dtype=bool)
    for level in np.unique(vals):
        _, expected = ndimage.label(vals >= level, structure=structure)
        assert superlevel_component_count(tree, level) == expected


def test_zone_map_covers_every_valid_pixel(rng):
    vals = rng.random((10, 9))
    vals[3, 4] = np.nan
    tree, zones = build_merge_tree(make_field(vals))
    assert zones.edge_of[3, 4] == -1
    assert zones.total_area == vals.size - 1
    valid = zones.edge_of[zones.edge_of >= 0]
    assert set(np.unique(valid)) <= set(tree.nodes) - {tree.root_id}


def test_build_rejects_degenerate_fields():
    with pytest.raises(MergeTreeError):
        build_merge_tree(make_field([[np.nan, np.nan]]))
    with pytest.raises(MergeTreeError):
        build_merge_tree(make_field([[3.0]]))


def test_zero_threshold_keeps_tree():
    tree, zones = build_merge_tree(make_field(ROW))
    t2, z2 = simplify_by_zone_area(tree, zones, 0)
    assert t2 is tree and z2 is zones


def test_simplification_keeps_last_leaf_and_area():
    tree, zones = build_merge_tree(make_field(ROW))
    t2, z2 = simplify_by_zone_area(tree, zones, 1000)
    t2.validate()
    assert len(t2) == 2
    assert len(t2.maxima()) == 1
    assert z2.total_area == zones.total_area
    (leaf,) = t2.maxima()
    assert set(np.unique(z2.edge_of)) == {leaf}


def test_simplification_removes_small_branches_only(rng):
    vals = rng.random((20, 20))
    tree, zones = build_merge_tree(make_field(vals))
    sizes = [len(simplify_by_zone_area(tree, zones, thr)[0]) for thr in (0, 2, 5, 10, 40)]
    assert sizes == sorted(sizes, reverse=True)

    t2, z2 = simplify_by_zone_area(tree, zones, 5)
    t2.validate()
    assert set(t2.nodes) <= set(tree.nodes)
    assert z2.total_area == zones.total_area
    for n in t2.leaves():
        if n != t2.root_id and len(t2.maxima()) > 1:
            assert z2.zone_area[n] >= 5
    valid = z2.edge_of[z2.edge_of >= 0]
    for n in np.unique(valid):
        assert z2.zone_area[int(n)] == int((valid == n).sum())


def test_auto_simplify_meets_node_cap(rng):
    vals = rng.random((20, 20))
    tree, zones = build_merge_tree(make_field(vals))
    small, _, threshold = auto_simplify(tree, zones, node_cap=10, step=5)
    assert len(small) < 10
    assert threshold > 0 and threshold % 5 == 0

    same, _, zero = auto_simplify(tree, zones, node_cap=len(tree) + 1)
    assert zero == 0 and same is tree


def test_auto_simplify_fails_when_cap_unreachable(rng):
    tree, zones = build_merge_tree(make_field(rng.random((4, 4))))
    with pytest.raises(MergeTreeError, match="cannot bring"):
        auto_simplify(tree, zones, node_cap=2, step=5)


def test_dump_tree(tmp_path):
    tree, _ = build_merge_tree(make_field(ROW))
    path = tmp_path / "dumps" / "tree.txt"
    dump_tree(tree, path)
    lines = path.read_text().splitlines()
    assert len(lines) == len(tree)
    root_line = lines[tree.root_id].split()
    assert root_line[1] == "root" and root_line[-1] == "-1"


def _sweep_maxima(vals):
    """(col, row) of every pixel no 8-neighbor precedes in the sweep."""
    h, w = vals.shape
    out = set()
    for r in range(h):
        for c in range(w):
            p, v = r * w + c, vals[r, c]
            precede = False
            for rr in range(max(r - 1, 0), min(r + 2, h)):
                for cc in range(max(c - 1, 0), min(c + 2, w)):
                    q = rr * w + cc
                    if q != p and (vals[rr, cc] > v or (vals[rr, cc] == v and q < p)):
                        precede = True
            if not precede:
                out.add((c, r))
    return out


@pytest.mark.parametrize("seed", range(200))
def test_maxima_on_plateaus_match_sweep_order(seed):
    vals = np.random.default_rng(seed).integers(0, 4, (16, 16)).astype(float)
    tree, _ = build_merge_tree(make_field(vals))
    tree.validate()
    assert {tree.nodes[n].location for n in tree.maxima()} == _sweep_maxima(vals)
    assert {tree.nodes[n].location for n in tree.leaves()} == _sweep_maxima(vals)


def _greedy_simplify(tree, zones, thr):
    """Naive leaf removal: smallest (area, id) leaf below `thr` first, one at a time."""
    parent = dict(tree.parent)
    area = dict(zones.zone_area)
    root = tree.root_id
    while True:
        inner = set(parent.values())
        leaves = [n for n in area if n not in inner]
        small = [n for n in leaves if area[n] < thr]
        if not small or len(leaves) <= 1:
            return parent, area
        leaf = min(small, key=lambda n: (area[n], n))
        p = parent.pop(leaf)
        removed = area.pop(leaf)
        rest = [c for c, q in parent.items() if q == p]
        if p != root and len(rest) == 1:
            (target,) = rest
            parent[target] = parent.pop(p)
            area[target] += removed + area.pop(p)
        elif p != root:
            area[p] += removed
        else:
            area[max(rest, key=lambda n: (area[n], -n))] += removed


@pytest.mark.parametrize("seed", range(200))
def test_simplification_matches_greedy_leaf_removal(seed):
    vals = np.random.default_rng(seed).random((16, 16))
    tree, zones = build_merge_tree(make_field(vals))
    parent, area = _greedy_simplify(tree, zones, 4)

    t2, z2 = simplify_by_zone_area(tree, zones, 4)
    t2.validate()
    assert t2.parent == parent
    assert z2.zone_area == area
    assert set(t2.leaves()) == set(area) - set(parent.values())


def test_auto_simplify_folds_tiny_peaks_into_broad_one():
    rows, cols = np.indices((40, 40))
    vals = 100.0 - np.hypot(rows - 20, cols - 20)
    bumps = [(r, c) for r in range(2, 40, 4) for c in range(2, 40, 4) if np.hypot(r - 20, c - 20) >= 5][:50]
    for r, c in bumps:
        vals[r, c] += 3.0

    tree, zones = build_merge_tree(make_field(vals))
    assert len(tree.maxima()) == 51
    peaks = [n for n in tree.maxima() if tree.nodes[n].location != (20, 20)]
    assert all(zones.zone_area[n] == 1 for n in peaks)

    small, z2, threshold = auto_simplify(tree, zones, node_cap=3, step=5)
    assert threshold == 5
    (peak,) = small.maxima()
    assert small.nodes[peak].location == (20, 20)
    assert len(small) == 2
    assert z2.total_area == 40 * 40
