import numpy as np
import pytest

from app.cloud_objects import (
    AnchorError,
    CloudObjectError,
    attach_anchor_points,
    build_cloud_systems,
    detect_objects,
    filter_small_objects,
    object_links,
    objects_table,
    system_label_grid,
    threshold_sensitivity,
)
from app.merge_tree import build_merge_tree, simplify_by_zone_area
from conftest import make_field


def _row(values, spacing=(1.0, 1.0)):
    return make_field([values], spacing=spacing)


def test_detect_objects_areas_and_centroids():
    vals = np.zeros((5, 6))
    vals[1:3, 1:3] = 4.0
    vals[4, 5] = 2.0
    lab = detect_objects(make_field(vals, spacing=(2.0, 1.0)), threshold=2.0)
    assert len(lab) == 2
    first, second = lab.objects
    assert (first.label, first.area_px) == (1, 4)
    assert first.centroid_km == pytest.approx((3.0, 1.5))
    assert first.mean_value == pytest.approx(4.0)
    assert second.area_px == 1
    assert lab.label_grid[4, 5] == 2
    assert lab.label_grid[0, 0] == 0


def test_connectivity_controls_diagonal_contact():
    vals = np.array([[3.0, 0.0], [0.0, 3.0]])
    assert len(detect_objects(make_field(vals), 1.0, connectivity=8)) == 1
    assert len(detect_objects(make_field(vals), 1.0, connectivity=4)) == 2


def test_detect_rejects_bad_parameters():
    with pytest.raises(CloudObjectError):
        detect_objects(_row([1.0]), 0.0)
    with pytest.raises(CloudObjectError):
        detect_objects(_row([1.0]), 1.0, connectivity=6)


def test_missing_pixels_never_detected():
    lab = detect_objects(_row([5.0, np.nan, 5.0]), 1.0)
    assert len(lab) == 2


def test_filter_small_objects_renumbers():
    lab = detect_objects(_row([3, 0, 3, 3, 3, 0, 3, 3]), 1.0)
    assert [o.area_px for o in lab.objects] == [1, 3, 2]
    kept = filter_small_objects(lab, 2)
    assert [(o.label, o.area_px) for o in kept.objects] == [(1, 3), (2, 2)]
    assert kept.label_grid.tolist() == [[0, 0, 1, 1, 1, 0, 2, 2]]
    assert filter_small_objects(lab, 0) is lab


def test_anchor_points_land_in_their_objects():
    fld = _row([1, 6, 2, 0.5, 3, 8, 4])
    tree, _ = build_merge_tree(fld)
    lab = detect_objects(fld, 1.5)
    anchors = attach_anchor_points(lab, tree)
    assert set(anchors) == {1, 2}
    for label, nodes in anchors.items():
        for nid in nodes:
            col, row = tree.nodes[nid].location
            assert lab.label_grid[row, col] == label
    assert {tree.value(n) for n in anchors[1]} == {6.0}
    assert {tree.value(n) for n in anchors[2]} == {8.0}


def test_object_without_maximum_raises():
    fld = _row([1, 6, 2, 0.5, 3, 8, 4])
    tree, zones = build_merge_tree(fld)
    tree, _ = simplify_by_zone_area(tree, zones, 1000)
    with pytest.raises(AnchorError, match="zone simplification"):
        attach_anchor_points(detect_objects(fld, 1.5), tree)


def _three_objects():
    # objects at cols 0-1, 5-6 and 11: 4 km apart, then 5 km apart
    vals = [2, 2, 0, 0, 0, 2, 2, 0, 0, 0, 0, 2]
    lab = detect_objects(_row(vals), 1.0)
    anchors = {1: frozenset({10}), 2: frozenset({11}), 3: frozenset({12})}
    return lab, anchors


def test_object_links_use_nearest_pixels():
    lab, _ = _three_objects()
    assert object_links(lab, 4.0) == [(1, 2)]
    assert object_links(lab, 3.9) == []
    assert object_links(lab, 5.0) == [(1, 2), (2, 3)]


def test_systems_group_objects_within_radius():
    lab, anchors = _three_objects()
    systems = build_cloud_systems(lab, anchors, 4.0)
    assert [s.member_labels for s in systems] == [(1, 2), (3,)]
    first = systems[0]
    assert first.system_id == 1
    assert first.anchors == frozenset({10, 11})
    assert first.area_px == 4
    assert first.centroid_km == pytest.approx((3.0, 0.0))
    grid = system_label_grid(lab, systems)
    assert grid.tolist() == [[1, 1, 0, 0, 0, 1, 1, 0, 0, 0, 0, 2]]


def test_systems_are_transitive():
    lab, anchors = _three_objects()
    systems = build_cloud_systems(lab, anchors, 5.0)
    assert len(systems) == 1
    assert systems[0].member_labels == (1, 2, 3)
    assert systems[0].anchors == frozenset({10, 11, 12})


def test_spacing_scales_distances():
    lab = detect_objects(_row([2, 0, 0, 2], spacing=(2.0, 2.0)), 1.0)
    anchors = {1: frozenset({1}), 2: frozenset({2})}
    assert len(build_cloud_systems(lab, anchors, 4.0)) == 2
    assert len(build_cloud_systems(lab, anchors, 5.9)) == 2
    assert len(build_cloud_systems(lab, anchors, 6.0)) == 1


def test_objects_table_rows():
    lab, anchors = _three_objects()
    systems = build_cloud_systems(lab, anchors, 4.0)
    rows = objects_table(7, lab, systems)
    assert [r["system_id"] for r in rows] == [1, 1, 2]
    assert all(r["time_index"] == 7 for r in rows)


def test_threshold_sensitivity_table():
    fld = _row([1, 1, 3, 3, 3, 0, 5, 0, 0, 2])
    table = threshold_sensitivity([fld], thresholds=[1.0, 3.0], min_area_px=2)
    first, second = table.to_dict("records")
    assert first["n_objects"] == 3
    assert first["total_area_px"] == 7
    assert first["share_objects_small"] == pytest.approx(2 / 3)
    assert first["share_area_small"] == pytest.approx(2 / 7)
    assert first["median_area_px"] == 1.0
    assert second["n_objects"] == 2
    assert second["total_area_px"] == 4
    assert second["share_objects_small"] == 0.5
    assert second["median_area_px"] == 2.0
