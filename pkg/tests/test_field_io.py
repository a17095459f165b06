import numpy as np
import pytest

from app.field_io import (
    FieldFormatError,
    FieldSequence,
    LabelMapError,
    ScenarioError,
    generate_synthetic,
    load_scenario,
    load_sequence,
    read_grid,
    read_label_map,
    write_grid,
    write_label_map,
    write_sequence,
)
from conftest import make_field


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_read_grid_header_and_missing(tmp_path):
    p = _write(tmp_path / "a.grid", "3 2 1.0 2.0 2024-06-01T12:00\n1 2 NA\n0 4.5 3\n")
    fld = read_grid(p, time_index=4)
    assert fld.values.shape == (2, 3)
    assert fld.spacing_km == (1.0, 2.0)
    assert fld.timestamp == "2024-06-01T12:00"
    assert fld.time_index == 4
    assert np.isnan(fld.values[0, 2])
    assert fld.filled()[0, 2] == 0.0
    assert fld.values[1, 1] == 4.5


def test_read_grid_reports_line_of_bad_row(tmp_path):
    p = _write(tmp_path / "a.grid", "2 2 1 1\n1 2\n3\n")
    with pytest.raises(FieldFormatError, match=r"a\.grid:3:"):
        read_grid(p)


@pytest.mark.parametrize("token", ["-1", "inf", "abc"])
def test_read_grid_rejects_bad_values(tmp_path, token):
    p = _write(tmp_path / "a.grid", f"2 1 1 1\n1 {token}\n")
    with pytest.raises(FieldFormatError, match=r":2:"):
        read_grid(p)


def test_read_grid_rejects_row_count(tmp_path):
    p = _write(tmp_path / "a.grid", "2 3 1 1\n1 2\n3 4\n")
    with pytest.raises(FieldFormatError, match="expected 3 rows"):
        read_grid(p)


def test_write_grid_preserves_values(tmp_path):
    vals = np.array([[0.1, np.nan, 1e-12], [3.0, 2.0 / 3.0, 7.25]])
    fld = make_field(vals, spacing=(0.5, 0.75))
    write_grid(fld, tmp_path / "out" / "f.grid")
    back = read_grid(tmp_path / "out" / "f.grid")
    np.testing.assert_array_equal(back.values, fld.values)
    assert back.spacing_km == (0.5, 0.75)


def test_load_sequence_orders_by_filename(tmp_path):
    _write(tmp_path / "b.grid", "1 1 1 1\n2\n")
    _write(tmp_path / "a.grid", "1 1 1 1\n1\n")
    _write(tmp_path / "notes.txt", "ignored\n")
    seq = load_sequence(tmp_path, interval_minutes=15)
    assert len(seq) == 2
    assert [f.values[0, 0] for f in seq] == [1.0, 2.0]
    assert [f.time_index for f in seq] == [0, 1]
    assert seq.sources == ("a.grid", "b.grid")


def test_load_sequence_names_mismatched_file(tmp_path):
    _write(tmp_path / "a.grid", "1 1 1 1\n1\n")
    _write(tmp_path / "b.grid", "2 1 1 1\n1 1\n")
    with pytest.raises(FieldFormatError, match="b.grid"):
        load_sequence(tmp_path, 15)


def test_load_sequence_needs_files(tmp_path):
    with pytest.raises(FieldFormatError):
        load_sequence(tmp_path, 15)
    with pytest.raises(FieldFormatError):
        load_sequence(tmp_path / "missing", 15)


def test_sequence_rejects_shape_change():
    with pytest.raises(FieldFormatError):
        FieldSequence((make_field([[1.0]]), make_field([[1.0, 2.0]], t=1)), 15.0)


def test_field_validation():
    with pytest.raises(FieldFormatError):
        make_field([[1.0, -0.5]])
    with pytest.raises(FieldFormatError):
        make_field([[1.0]], spacing=(0.0, 1.0))
    fld = make_field([[1.0]])
    with pytest.raises(ValueError):
        fld.values[0, 0] = 2.0


def test_label_map_written_as_16_bit_pgm(tmp_path):
    grid = np.array([[0, 1, 2], [300, 0, 65535]])
    path = tmp_path / "labels" / "l.pgm"
    write_label_map(grid, path)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n3 2\n65535\n")
    assert len(raw) == len(b"P5\n3 2\n65535\n") + 2 * grid.size
    np.testing.assert_array_equal(read_label_map(path), grid)


def test_label_map_rejects_overflow(tmp_path):
    with pytest.raises(LabelMapError):
        write_label_map(np.array([[70000]]), tmp_path / "l.pgm")


def _scenario(**kw):
    doc = {
        "width_px": 16,
        "height_px": 12,
        "frames": 3,
        "blobs": [{"amplitude": 5.0, "width_km": 2.0, "centers": [[4, 6], [6, 6], [8, 6]]}],
    }
    doc.update(kw)
    return doc


def test_generate_synthetic_peaks_follow_centers():
    seq = generate_synthetic(_scenario())
    assert len(seq) == 3
    for t, fld in enumerate(seq):
        row, col = np.unravel_index(np.argmax(fld.values), fld.values.shape)
        assert (col, row) == (4 + 2 * t, 6)
        assert fld.values[row, col] == pytest.approx(5.0)


def test_generate_synthetic_static_blob_and_noise_are_deterministic():
    doc = _scenario(noise_amplitude=0.1, seed=3)
    doc["blobs"][0]["centers"] = [[8, 6]]
    a, b = generate_synthetic(doc), generate_synthetic(doc)
    for fa, fb in zip(a, b):
        np.testing.assert_array_equal(fa.values, fb.values)
    assert not np.array_equal(a[0].values, a[1].values)


def test_scenario_validation(tmp_path):
    with pytest.raises(ScenarioError):
        generate_synthetic(_scenario(frames=2))
    p = _write(tmp_path / "s.json", "{not json")
    with pytest.raises(ScenarioError):
        load_scenario(p)


def test_write_sequence_round_trip_names(tmp_path):
    seq = generate_synthetic(_scenario())
    paths = write_sequence(seq, tmp_path / "frames")
    assert [p.name for p in paths] == ["frame_000.grid", "frame_001.grid", "frame_002.grid"]
    back = load_sequence(tmp_path / "frames", 15)
    np.testing.assert_array_equal(back[2].values, seq[2].values)


@pytest.mark.parametrize(
    "raw",
    [b"", b"P5\n4 4\n", b"P5\n2 2\n65535\n\x00\x01", b"P5\n1 1\n255\n\x07"],
)
def test_label_map_rejects_broken_files(tmp_path, raw):
    path = tmp_path / "broken.pgm"
    path.write_bytes(raw)
    with pytest.raises(LabelMapError):
        read_label_map(path)


def test_label_map_header_comments(tmp_path):
    path = tmp_path / "hand.pgm"
    path.write_bytes(b"P5\n# written by hand\n2 1\n65535\n" + np.array([1, 300], dtype=">u2").tobytes())
    np.testing.assert_array_equal(read_label_map(path), [[1, 300]])
