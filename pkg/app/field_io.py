# app/field_io.py
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from PIL import Image
from pydantic import ValidationError

from . import TopoTrackError
from .models import SyntheticSpec

log = logging.getLogger(__name__)

GRID_SUFFIX = ".grid"
MISSING_TOKEN = "NA"
PGM_MAXVAL = 65535


class FieldFormatError(TopoTrackError, ValueError):
    pass


class LabelMapError(TopoTrackError, ValueError):
    pass


class ScenarioError(TopoTrackError, ValueError):
    pass


# ---------------------------------------------
# Models
# ---------------------------------------------

@dataclass(frozen=True)
class ScalarField:
    """
    One time step of the tracked quantity on a regular grid.
    `values` is (height, width), row-major; NaN marks a missing pixel.
    """
    values: np.ndarray
    spacing_km: Tuple[float, float]
    time_index: int = 0
    timestamp: Optional[str] = None

    def __post_init__(self) -> None:
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.size == 0:
            raise FieldFormatError(f"field must be a non-empty 2D grid, got shape {vals.shape}")
        sx, sy = (float(s) for s in self.spacing_km)
        if sx <= 0 or sy <= 0:
            raise FieldFormatError(f"spacing_km must be positive, got {self.spacing_km}")
        present = vals[~np.isnan(vals)]
        if not np.all(np.isfinite(present)):
            raise FieldFormatError("field contains infinite values")
        if np.any(present < 0):
            raise FieldFormatError("field contains negative values")
        if self.time_index < 0:
            raise FieldFormatError("time_index must be >= 0")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "spacing_km", (sx, sy))

    @property
    def width_px(self) -> int:
        return self.values.shape[1]

    @property
    def height_px(self) -> int:
        return self.values.shape[0]

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    def filled(self) -> np.ndarray:
        """Values with missing pixels read as 0 (never above a detection threshold)."""
        return np.where(self.missing, 0.0, self.values)


@dataclass(frozen=True)
class FieldSequence:
    fields: Tuple[ScalarField, ...]
    interval_minutes: float
    sources: Tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        if not self.fields:
            raise FieldFormatError("sequence needs at least one field")
        if self.interval_minutes <= 0:
            raise FieldFormatError("interval_minutes must be > 0")
        first = self.fields[0]
        for t, f in enumerate(self.fields):
            if f.time_index != t:
                raise FieldFormatError(f"time_index {f.time_index} at position {t}")
            if f.values.shape != first.values.shape or f.spacing_km != first.spacing_km:
                name = self.sources[t] if t < len(self.sources) else f"frame {t}"
                raise FieldFormatError(
                    f"{name}: grid {f.width_px}x{f.height_px} @ {f.spacing_km} km differs from "
                    f"{first.width_px}x{first.height_px} @ {first.spacing_km} km"
                )

    def __len__(self) -> int:
        return len(self.fields)

    def __iter__(self):
        return iter(self.fields)

    def __getitem__(self, t: int) -> ScalarField:
        return self.fields[t]


# ---------------------------------------------
# Text grids
# ---------------------------------------------

def _parse_value(tok: str, path: str, line_no: int) -> float:
    if tok == MISSING_TOKEN:
        return np.nan
    try:
        v = float(tok)
    except ValueError:
        raise FieldFormatError(f"{path}:{line_no}: not a number: {tok!r}") from None
    if not np.isfinite(v):
        raise FieldFormatError(f"{path}:{line_no}: non-finite value {tok!r}")
    if v < 0:
        raise FieldFormatError(f"{path}:{line_no}: negative value {tok!r}")
    return v


def read_grid(path: Union[str, Path], time_index: int = 0) -> ScalarField:
    """
    Parse one `.grid` file:
      line 1: width height spacing_km_x spacing_km_y [timestamp]
      then `height` rows of `width` values, `NA` for missing.
    """
    path = str(path)
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()

    # skip trailing blank lines only; blank lines inside the grid are errors
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise FieldFormatError(f"{path}:1: empty file")

    head = lines[0].split()
    if len(head) not in (4, 5):
        raise FieldFormatError(
            f"{path}:1: header must be 'width height spacing_x spacing_y [timestamp]'"
        )
    try:
        width, height = int(head[0]), int(head[1])
        sx, sy = float(head[2]), float(head[3])
    except ValueError:
        raise FieldFormatError(f"{path}:1: malformed header {lines[0]!r}") from None
    if width <= 0 or height <= 0:
        raise FieldFormatError(f"{path}:1: width and height must be positive")
    if not (sx > 0 and sy > 0):
        raise FieldFormatError(f"{path}:1: spacing must be positive")
    timestamp = head[4] if len(head) == 5 else None

    rows = lines[1:]
    if len(rows) != height:
        raise FieldFormatError(f"{path}:{len(lines)}: expected {height} rows, found {len(rows)}")

    values = np.empty((height, width), dtype=np.float64)
    for r, line in enumerate(rows):
        line_no = r + 2
        toks = line.split()
        if len(toks) != width:
            raise FieldFormatError(f"{path}:{line_no}: expected {width} values, found {len(toks)}")
        values[r] = [_parse_value(tok, path, line_no) for tok in toks]

    return ScalarField(values=values, spacing_km=(sx, sy), time_index=time_index, timestamp=timestamp)


def write_grid(fld: ScalarField, path: Union[str, Path]) -> None:
    """Write a field so that read_grid returns it bit-for-bit."""
    sx, sy = fld.spacing_km
    header = [str(fld.width_px), str(fld.height_px), repr(sx), repr(sy)]
    if fld.timestamp:
        header.append(fld.timestamp)
    out = [" ".join(header)]
    for row in fld.values:
        out.append(" ".join(MISSING_TOKEN if np.isnan(v) else repr(float(v)) for v in row))
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(out) + "\n")


def load_sequence(directory_path: Union[str, Path], interval_minutes: float) -> FieldSequence:
    """Load every `.grid` file of a directory; filename order is time order."""
    directory = Path(directory_path)
    if not directory.is_dir():
        raise FieldFormatError(f"{directory}: not a directory")
    paths = sorted(p for p in directory.iterdir() if p.suffix == GRID_SUFFIX and p.is_file())
    if not paths:
        raise FieldFormatError(f"{directory}: no {GRID_SUFFIX} files")

    fields = []
    first: Optional[ScalarField] = None
    for t, p in enumerate(paths):
        fld = read_grid(p, time_index=t)
        if first is not None and (
            fld.values.shape != first.values.shape or fld.spacing_km != first.spacing_km
        ):
            raise FieldFormatError(
                f"{p}:1: grid {fld.width_px}x{fld.height_px} @ {fld.spacing_km} km does not match "
                f"{paths[0].name} ({first.width_px}x{first.height_px} @ {first.spacing_km} km)"
            )
        first = first or fld
        fields.append(fld)

    log.info("loaded %d frames (%dx%d) from %s", len(fields), first.width_px, first.height_px, directory)
    return FieldSequence(tuple(fields), float(interval_minutes), tuple(p.name for p in paths))


def write_sequence(seq: FieldSequence, directory: Union[str, Path], prefix: str = "frame") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digits = max(3, len(str(len(seq) - 1)))
    paths = []
    for fld in seq:
        p = directory / f"{prefix}_{fld.time_index:0{digits}d}{GRID_SUFFIX}"
        write_grid(fld, p)
        paths.append(p)
    return paths


# ---------------------------------------------
# Label maps (binary PGM, 16 bit)
# ---------------------------------------------

def check_label_grid(labels) -> np.ndarray:
    """2D integer grid of `labels` (array or anything with `label_grid`) within 16-bit range."""
    grid = np.asarray(getattr(labels, "label_grid", labels))
    if grid.ndim != 2:
        raise LabelMapError(f"label grid must be 2D, got shape {grid.shape}")
    if grid.size and (grid.min() < 0 or grid.max() > PGM_MAXVAL):
        raise LabelMapError(f"labels must lie in [0, {PGM_MAXVAL}], got max {grid.max()}")
    return grid


def write_label_map(labels, path: Union[str, Path]) -> None:
    """Write a label grid as binary PGM (P5, maxval 65535); 0 is background."""
    grid = check_label_grid(labels)
    _ensure_parent(path)
    # int32 grids open as mode "I", which the PPM writer stores as 16-bit big-endian P5
    Image.fromarray(grid.astype(np.int32)).save(path, format="PPM")


def read_label_map(path: Union[str, Path]) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.format != "PPM" or img.mode != "I":
                raise LabelMapError(f"{path}: not a 16-bit P5 label map")
            img.load()
            grid = np.asarray(img, dtype=np.int64)
    except LabelMapError:
        raise
    except (OSError, ValueError, SyntaxError) as e:
        raise LabelMapError(f"{path}: unreadable label map ({e})") from e
    return grid


# ---------------------------------------------
# Synthetic scenarios
# ---------------------------------------------

def load_scenario(path: Union[str, Path]) -> SyntheticSpec:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return SyntheticSpec.model_validate(json.load(f))
    except (ValidationError, json.JSONDecodeError) as e:
        raise ScenarioError(f"{path}: invalid scenario ({e})") from e


def generate_synthetic(scenario: SyntheticSpec) -> FieldSequence:
    """
    Sum of isotropic Gaussian blobs per frame:
      f_t(p) = sum_b amplitude_b * exp(-|p_km - center_b(t)|^2 / (2 width_b^2))
    with p_km = (col * spacing_x, row * spacing_y). Deterministic for a given scenario.
    """
    if isinstance(scenario, dict):
        try:
            scenario = SyntheticSpec.model_validate(scenario)
        except ValidationError as e:
            raise ScenarioError(f"invalid scenario ({e})") from e

    sx, sy = scenario.spacing_km
    xs = np.arange(scenario.width_px, dtype=np.float64) * sx
    ys = np.arange(scenario.height_px, dtype=np.float64) * sy
    gx, gy = np.meshgrid(xs, ys)
    rng = np.random.default_rng(scenario.seed)

    fields = []
    for t in range(scenario.frames):
        vals = np.zeros((scenario.height_px, scenario.width_px), dtype=np.float64)
        for blob in scenario.blobs:
            cx, cy = blob.centers[t] if len(blob.centers) > 1 else blob.centers[0]
            d2 = (gx - cx) ** 2 + (gy - cy) ** 2
            vals += blob.amplitude * np.exp(-d2 / (2.0 * blob.width_km ** 2))
        if scenario.noise_amplitude > 0:
            vals += scenario.noise_amplitude * rng.random(vals.shape)
        fields.append(ScalarField(values=vals, spacing_km=(sx, sy), time_index=t))

    return FieldSequence(tuple(fields), scenario.interval_minutes)


def _ensure_parent(path: Union[str, Path]) -> None:
    parent = os.path.dirname(str(path))
    if parent:
        os.makedirs(parent, exist_ok=True)

