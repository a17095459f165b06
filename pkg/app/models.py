from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class BlobSpec(BaseModel):
    amplitude: float
    width_km: float
    centers: list[tuple[float, float]]   # km, one per frame (or one for a static blob)

    @field_validator("amplitude", "width_km")
    @classmethod
    def _positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("must be > 0")
        return v

    @field_validator("centers")
    @classmethod
    def _some_centers(cls, v: list) -> list:
        if not v:
            raise ValueError("blob needs at least one center")
        return v


class SyntheticSpec(BaseModel):
    width_px: int = Field(gt=0)
    height_px: int = Field(gt=0)
    spacing_km: tuple[float, float] = (1.0, 1.0)
    frames: int = Field(gt=0)
    interval_minutes: float = Field(default=15.0, gt=0)
    blobs: list[BlobSpec] = []
    noise_amplitude: float = Field(default=0.0, ge=0)
    seed: int = 0

    @field_validator("spacing_km")
    @classmethod
    def _spacing(cls, v: tuple[float, float]) -> tuple[float, float]:
        if v[0] <= 0 or v[1] <= 0:
            raise ValueError("spacing components must be > 0")
        return v

    @model_validator(mode="after")
    def _centers_per_frame(self) -> "SyntheticSpec":
        for i, blob in enumerate(self.blobs):
            if len(blob.centers) not in (1, self.frames):
                raise ValueError(
                    f"blob {i}: expected 1 or {self.frames} centers, got {len(blob.centers)}"
                )
        return self


class RunConfig(BaseModel):
    """Every knob of one tracking run. Ranges follow the owning modules."""

    model_config = ConfigDict(extra="forbid")

    input_dir: Path
    output_dir: Path
    interval_minutes: float = Field(gt=0)
    detection_threshold: float = Field(gt=0)
    connectivity: Literal[4, 8] = 8
    min_area_px: int = Field(default=0, ge=0)
    zone_node_cap: int = Field(default=5000, ge=2)
    zone_step: int = Field(default=5, gt=0)
    min_zone_px: Optional[int] = Field(default=None, ge=0)   # fixed threshold, skips auto search
    merge_radius_km: float = Field(default=4.0, ge=0)
    alpha: float = Field(ge=0, le=1)
    q: int = Field(default=2, ge=1)
    m_range: tuple[float, float] = (0.6, 0.9)
    m_step: float = Field(default=0.05, gt=0)
    max_match_km: Optional[float] = Field(default=None, gt=0)
    speed_limit_m_per_s: Optional[float] = Field(default=None, gt=0)
    mass_epsilon: float = Field(default=1e-6, gt=0)
    normalize: bool = False
    max_iter: int = Field(default=200, gt=0)
    r: float = Field(default=0.1, gt=0, le=1)
    seed: int = 0
    dump_couplings: bool = False
    dump_trees: bool = False

    @field_validator("m_range")
    @classmethod
    def _m_range(cls, v: tuple[float, float]) -> tuple[float, float]:
        lo, hi = v
        if not (0 < lo <= hi <= 1):
            raise ValueError("m_range must satisfy 0 < low <= high <= 1")
        return v

    @model_validator(mode="after")
    def _one_distance_limit(self) -> "RunConfig":
        if (self.max_match_km is None) == (self.speed_limit_m_per_s is None):
            raise ValueError("give exactly one of max_match_km / speed_limit_m_per_s")
        return self

    @property
    def match_limit_km(self) -> float:
        if self.max_match_km is not None:
            return self.max_match_km
        return speed_to_km(self.speed_limit_m_per_s, self.interval_minutes)


def speed_to_km(speed_m_per_s: float, interval_minutes: float) -> float:
    """Distance covered at `speed_m_per_s` during one frame interval."""
    return speed_m_per_s * interval_minutes * 60.0 / 1000.0
