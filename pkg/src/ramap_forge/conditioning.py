"""Geometry-aware amplitude correction of footprints and ConfMap assembly."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .confmap import footprint_of, group_by_class, rasterize
from .core import Annotation, ClassCatalog, ConfMap, RadarGeometry
from .errors import DomainError

# angles are compared in degrees; geometry limits are stored as float32
ANGLE_TOL_DEG = 1e-5


@dataclass(frozen=True)
class GacConfig:
    """Distance reference, antenna model and occlusion window.

    ``antenna_table`` (pairs of ``(angle_deg, linear_gain)``) overrides the
    ``cos(theta) ** cos_power`` model when given.
    """

    r_ref: float = 5.0
    cos_power: float = 2.0
    antenna_table: tuple[tuple[float, float], ...] | None = None
    occlusion_window: float = math.radians(5.0)
    enabled: bool = True

    def __post_init__(self):
        if not self.r_ref > 0:
            raise DomainError(f"r_ref must be > 0, got {self.r_ref}")
        if self.cos_power < 0:
            raise DomainError(f"cos_power must be >= 0, got {self.cos_power}")
        if not self.occlusion_window > 0:
            raise DomainError("occlusion_window must be > 0")
        if self.antenna_table is not None:
            table = tuple((float(a), float(g)) for a, g in self.antenna_table)
            if len(table) < 2:
                raise DomainError("antenna table needs at least two entries")
            angles = [a for a, _ in table]
            if any(b <= a for a, b in zip(angles, angles[1:])):
                raise DomainError("antenna table must be sorted by strictly increasing angle")
            if any(not (0 < g <= 1) for _, g in table):
                raise DomainError("antenna table gains must lie in (0, 1]")
            object.__setattr__(self, "antenna_table", table)

    def check_coverage(self, geometry: RadarGeometry) -> None:
        if self.antenna_table is None:
            return
        lo, hi = self.antenna_table[0][0], self.antenna_table[-1][0]
        span = math.degrees(geometry.theta_max)
        if lo > -span + ANGLE_TOL_DEG or hi < span - ANGLE_TOL_DEG:
            raise DomainError(f"antenna table covers [{lo}, {hi}] deg, field of view is +-{span:.4f} deg")


def distance_attenuation(r: float, config: GacConfig) -> float:
    if not r > 0:
        raise DomainError(f"range must be > 0, got {r}")
    return min(1.0, (config.r_ref / r) ** 2)


def antenna_gain(theta: float, config: GacConfig) -> float:
    if config.antenna_table is None:
        if abs(theta) > math.pi / 2:
            raise DomainError(f"theta={theta} beyond +-90 deg")
        return math.cos(theta) ** config.cos_power
    deg = math.degrees(theta)
    angles = [a for a, _ in config.antenna_table]
    gains = [g for _, g in config.antenna_table]
    if deg < angles[0] - ANGLE_TOL_DEG or deg > angles[-1] + ANGLE_TOL_DEG:
        raise DomainError(f"theta={deg:.4f} deg outside antenna table [{angles[0]}, {angles[-1]}]")
    return float(np.interp(deg, angles, gains))


def occlusion_factors(annotations, config: GacConfig, catalog: ClassCatalog) -> list[float]:
    """Product of occlusion coefficients of every nearer object inside the angular window."""
    factors = []
    for q in annotations:
        f = 1.0
        for p in annotations:
            if p.range < q.range and abs(p.azimuth - q.azimuth) < config.occlusion_window:
                f *= catalog[p.class_id].occlusion
        factors.append(f)
    return factors


def apply_gac(footprints, annotations, config: GacConfig, catalog: ClassCatalog):
    if len(footprints) != len(annotations):
        raise DomainError(f"{len(footprints)} footprints vs {len(annotations)} annotations")
    if not config.enabled:
        return [fp.with_peak(1.0) for fp in footprints]
    occ = occlusion_factors(annotations, config, catalog)
    out = []
    for fp, ann, a_occ in zip(footprints, annotations, occ):
        peak = distance_attenuation(ann.range, config) * antenna_gain(ann.azimuth, config) * a_occ
        out.append(fp.with_peak(peak))
    return out


def assemble(footprints, geometry: RadarGeometry, catalog: ClassCatalog) -> ConfMap:
    return rasterize(group_by_class(footprints, len(catalog)), geometry)


def build_confmap(annotations: list[Annotation], geometry: RadarGeometry, catalog: ClassCatalog,
                  config: GacConfig) -> ConfMap:
    """Annotations to a corrected multi-class ConfMap in one call."""
    fps = [footprint_of(a, catalog, geometry) for a in annotations]
    return assemble(apply_gac(fps, annotations, config, catalog), geometry, catalog)
