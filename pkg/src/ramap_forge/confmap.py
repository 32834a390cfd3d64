"""Per-object Gaussian footprints and their rasterization into class channels."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import Annotation, ClassCatalog, ConfMap, RadarGeometry, bin_of, check_annotation
from .errors import DomainError

TRUNCATE_SIGMAS = 3.0


@dataclass(frozen=True)
class GaussianFootprint:
    i: int
    j: int
    sigma_r: float
    sigma_theta: float
    peak: float = 1.0
    class_id: int = 0

    def __post_init__(self):
        for name in ("sigma_r", "sigma_theta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise DomainError(f"{name} must be finite and > 0, got {v}")
        if not (0 < self.peak <= 1):
            raise DomainError(f"peak must lie in (0, 1], got {self.peak}")

    def with_peak(self, peak: float) -> "GaussianFootprint":
        return replace(self, peak=peak)


def footprint_of(ann: Annotation, catalog: ClassCatalog, geometry: RadarGeometry) -> GaussianFootprint:
    """Centre bins plus range/azimuth spreads (in bins) from the class extents."""
    if ann.range == 0:
        raise DomainError("range=0: azimuth spread is singular")
    check_annotation(ann, geometry, catalog)
    cls = catalog[ann.class_id]
    i, j = bin_of(geometry, ann.range, ann.azimuth)
    sigma_r = cls.extent_range / geometry.delta_r
    sigma_theta = math.atan(cls.extent_azimuth / (2.0 * ann.range)) / geometry.delta_theta
    return GaussianFootprint(i, j, sigma_r, sigma_theta, 1.0, ann.class_id)


def footprint_patch(fp: GaussianFootprint, geometry: RadarGeometry):
    """Return ``(row_slice, col_slice, values)`` of one footprint inside the 3-sigma box."""
    hr = math.floor(TRUNCATE_SIGMAS * fp.sigma_r)
    ha = math.floor(TRUNCATE_SIGMAS * fp.sigma_theta)
    r0, r1 = max(fp.i - hr, 0), min(fp.i + hr, geometry.n_range - 1)
    a0, a1 = max(fp.j - ha, 0), min(fp.j + ha, geometry.n_azimuth - 1)
    di = np.arange(r0, r1 + 1) - fp.i
    dj = np.arange(a0, a1 + 1) - fp.j
    values = fp.peak * np.exp(-(di[:, None] ** 2) / (2 * fp.sigma_r ** 2)
                              - (dj[None, :] ** 2) / (2 * fp.sigma_theta ** 2))
    return slice(r0, r1 + 1), slice(a0, a1 + 1), values


def rasterize_channel(footprints, geometry: RadarGeometry) -> np.ndarray:
    """Sum footprints into one channel, then clamp to 1."""
    out = np.zeros(geometry.shape)
    # fixed summation order makes the result independent of input order
    for fp in sorted(footprints, key=lambda f: (f.i, f.j, f.sigma_r, f.sigma_theta, f.peak)):
        rs, cs, vals = footprint_patch(fp, geometry)
        out[rs, cs] += vals
    return np.minimum(out, 1.0)


def rasterize(footprints_per_class, geometry: RadarGeometry) -> ConfMap:
    """Build a ConfMap from a sequence (one entry per class) of footprint lists."""
    channels = np.stack([rasterize_channel(fps, geometry) for fps in footprints_per_class]) \
        if len(footprints_per_class) else np.zeros((0,) + geometry.shape)
    return ConfMap(channels, geometry)


def group_by_class(footprints, n_classes: int) -> list[list[GaussianFootprint]]:
    groups = [[] for _ in range(n_classes)]
    for fp in footprints:
        groups[fp.class_id].append(fp)
    return groups
