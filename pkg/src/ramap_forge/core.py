"""Shared domain types: grid geometry, annotations, class catalog, rasters, RNG."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class RadarGeometry:
    """Range-azimuth grid. Bin ``i`` is centred at ``(i + 0.5) * delta_r``;
    azimuth bins cover ``[-theta_max, theta_max)`` uniformly."""

    n_range: int = 128
    n_azimuth: int = 128
    r_max: float = 25.0
    theta_max: float = math.pi / 3

    def __post_init__(self):
        if int(self.n_range) != self.n_range or self.n_range < 1:
            raise DomainError(f"n_range must be a positive integer, got {self.n_range}")
        if int(self.n_azimuth) != self.n_azimuth or self.n_azimuth < 1:
            raise DomainError(f"n_azimuth must be a positive integer, got {self.n_azimuth}")
        if not (math.isfinite(self.r_max) and self.r_max > 0):
            raise DomainError(f"r_max must be > 0, got {self.r_max}")
        if not (0 < self.theta_max <= math.pi / 2):
            raise DomainError(f"theta_max must lie in (0, pi/2], got {self.theta_max}")
        # raster headers store f32; snapping here keeps file round-trips exact
        object.__setattr__(self, "r_max", float(np.float32(self.r_max)))
        object.__setattr__(self, "theta_max", float(np.float32(self.theta_max)))

    @property
    def delta_r(self) -> float:
        return self.r_max / self.n_range

    @property
    def delta_theta(self) -> float:
        return 2.0 * self.theta_max / self.n_azimuth

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_range, self.n_azimuth)

    def range_center(self, i):
        return (np.asarray(i) + 0.5) * self.delta_r

    def azimuth_center(self, j):
        return -self.theta_max + (np.asarray(j) + 0.5) * self.delta_theta

    def range_axis(self) -> np.ndarray:
        return self.range_center(np.arange(self.n_range))

    def azimuth_axis(self) -> np.ndarray:
        return self.azimuth_center(np.arange(self.n_azimuth))


def _nearest(u: float, n: int) -> int:
    # centres sit at k + 0.5, so round-half-up of (u - 0.5) is floor(u)
    k = math.floor(u)
    return min(max(k, 0), n - 1)


def bin_of(geometry: RadarGeometry, range_m: float, azimuth: float) -> tuple[int, int]:
    """Nearest (range_bin, azimuth_bin) for a polar position, ties rounding up."""
    if not (0.0 <= range_m <= geometry.r_max):
        raise DomainError(f"range={range_m} outside [0, {geometry.r_max}]")
    if not (-geometry.theta_max <= azimuth <= geometry.theta_max):
        raise DomainError(f"azimuth={azimuth} outside [-{geometry.theta_max}, {geometry.theta_max}]")
    u_r = range_m * geometry.n_range / geometry.r_max
    u_a = (azimuth + geometry.theta_max) * geometry.n_azimuth / (2.0 * geometry.theta_max)
    return _nearest(u_r, geometry.n_range), _nearest(u_a, geometry.n_azimuth)


@dataclass(frozen=True)
class Annotation:
    range: float
    azimuth: float
    class_id: int


@dataclass(frozen=True)
class ObjectClass:
    name: str
    extent_range: float
    extent_azimuth: float
    occlusion: float
    kappa: float

    def __post_init__(self):
        if self.extent_range <= 0 or self.extent_azimuth <= 0:
            raise DomainError(f"class {self.name!r}: extents must be > 0")
        if not (0 < self.occlusion <= 1):
            raise DomainError(f"class {self.name!r}: occlusion coefficient must lie in (0, 1]")
        if self.kappa <= 0:
            raise DomainError(f"class {self.name!r}: kappa must be > 0")


DEFAULT_CLASSES = (
    ObjectClass("pedestrian", extent_range=0.5, extent_azimuth=0.6, occlusion=0.8, kappa=0.05),
    ObjectClass("cyclist", extent_range=1.8, extent_azimuth=0.6, occlusion=0.7, kappa=0.08),
    ObjectClass("car", extent_range=4.0, extent_azimuth=1.8, occlusion=0.5, kappa=0.12),
)


@dataclass(frozen=True)
class ClassCatalog:
    classes: tuple[ObjectClass, ...] = DEFAULT_CLASSES

    def __post_init__(self):
        if len(self.classes) < 1:
            raise DomainError("catalog needs at least one class")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise DomainError(f"duplicate class names in catalog: {names}")

    def __len__(self):
        return len(self.classes)

    def __getitem__(self, class_id: int) -> ObjectClass:
        return self.classes[class_id]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DomainError(f"unknown class {name!r}; catalog has {self.names}") from None


def check_annotation(ann: Annotation, geometry: RadarGeometry, catalog: ClassCatalog) -> None:
    if not (0 < ann.range <= geometry.r_max):
        raise DomainError(f"range={ann.range} outside (0, {geometry.r_max}]")
    if not (-geometry.theta_max <= ann.azimuth <= geometry.theta_max):
        raise DomainError(f"azimuth={ann.azimuth} outside +-{geometry.theta_max}")
    if not (0 <= ann.class_id < len(catalog)):
        raise DomainError(f"class_id={ann.class_id} not in catalog of size {len(catalog)}")


@dataclass
class RAMap:
    grid: np.ndarray
    geometry: RadarGeometry
    raw_max_amplitude: float = 1.0

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.shape != self.geometry.shape:
            raise DomainError(f"grid shape {self.grid.shape} != geometry {self.geometry.shape}")
        if not np.all(np.isfinite(self.grid)) or self.grid.min(initial=0) < 0 or self.grid.max(initial=0) > 1:
            raise DomainError("RAMap cells must be finite and lie in [0, 1]")


@dataclass
class ConfMap:
    channels: np.ndarray
    geometry: RadarGeometry

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 3 or self.channels.shape[1:] != self.geometry.shape:
            raise DomainError(f"channels shape {self.channels.shape} incompatible with {self.geometry.shape}")
        if not np.all(np.isfinite(self.channels)) or self.channels.min(initial=0) < 0 or self.channels.max(initial=0) > 1:
            raise DomainError("ConfMap cells must be finite and lie in [0, 1]")

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    def collapsed(self) -> np.ndarray:
        """Class-agnostic amplitude: channel sum clamped to 1."""
        return np.minimum(self.channels.sum(axis=0), 1.0)


@dataclass
class SeededRng:
    """Deterministic numpy stream with explicit splitting for parallel workers."""

    seed: int | np.random.SeedSequence = 0
    _seq: np.random.SeedSequence = field(init=False, repr=False)
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if isinstance(self.seed, np.random.SeedSequence):
            self._seq = self.seed
        else:
            self._seq = np.random.SeedSequence(int(self.seed) & 0xFFFFFFFFFFFFFFFF)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    def split(self, n: int) -> list["SeededRng"]:
        return [SeededRng(s) for s in self._seq.spawn(n)]

    def restart(self) -> "SeededRng":
        """A new stream replaying this one's outputs from the beginning."""
        return SeededRng(np.random.SeedSequence(self._seq.entropy, spawn_key=self._seq.spawn_key))

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def choice(self, a, size=None, p=None, replace=True):
        return self.generator.choice(a, size=size, p=p, replace=replace)

    def permutation(self, x):
        return self.generator.permutation(x)
