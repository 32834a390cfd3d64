"""Synthetic scene oracle, frame manifests, train/test split and scene rebalancing."""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .conditioning import GacConfig, build_confmap
from .core import Annotation, ClassCatalog, ConfMap, RadarGeometry, RAMap, SeededRng
from .errors import DataError, DomainError, FormatError
from .formats import ingest_annotations  # noqa: F401  (re-exported)


@dataclass(frozen=True)
class SceneConfig:
    name: str
    min_objects: int = 1
    max_objects: int = 4
    class_probs: tuple[float, ...] = (0.5, 0.2, 0.3)
    speckle: float = 0.1
    clutter_blobs: int = 2
    clutter_amplitude: tuple[float, float] = (0.05, 0.25)
    clutter_sigma: tuple[float, float] = (1.0, 2.5)
    min_range: float = 1.0
    azimuth_fill: float = 0.9

    def __post_init__(self):
        if not (0 <= self.min_objects <= self.max_objects):
            raise DomainError(f"scene {self.name!r}: need 0 <= min_objects <= max_objects")
        p = np.asarray(self.class_probs, dtype=np.float64)
        if p.ndim != 1 or np.any(p < 0) or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
            raise DomainError(f"scene {self.name!r}: class probabilities must be >= 0 and sum to 1")
        if self.speckle < 0 or self.clutter_blobs < 0:
            raise DomainError(f"scene {self.name!r}: speckle and clutter count must be >= 0")
        if not (0 < self.azimuth_fill <= 1):
            raise DomainError(f"scene {self.name!r}: azimuth_fill must lie in (0, 1]")


DEFAULT_SCENES = (
    SceneConfig("parking_lot", 2, 5, (0.5, 0.2, 0.3)),
    SceneConfig("campus_road", 1, 4, (0.6, 0.3, 0.1)),
    SceneConfig("city_street", 2, 5, (0.3, 0.2, 0.5)),
    SceneConfig("highway", 1, 3, (0.05, 0.05, 0.9)),
)


def sample_annotations(scene: SceneConfig, geometry: RadarGeometry, catalog: ClassCatalog,
                       rng: SeededRng) -> list[Annotation]:
    """Objects placed at bin centres so peak read-outs are exact."""
    if len(scene.class_probs) != len(catalog):
        raise DomainError(f"scene {scene.name!r} has {len(scene.class_probs)} class probabilities, "
                          f"catalog has {len(catalog)} classes")
    n = int(rng.integers(scene.min_objects, scene.max_objects + 1))
    i_lo = min(int(math.floor(scene.min_range / geometry.delta_r)), geometry.n_range - 1)
    half = scene.azimuth_fill * geometry.n_azimuth / 2
    j_lo = int(math.ceil(geometry.n_azimuth / 2 - half))
    j_hi = max(int(math.floor(geometry.n_azimuth / 2 + half)) - 1, j_lo)
    anns = []
    for _ in range(n):
        c = int(rng.choice(len(catalog), p=scene.class_probs))
        i = int(rng.integers(i_lo, geometry.n_range))
        j = int(rng.integers(j_lo, j_hi + 1))
        anns.append(Annotation(float(geometry.range_center(i)), float(geometry.azimuth_center(j)), c))
    return anns


def render_clutter(scene: SceneConfig, geometry: RadarGeometry, rng: SeededRng) -> np.ndarray:
    out = np.zeros(geometry.shape)
    ii = np.arange(geometry.n_range)[:, None]
    jj = np.arange(geometry.n_azimuth)[None, :]
    for _ in range(scene.clutter_blobs):
        ci = rng.uniform(0, geometry.n_range)
        cj = rng.uniform(0, geometry.n_azimuth)
        amp = rng.uniform(*scene.clutter_amplitude)
        sr, sa = rng.uniform(*scene.clutter_sigma, size=2)
        out += amp * np.exp(-((ii - ci) ** 2) / (2 * sr * sr) - ((jj - cj) ** 2) / (2 * sa * sa))
    return out


def corrupt(clean: np.ndarray, scene: SceneConfig, geometry: RadarGeometry, rng: SeededRng) -> np.ndarray:
    """Multiplicative speckle plus class-less clutter, clamped to [0, 1]."""
    speckle = np.maximum(1.0 + scene.speckle * rng.normal(geometry.shape), 0.0)
    return np.clip(clean * speckle + render_clutter(scene, geometry, rng), 0.0, 1.0)


def simulate_frame(scene: SceneConfig, geometry: RadarGeometry, catalog: ClassCatalog, gac: GacConfig,
                   rng: SeededRng) -> tuple[list[Annotation], RAMap]:
    anns = sample_annotations(scene, geometry, catalog, rng)
    clean = build_confmap(anns, geometry, catalog, gac).collapsed()
    return anns, RAMap(corrupt(clean, scene, geometry, rng), geometry)


@dataclass
class OracleFrames:
    """Stacked arrays for in-memory experiments."""

    annotations: list[list[Annotation]]
    ramaps: np.ndarray        # (N, H, W) noisy ground truth
    clean: np.ndarray         # (N, H, W) noise-free rendering
    confmaps: np.ndarray      # (N, Nc, H, W) GAC-corrected conditioning
    flat_confmaps: np.ndarray  # (N, Nc, H, W) unit-peak conditioning
    scenes: list[str] = field(default_factory=list)


def simulate_frames(n: int, scenes, geometry: RadarGeometry, catalog: ClassCatalog, gac: GacConfig,
                    rng: SeededRng) -> OracleFrames:
    """``n`` frames cycling through ``scenes``, one child stream per frame."""
    scenes = list(scenes)
    streams = rng.split(n)
    anns_all, noisy, clean, conf, flat, names = [], [], [], [], [], []
    flat_gac = replace(gac, enabled=False)
    for k in range(n):
        scene = scenes[k % len(scenes)]
        frng = streams[k]
        anns = sample_annotations(scene, geometry, catalog, frng)
        cm = build_confmap(anns, geometry, catalog, gac)
        c = cm.collapsed()
        anns_all.append(anns)
        clean.append(c)
        noisy.append(corrupt(c, scene, geometry, frng))
        conf.append(cm.channels)
        flat.append(build_confmap(anns, geometry, catalog, flat_gac).channels)
        names.append(scene.name)
    shape = (0,) + geometry.shape
    cshape = (0, len(catalog)) + geometry.shape
    return OracleFrames(anns_all,
                        np.array(noisy) if n else np.zeros(shape),
                        np.array(clean) if n else np.zeros(shape),
                        np.array(conf) if n else np.zeros(cshape),
                        np.array(flat) if n else np.zeros(cshape),
                        names)


# --- manifests --------------------------------------------------------------

MANIFEST_HEADER = ["frame_id", "scene", "split", "annotation_path", "ramap_path", "confmap_path"]


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    scene: str
    split: str = "train"
    annotation_path: str = ""
    ramap_path: str = ""
    confmap_path: str = ""


@dataclass
class DatasetManifest:
    records: list[FrameRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def split(self, name: str) -> list[FrameRecord]:
        return [r for r in self.records if r.split == name]

    def scene_counts(self, split: str | None = None) -> Counter:
        return Counter(r.scene for r in self.records if split is None or r.split == split)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in self.records:
            writer.writerow([r.frame_id, r.scene, r.split, r.annotation_path, r.ramap_path, r.confmap_path])
        return out.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read(cls, path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != MANIFEST_HEADER:
                raise FormatError(f"{path}:1: expected header {MANIFEST_HEADER}, got {header}")
            records = []
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(MANIFEST_HEADER):
                    raise FormatError(f"{path}:{line_no}: expected {len(MANIFEST_HEADER)} fields")
                records.append(FrameRecord(*row))
        manifest = cls(records)
        if check_files:
            manifest.check_files(path.parent)
        return manifest

    def check_files(self, base) -> None:
        for r in self.records:
            for p in (r.annotation_path, r.ramap_path, r.confmap_path):
                if p and not (Path(base) / p).exists():
                    raise DataError(f"frame {r.frame_id}: missing file {p}")


def build_manifest(records, split_fraction: float, rng: SeededRng) -> DatasetManifest:
    """Shuffled train/test split that puts every scene with >= 2 frames into test."""
    if not (0 < split_fraction < 1):
        raise DomainError(f"split_fraction must lie in (0, 1), got {split_fraction}")
    records = list(records)
    n = len(records)
    if n == 0:
        raise DataError("no frames to split")
    n_test = n - int(round(split_fraction * n))
    order = [int(k) for k in rng.permutation(n)]
    counts = Counter(r.scene for r in records)
    test: list[int] = []
    seen = set()
    for k in order:
        scene = records[k].scene
        if counts[scene] >= 2 and scene not in seen:
            seen.add(scene)
            test.append(k)
    for k in order:
        if len(test) >= n_test:
            break
        if k not in test:
            test.append(k)
    test_set = set(test)
    return DatasetManifest([replace(r, split="test" if k in test_set else "train")
                            for k, r in enumerate(records)])


def rebalance(manifest: DatasetManifest, targets: dict[str, int], synthetic=(),
              split: str = "train") -> DatasetManifest:
    """Bring per-scene frame counts of one split to ``targets``.

    Scenes below target draw frames from the ``synthetic`` pool (in pool
    order); scenes above target drop their last frames. Other splits and
    scenes without a target pass through unchanged.
    """
    pool: dict[str, list[FrameRecord]] = {}
    for r in synthetic:
        pool.setdefault(r.scene, []).append(replace(r, split=split))
    current = manifest.scene_counts(split)
    deficits = {}
    for scene, target in targets.items():
        if target < 0:
            raise DomainError(f"negative target for scene {scene!r}")
        need = target - current.get(scene, 0)
        if need > len(pool.get(scene, [])):
            deficits[scene] = need - len(pool.get(scene, []))
    if deficits:
        detail = ", ".join(f"{s}: short by {d}" for s, d in sorted(deficits.items()))
        raise DataError(f"rebalance targets unreachable ({detail})")

    kept = Counter()
    out = []
    for r in manifest.records:
        if r.split == split and r.scene in targets:
            if kept[r.scene] >= targets[r.scene]:
                continue
            kept[r.scene] += 1
        out.append(r)
    for scene, target in targets.items():
        need = target - kept[scene]
        out.extend(pool.get(scene, [])[:max(need, 0)])
    return DatasetManifest(out)
