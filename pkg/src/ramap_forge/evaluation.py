"""Signal-level (PSNR) and detection-level (OLS, NMS, AP, mAP) evaluation."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .core import Annotation, ClassCatalog, RadarGeometry, RAMap
from .errors import DomainError

OLS_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(9))


@dataclass(frozen=True)
class Detection:
    range: float
    azimuth: float
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise DomainError("detection score must be finite")


def psnr(x, x_hat, a_max: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    if isinstance(x, RAMap) and isinstance(x_hat, RAMap) and x.geometry != x_hat.geometry:
        raise DomainError(f"geometry mismatch: {x.geometry} vs {x_hat.geometry}")
    a = x.grid if isinstance(x, RAMap) else np.asarray(x, dtype=np.float64)
    b = x_hat.grid if isinstance(x_hat, RAMap) else np.asarray(x_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(a_max ** 2 / mse)


def extract_peaks(grid: np.ndarray, geometry: RadarGeometry, min_score: float = 0.1,
                  max_peaks: int | None = None, class_id: int = 0) -> list[Detection]:
    """3x3 local maxima with value >= min_score, strongest first.

    A plateau yields only its first cell in raster order: a cell must be
    strictly greater than neighbours that precede it and >= those that follow.
    """
    if not (0 <= min_score <= 1):
        raise DomainError(f"min_score must lie in [0, 1], got {min_score}")
    g = np.asarray(grid, dtype=np.float64)
    h, w = g.shape
    padded = np.pad(g, 1, constant_values=-np.inf)
    is_peak = (g >= min_score) & (g > 0)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            nb = padded[1 + di:1 + di + h, 1 + dj:1 + dj + w]
            before = di < 0 or (di == 0 and dj < 0)
            is_peak &= (g > nb) if before else (g >= nb)
    ii, jj = np.nonzero(is_peak)
    scores = g[ii, jj]
    order = np.argsort(-scores, kind="stable")
    if max_peaks is not None:
        order = order[:max_peaks]
    return [Detection(float(geometry.range_center(ii[k])), float(geometry.azimuth_center(jj[k])),
                      class_id, float(scores[k])) for k in order]


def _cartesian(r, theta):
    return r * math.sin(theta), r * math.cos(theta)


def ols(pred, gt, kappa: float) -> float:
    """Object location similarity between two polar points, scaled by the ground-truth range."""
    if gt.range <= 0:
        raise DomainError("ground-truth range must be > 0")
    px, py = _cartesian(pred.range, pred.azimuth)
    gx, gy = _cartesian(gt.range, gt.azimuth)
    d2 = (px - gx) ** 2 + (py - gy) ** 2
    return math.exp(-d2 / (2.0 * (gt.range * kappa) ** 2))


def nms(detections, ols_threshold: float, catalog: ClassCatalog) -> list[Detection]:
    """Greedy suppression of same-class detections overlapping a stronger one."""
    order = sorted(range(len(detections)), key=lambda k: -detections[k].score)
    kept: list[Detection] = []
    for k in order:
        d = detections[k]
        if all(o.class_id != d.class_id or ols(d, o, catalog[o.class_id].kappa) < ols_threshold
               for o in kept):
            kept.append(d)
    return kept


def match_frame(preds, gts, class_id: int, tau: float, kappa: float):
    """Greedy matching inside one frame; returns a TP flag per prediction (score-descending)."""
    cand = [g for g in gts if g.class_id == class_id]
    used = [False] * len(cand)
    flags = []
    for p in sorted((p for p in preds if p.class_id == class_id), key=lambda p: -p.score):
        best, best_k = -1.0, -1
        for k, g in enumerate(cand):
            if used[k]:
                continue
            s = ols(p, g, kappa)
            if s > best:
                best, best_k = s, k
        hit = best_k >= 0 and best >= tau
        if hit:
            used[best_k] = True
        flags.append((p.score, hit))
    return flags


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for k in range(len(mpre) - 2, -1, -1):
        mpre[k] = max(mpre[k], mpre[k + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(preds_per_frame, gts_per_frame, class_id: int, tau: float,
                      catalog: ClassCatalog) -> float:
    """AP for one class at one OLS threshold.

    Returns NaN when the class has neither ground truths nor predictions.
    """
    kappa = catalog[class_id].kappa
    n_gt = sum(1 for gts in gts_per_frame for g in gts if g.class_id == class_id)
    scored = []
    for f, (preds, gts) in enumerate(zip(preds_per_frame, gts_per_frame)):
        for rank, (score, hit) in enumerate(match_frame(preds, gts, class_id, tau, kappa)):
            scored.append((-score, f, rank, hit))
    if n_gt == 0:
        return math.nan if not scored else 0.0
    if not scored:
        return 0.0
    scored.sort()
    hits = np.array([s[3] for s in scored], dtype=np.float64)
    tp = np.cumsum(hits)
    recall = tp / n_gt
    precision = tp / np.arange(1, len(hits) + 1)
    return interpolated_ap(recall, precision)


@dataclass
class SceneReport:
    ap: dict[str, list[float]] = field(default_factory=dict)   # class -> AP per threshold
    psnr: list[float] = field(default_factory=list)

    @property
    def mean_ap(self) -> float:
        vals = [v for row in self.ap.values() for v in row if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def ap50(self) -> float:
        vals = [row[0] for row in self.ap.values() if not math.isnan(row[0])]
        return float(np.mean(vals)) if vals else math.nan

    def psnr_stats(self) -> dict[str, float]:
        if not self.psnr:
            return {}
        arr = np.asarray(self.psnr)
        finite = arr[np.isfinite(arr)]
        if finite.size == 0:
            return {"psnr_mean": math.inf, "psnr_min": math.inf, "psnr_max": math.inf}
        mean = math.inf if finite.size < arr.size else float(finite.mean())
        return {"psnr_mean": mean, "psnr_min": float(arr.min()), "psnr_max": float(arr.max())}


@dataclass
class EvalReport:
    thresholds: tuple[float, ...] = OLS_THRESHOLDS
    scenes: dict[str, SceneReport] = field(default_factory=dict)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["scene", "class", "tau", "ap"])
        for scene, rep in self.scenes.items():
            for cls, row in rep.ap.items():
                for tau, ap in zip(self.thresholds, row):
                    writer.writerow([scene, cls, f"{tau:.2f}", _fmt(ap)])
            writer.writerow([scene, "ALL", "mAP", _fmt(rep.mean_ap)])
            writer.writerow([scene, "ALL", "AP@0.5", _fmt(rep.ap50)])
            for key, val in rep.psnr_stats().items():
                writer.writerow([scene, "ALL", key, _fmt(val)])
        return out.getvalue()

    def to_text(self) -> str:
        lines = [f"{'scene':<14}{'mAP(%)':>10}{'AP@0.5(%)':>12}{'PSNR(dB)':>11}"]
        for scene, rep in self.scenes.items():
            stats = rep.psnr_stats()
            ps = _fmt(stats["psnr_mean"], ".2f") if stats else "-"
            lines.append(f"{scene:<14}{_pct(rep.mean_ap):>10}{_pct(rep.ap50):>12}{ps:>11}")
        lines.append("")
        for scene, rep in self.scenes.items():
            lines.append(f"[{scene}] AP per class (%) at OLS thresholds")
            lines.append(f"{'class':<12}" + "".join(f"{t:>7.2f}" for t in self.thresholds))
            for cls, row in rep.ap.items():
                lines.append(f"{cls:<12}" + "".join(f"{_pct(v):>7}" for v in row))
        return "\n".join(lines) + "\n"


def _fmt(v: float, spec: str = ".10g") -> str:
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(v, spec)


def _pct(v: float) -> str:
    return "nan" if math.isnan(v) else f"{100 * v:.2f}"


def parse_report_csv(text: str) -> dict:
    """Inverse of :meth:`EvalReport.to_csv`: ``{(scene, class, key): value}``."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["scene", "class", "tau", "ap"]:
        raise ValueError("not an evaluation report CSV")
    return {(s, c, k): float(v) for s, c, k, v in rows[1:]}


def scene_report(preds_per_frame, gts_per_frame, catalog: ClassCatalog,
                 thresholds=OLS_THRESHOLDS, psnr_values=()) -> SceneReport:
    rep = SceneReport(psnr=list(psnr_values))
    for c, cls in enumerate(catalog.classes):
        rep.ap[cls.name] = [average_precision(preds_per_frame, gts_per_frame, c, tau, catalog)
                            for tau in thresholds]
    return rep


def mean_average_precision(preds_per_frame, gts_per_frame, catalog: ClassCatalog,
                           thresholds=OLS_THRESHOLDS) -> float:
    return scene_report(preds_per_frame, gts_per_frame, catalog, thresholds).mean_ap


def evaluate(frames, catalog: ClassCatalog, thresholds=OLS_THRESHOLDS) -> EvalReport:
    """``frames``: iterable of ``(scene, preds, gts, psnr_or_None)``.

    Produces one report per scene plus a pooled ``overall`` entry.
    """
    by_scene: dict[str, list] = {}
    frames = list(frames)
    for scene, preds, gts, ps in frames:
        by_scene.setdefault(scene, []).append((preds, gts, ps))
    by_scene["overall"] = [(p, g, s) for _, p, g, s in frames]
    report = EvalReport(tuple(thresholds))
    for scene, items in by_scene.items():
        preds = [p for p, _, _ in items]
        gts = [g for _, g, _ in items]
        ps = [s for _, _, s in items if s is not None]
        report.scenes[scene] = scene_report(preds, gts, catalog, thresholds, ps)
    return report


def annotation_as_detection(ann: Annotation, score: float = 1.0) -> Detection:
    return Detection(ann.range, ann.azimuth, ann.class_id, score)
