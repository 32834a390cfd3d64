"""Command-line entry point: simulate | confmap | train | synth | eval | render.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .conditioning import build_confmap
from .config import RunConfig, load_config, with_overrides
from .core import ConfMap, RAMap, SeededRng
from .dataset import DatasetManifest, FrameRecord, build_manifest, simulate_frame
from .denoiser import ConvDenoiser, DenoiserSpec, load_checkpoint, save_checkpoint, set_torch_threads
from .diffusion import OptimizerConfig, sample_grids, train
from .errors import ConfigError, DataError, DomainError, FormatError, NumericError
from .evaluation import Detection, evaluate, extract_peaks, nms, psnr
from .formats import (ingest_annotations, parse_annotation_rows, read_any_map, read_confmap,
                      read_ramap, write_annotations, write_confmap, write_ramap)

log = logging.getLogger("ramap_forge")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def worker_count() -> int:
    raw = os.environ.get("RAMAP_FORGE_THREADS")
    cap = os.cpu_count() or 1
    if raw is None:
        return 1
    try:
        return max(1, min(int(raw), cap))
    except ValueError:
        raise ConfigError(f"RAMAP_FORGE_THREADS must be an integer, got {raw!r}") from None


def _ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise DataError(f"output directory {path} is not writable")
    return path


# --- simulate ---------------------------------------------------------------

def _simulate_one(args):
    config, k, seq = args
    scene = config.scenes[k % len(config.scenes)]
    anns, ramap = simulate_frame(scene, config.geometry, config.catalog, config.gac, SeededRng(seq))
    return scene.name, anns, ramap


def cmd_simulate(config: RunConfig, n_frames: int, out_dir) -> DatasetManifest:
    """Write ``n_frames`` oracle frames (annotations, RAMap, ConfMap) plus ``manifest.csv``."""
    out = _ensure_dir(out_dir)
    frames_dir = _ensure_dir(out / "frames")
    root = SeededRng(config.seed)
    sim_rng, split_rng = root.split(2)
    seqs = [s._seq for s in sim_rng.split(n_frames)] if n_frames else []
    jobs = [(config, k, seqs[k]) for k in range(n_frames)]
    workers = worker_count()
    if workers > 1 and n_frames > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_simulate_one, jobs))
    else:
        results = [_simulate_one(j) for j in jobs]

    records = []
    for k, (scene, anns, ramap) in enumerate(results):
        fid = f"frame_{k:06d}"
        write_annotations({fid: anns}, config.catalog, frames_dir / f"{fid}.csv")
        write_ramap(ramap, frames_dir / f"{fid}.ramf")
        cm = build_confmap(anns, config.geometry, config.catalog, config.gac)
        write_confmap(cm, frames_dir / f"{fid}.cnfm")
        records.append(FrameRecord(fid, scene, "train", f"frames/{fid}.csv",
                                   f"frames/{fid}.ramf", f"frames/{fid}.cnfm"))
    manifest = build_manifest(records, config.split_fraction, split_rng) if records else DatasetManifest()
    manifest.write(out / "manifest.csv")
    return manifest


# --- confmap ----------------------------------------------------------------

def cmd_confmap(config: RunConfig, annotations_path, out_dir) -> list[Path]:
    """One ConfMap file per frame of an annotation CSV. A file with no records
    yields a single all-zero map named after the input file."""
    out = _ensure_dir(out_dir)
    frames, dropped = ingest_annotations(annotations_path, config.geometry, config.catalog)
    if dropped:
        log.info("dropped %d out-of-view records", dropped)
    if not frames:
        frames = {Path(annotations_path).stem: []}
    written = []
    for fid, anns in frames.items():
        cm = build_confmap(anns, config.geometry, config.catalog, config.gac)
        path = out / f"{fid}.cnfm"
        write_confmap(cm, path)
        written.append(path)
    return written


# --- train ------------------------------------------------------------------

def _denoiser_spec(config: RunConfig) -> DenoiserSpec:
    d = config.denoiser
    return DenoiserSpec(in_channels=len(config.catalog) + 2, hidden=d.hidden, n_stages=d.n_stages,
                        kernel=d.kernel)


def load_pairs(manifest_path, split: str | None):
    manifest = DatasetManifest.read(manifest_path)
    base = Path(manifest_path).parent
    records = [r for r in manifest.records if split is None or r.split == split]
    x0, conf = [], []
    for r in records:
        x0.append(read_ramap(base / r.ramap_path).grid)
        conf.append(read_confmap(base / r.confmap_path).channels)
    return records, np.array(x0), np.array(conf)


def cmd_train(config: RunConfig, manifest_path, out_dir, checkpoint_name: str = "denoiser.dnsr"):
    """Train on the manifest's train split; writes a checkpoint and ``loss.csv``."""
    out = _ensure_dir(out_dir)
    records, x0, conf = load_pairs(manifest_path, "train")
    if not records:
        raise DataError(f"{manifest_path}: no training frames")
    if conf.shape[1] != len(config.catalog):
        raise DataError(f"ConfMaps have {conf.shape[1]} channels, catalog has {len(config.catalog)}")
    init_rng, train_rng = SeededRng(config.seed).split(2)
    model = ConvDenoiser(_denoiser_spec(config), rng=init_rng, compute_dtype=config.denoiser.compute_dtype)
    result = train(model, x0, conf, config.schedule.build(), config.optimizer, config.tcr, train_rng)
    ckpt = out / checkpoint_name
    save_checkpoint(ckpt, result.model, result.opt_state)
    lines = ["step,loss"] + [f"{k},{v!r}" for k, v in enumerate(result.history)]
    (out / "loss.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return ckpt, result.history


# --- synth ------------------------------------------------------------------

def _collect(paths, suffix: str) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            found.extend(sorted(p.glob(f"*{suffix}")))
        elif p.exists():
            found.append(p)
        else:
            raise DataError(f"no such file or directory: {p}")
    return found


def cmd_synth(config: RunConfig, checkpoint, confmaps, out_dir) -> list[Path]:
    """Sample one RAMap per ConfMap; each file gets its own child stream."""
    out = _ensure_dir(out_dir)
    model, _ = load_checkpoint(checkpoint)
    model.compute_dtype = np.dtype(config.denoiser.compute_dtype)
    schedule = config.schedule.build()
    files = _collect(confmaps, ".cnfm")
    streams = SeededRng(config.seed).split(len(files)) if files else []
    written = []
    for path, rng in zip(files, streams):
        cm = read_confmap(path)
        if cm.n_channels + 2 != model.spec.in_channels:
            raise DataError(f"{path}: {cm.n_channels} channels, checkpoint expects {model.spec.in_channels - 2}")
        grid = sample_grids(cm.channels[None], model, schedule, rng)[0]
        target = out / (path.stem + ".ramf")
        write_ramap(RAMap(grid, cm.geometry), target)
        written.append(target)
    return written


# --- eval -------------------------------------------------------------------

def _read_detections(path, config: RunConfig) -> list[Detection]:
    dets = []
    for _, _, r, theta, class_id, score in parse_annotation_rows(path, config.catalog):
        dets.append(Detection(r, theta, class_id, 1.0 if score is None else score))
    return dets


def _peaks_from_confmap(cm: ConfMap, config: RunConfig) -> list[Detection]:
    ev = config.eval
    dets = []
    for c in range(cm.n_channels):
        dets.extend(extract_peaks(cm.channels[c], cm.geometry, ev.min_score, ev.max_peaks, class_id=c))
    return nms(dets, ev.nms_threshold, config.catalog)


def cmd_eval(config: RunConfig, pred_dir, manifest_path, out_dir):
    """Score predictions named ``<frame_id>.ramf`` (PSNR) and ``<frame_id>.csv`` or
    ``<frame_id>.cnfm`` (detections) against the manifest's evaluation split."""
    out = _ensure_dir(out_dir)
    pred_dir = Path(pred_dir)
    if not pred_dir.is_dir():
        raise DataError(f"prediction directory not found: {pred_dir}")
    manifest = DatasetManifest.read(manifest_path)
    base = Path(manifest_path).parent
    split = config.eval.split
    records = [r for r in manifest.records if split == "all" or r.split == split]
    frames = []
    for r in records:
        frames_gt, _ = ingest_annotations(base / r.annotation_path, config.geometry, config.catalog)
        gts = frames_gt.get(r.frame_id, [])
        ps = None
        ramap_pred = pred_dir / f"{r.frame_id}.ramf"
        if ramap_pred.exists():
            ps = psnr(read_ramap(base / r.ramap_path), read_ramap(ramap_pred), 1.0)
        det_csv = pred_dir / f"{r.frame_id}.csv"
        det_map = pred_dir / f"{r.frame_id}.cnfm"
        if det_csv.exists():
            preds = _read_detections(det_csv, config)
        elif det_map.exists():
            preds = _peaks_from_confmap(read_confmap(det_map), config)
        else:
            preds = []
        frames.append((r.scene, preds, gts, ps))
    report = evaluate(frames, config.catalog)
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    return report


# --- render -----------------------------------------------------------------

def render_bytes(m: RAMap | ConfMap) -> bytes:
    """8-bit binary PGM for a RAMap, PPM for a ConfMap (first three channels as R, G, B).

    Far range is drawn at the top row.
    """
    if isinstance(m, RAMap):
        img = np.round(np.clip(m.grid, 0, 1) * 255).astype(np.uint8)[::-1]
        h, w = img.shape
        return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()
    rgb = np.zeros((3,) + m.geometry.shape)
    n = min(3, m.n_channels)
    rgb[:n] = m.channels[:n]
    img = np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)[::-1]
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def cmd_render(map_path, out_image) -> Path:
    out_image = Path(out_image)
    if out_image.parent != Path(""):
        _ensure_dir(out_image.parent)
    out_image.write_bytes(render_bytes(read_any_map(map_path)))
    return out_image


# --- argument parsing -------------------------------------------------------

def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # the subcommand copy uses SUPPRESS so flags given before the subcommand are not reset
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration", **kw)
    common.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides config)", **kw)
    common.add_argument("--out", help="output directory", **kw)
    common.add_argument("--quiet", action="store_true", help="only print the config/seed line", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="ramap-forge", description=__doc__.splitlines()[0],
                                     parents=[_global_flags(suppress=False)])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate an oracle dataset and manifest")
    p.add_argument("--n-frames", type=int, default=16)

    p = sub.add_parser("confmap", parents=[common], help="annotation CSV -> ConfMap files")
    p.add_argument("annotations")

    p = sub.add_parser("train", parents=[common], help="train the denoiser on a manifest")
    p.add_argument("manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lambda-tcr", type=float)

    p = sub.add_parser("synth", parents=[common], help="sample RAMaps for ConfMaps")
    p.add_argument("checkpoint")
    p.add_argument("confmaps", nargs="+")

    p = sub.add_parser("eval", parents=[common], help="PSNR and OLS-based AP/mAP report")
    p.add_argument("pred_dir")
    p.add_argument("manifest")
    p.add_argument("--split", choices=["train", "test", "all"])

    p = sub.add_parser("render", parents=[common], help="map file -> PGM/PPM image")
    p.add_argument("map")
    p.add_argument("image")
    return parser


def _resolve(args) -> RunConfig:
    config = load_config(args.config)
    overrides = {"seed": args.seed}
    if args.command == "train":
        overrides.update({
            "optimizer.epochs": args.epochs, "optimizer.steps": args.steps,
            "optimizer.lr": args.lr, "optimizer.batch_size": args.batch_size,
            "tcr.lambda_tcr": args.lambda_tcr,
        })
    if args.command == "eval":
        overrides["eval.split"] = args.split
    return with_overrides(config, **overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    set_torch_threads(1)
    try:
        config = _resolve(args)
        print(f"config={config.digest()} seed={config.seed}", flush=True)
        out = Path(args.out or ".")
        if args.command == "simulate":
            manifest = cmd_simulate(config, args.n_frames, out)
            log.info("wrote %d frames to %s", len(manifest), out)
        elif args.command == "confmap":
            paths = cmd_confmap(config, args.annotations, out)
            log.info("wrote %d ConfMaps to %s", len(paths), out)
        elif args.command == "train":
            ckpt, history = cmd_train(config, args.manifest, out)
            if history:
                log.info("%d steps, loss %.5f -> %.5f; checkpoint %s", len(history), history[0], history[-1], ckpt)
            else:
                log.info("0 steps; checkpoint %s", ckpt)
        elif args.command == "synth":
            paths = cmd_synth(config, args.checkpoint, args.confmaps, out)
            log.info("wrote %d RAMaps to %s", len(paths), out)
        elif args.command == "eval":
            report = cmd_eval(config, args.pred_dir, args.manifest, out)
            if not args.quiet:
                print(report.to_text(), end="")
        elif args.command == "render":
            cmd_render(args.map, args.image)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, DomainError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
