"""Small end-to-end run of the command-line pipeline in a scratch directory:
simulate -> train -> synth -> eval -> render.

Synthesized maps carry no detections, so their report is mostly about PSNR.
The ground-truth ConfMaps are also scored as an oracle detector, which gives
the reference mAP for the split.

    python3 scripts/demo_pipeline.py runs/demo
"""
import json
import sys
from pathlib import Path

from ramap_forge.cli import main as cli

CONFIG = {
    "geometry": {"n_range": 64, "n_azimuth": 64},
    "optimizer": {"steps": 300, "lr": 0.001},
    "denoiser": {"compute_dtype": "float32"},
}


def run(root: Path, seed: int = 0) -> int:
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "config.json"
    cfg.write_text(json.dumps(CONFIG, indent=2))
    base = ["--config", str(cfg), "--seed", str(seed)]
    steps = [
        base + ["--out", str(root / "data"), "simulate", "--n-frames", "24"],
        base + ["--out", str(root / "model"), "train", str(root / "data/manifest.csv")],
        base + ["--out", str(root / "synth"), "synth", str(root / "model/denoiser.dnsr"), str(root / "data/frames")],
        base + ["--out", str(root / "report"), "eval", str(root / "synth"), str(root / "data/manifest.csv")],
        base + ["--out", str(root / "report_oracle"), "eval", str(root / "data/frames"),
                str(root / "data/manifest.csv")],
        ["render", str(root / "synth/frame_000000.ramf"), str(root / "images/frame_000000_synth.pgm")],
        ["render", str(root / "data/frames/frame_000000.ramf"), str(root / "images/frame_000000_real.pgm")],
        ["render", str(root / "data/frames/frame_000000.cnfm"), str(root / "images/frame_000000_conf.ppm")],
    ]
    for argv in steps:
        code = cli(argv)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(run(Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo")))
