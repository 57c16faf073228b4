#!/usr/bin/env python
"""
Desk-scale training run
=======================

The whole pipeline at desk scale on the reference scene:

    python scripts/03_desk_run.py configs/reference.toml

Stage 1 takes a couple of hours on one core at the reference settings.
Use ``configs/smoke.toml`` for a run of a few minutes.
"""

import logging
import sys
from pathlib import Path

from multilight.cli import main

logging.basicConfig(level=logging.INFO)

config = sys.argv[1] if len(sys.argv) > 1 else "configs/smoke.toml"
root = Path("runs") / Path(config).stem
c = ["--config", config, "--deterministic"]

steps = [
    ["render-dataset", *c, "--out", str(root / "dataset")],
    ["train-stage1", *c, "--dataset", str(root / "dataset"), "--out", str(root / "stage1.mlif")],
    ["evaluate", *c, "--dataset", str(root / "dataset"), "--checkpoint", str(root / "stage1.mlif"),
     "--out", str(root / "eval_stage1")],
    ["pseudo-labels", *c, "--dataset", str(root / "dataset"), "--checkpoint", str(root / "stage1.mlif"),
     "--out", str(root / "labels")],
    ["train-stage2", *c, "--dataset", str(root / "dataset"), "--checkpoint", str(root / "stage1.mlif"),
     "--labels", str(root / "labels"), "--out", str(root / "stage2.mlif")],
    ["evaluate", *c, "--dataset", str(root / "dataset"), "--checkpoint", str(root / "stage2.mlif"),
     "--out", str(root / "eval_stage2")],
    ["decompose", *c, "--checkpoint", str(root / "stage2.mlif"), "--dataset", str(root / "dataset"),
     "--camera-index", "0", "--light", "2,2,3", "--out", str(root / "decompose")],
]
for argv in steps:
    print(">>", " ".join(argv[:1]))
    if main(argv) != 0:
        sys.exit(1)
