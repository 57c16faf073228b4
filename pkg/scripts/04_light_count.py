"""
Does a second light help?
=========================

Train Stage 2 from the same Stage 1 geometry with pseudo labels merged
from 1 and from 4 lights, then compare the predicted reflectance with the
ground-truth albedo on held-out views.

    python scripts/04_light_count.py runs/reference/stage1.mlif runs/reference/dataset
"""

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from multilight.config import load_config
from multilight.field import load_checkpoint
from multilight.imageio import read_png
from multilight.metrics import mse
from multilight.pseudo import generate_pseudo_labels
from multilight.renderer import DatasetManifest
from multilight.scene import Camera
from multilight.training import label_arrays, load_ray_data, train_stage2
from multilight.volume import render_image

ckpt, dataset = sys.argv[1], sys.argv[2]
cfg = load_config("configs/reference.toml")
iters = int(sys.argv[3]) if len(sys.argv) > 3 else cfg.stage2.iterations
man = DatasetManifest.load(dataset)
data = load_ray_data(man)
base, _ = load_checkpoint(ckpt)

cams = [Camera.from_dict(c) for c in man.cameras]
test = [f for f in man.frames_in("test") if f["light_index"] == 0]

for n in (1, 4):
    # only frames lit by the first n lights take part
    keep = [i for i, l in enumerate(data.light_index) if l < n]
    sub = replace(data, rgb=data.rgb[keep], origins=data.origins[keep], dirs=data.dirs[keep],
                  light_positions=data.light_positions[keep], camera_index=data.camera_index[keep],
                  light_index=data.light_index[keep], frame_ids=[data.frame_ids[i] for i in keep])
    sub_man = replace(man, frames=[f for f in man.frames if f["light_index"] < n])
    labels = label_arrays(sub, generate_pseudo_labels(base, sub_man))
    model = base.copy()
    train_stage2(sub, labels, model, replace(cfg.stage2, iterations=iters), cfg.loss)
    errs = []
    for f in test:
        pred = render_image(model, cams[f["camera_index"]], f["light_position"], intrinsic=True)
        errs.append(mse(np.clip(pred["reflectance"], 0, 1), read_png(Path(man.root) / f["reflectance_path"], 3)))
    print(f"{n} light(s): reflectance MSE {np.mean(errs):.5f}")
