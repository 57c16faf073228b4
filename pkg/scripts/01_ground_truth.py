"""
Ground-truth intrinsic images
=============================

Render the reference scene from one camera under four lights and write a
contact sheet: rgb, reflectance, shading and residual in columns, one row
per light.  Output goes to ``out/01_ground_truth.png``.
"""

from pathlib import Path

import numpy as np

from multilight.imageio import write_png8
from multilight.renderer import render_ground_truth
from multilight.scene import fixed_lights, orbit_cameras, reference_scene

out = Path("out")
out.mkdir(exist_ok=True)

scene = reference_scene()
cam = orbit_cameras(1, resolution=128, seed=4)[0]

rows = []
for light in fixed_lights(4):
    fr = render_ground_truth(scene, cam, light)
    # the residual can be negative in principle; shift it for display
    cells = [fr.rgb, fr.reflectance, np.repeat(fr.shading, 3, -1), np.clip(fr.residual + 0.5, 0, 1)]
    rows.append(np.concatenate(cells, axis=1))
    print(f"light at {np.round(light.position, 2)}: closure error {fr.closure_error():.1e}, "
          f"lit fraction {fr.visibility[fr.mask > 0].mean():.2f}")

write_png8(out / "01_ground_truth.png", np.concatenate(rows, axis=0))

# Reflectance is the only column that is identical across rows.
