"""
Rendering and the heuristic filter
==================================

Render every object-centric view of the bundled scene and see which ones the
cheap first-pass filter throws away, and why.
"""

from collections import Counter
from pathlib import Path

import numpy as np

from blendforge import bundled_scene_path, camgen, imgfilter, render
from blendforge.scene import load_scene

out = Path("demo_out/renders")
scene = load_scene(bundled_scene_path())
poses, _ = camgen.place_scene_cameras(scene, camgen.CameraConfig(width=128, height=128))

reasons = Counter()
by_object = {}
for pose in poses:
    rgb, seg = render.render_view(scene, pose)
    render.save_rgb(rgb, render.rgb_path(out, pose.id))
    render.save_seg(seg, render.seg_path(out, pose.id))
    d = imgfilter.heuristic_decide(rgb, seg, pose.object_id)
    reasons.update(d.reasons or ["passed"])
    by_object.setdefault(scene.object(pose.object_id).name, []).append(d.passed)

for name, flags in by_object.items():
    print("%-12s %d/8 passed" % (name, sum(flags)))
print(dict(reasons))

# the pole sits inside four walls, so no view sees it
pole = [p for p in poses if scene.object(p.object_id).name == "hidden_pole"][0]
_, seg = render.render_view(scene, pole)
print("pole fill:", imgfilter.object_fill_fraction(seg, pole.object_id))

# the statistics behind the thresholds
checker = np.zeros((8, 8, 3), np.uint8)
checker[::2, ::2] = checker[1::2, 1::2] = 255
print(imgfilter.image_statistics(checker))
print(imgfilter.heuristic_decide(checker).reasons)
print("images in", out.resolve())
