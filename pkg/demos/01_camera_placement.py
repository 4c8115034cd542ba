"""
Object-centric camera placement
===============================

Orbit cameras around each object's box center at a distance that makes the
box fill two thirds of the frame height.
"""

import math

import numpy as np

from blendforge import bundled_scene_path, camgen
from blendforge.scene import Aabb, SceneObject, load_scene

# a 2x2x2 cube at the origin: half height 1, so d = 1 / (2/3 * tan 45deg) = 1.5
cube = SceneObject(1, "cube", Aabb((-1, -1, -1), (1, 1, 1)))
poses = camgen.place_object_cameras(cube)
for p in poses:
    print(p.id, "az=%5.1f" % math.degrees(p.azimuth), "d=%.3f" % p.distance, np.round(p.position, 3))

# the look-at basis: rows are right, up, forward
print(np.round(poses[0].rotation, 6))

# only the vertical span sets the distance: a 2 m wide plate seen edge-on
# (h_o = 0.05) gets d = 0.075 and the camera sits inside its footprint,
# while a 30 degree elevation sees the top face and backs off
plate = SceneObject(2, "plate", Aabb((0, 0, 0), (2, 1, 0.1)))
cfg = camgen.CameraConfig(elevations=(0.0, math.radians(30)))
for p in camgen.place_object_cameras(plate, cfg)[::4]:
    print(p.id, "el=%4.1f" % math.degrees(p.elevation), "h_o=%.3f" % p.meta["half_height"], "d=%.3f" % p.distance)

# every object of the bundled scene
scene = load_scene(bundled_scene_path())
poses, skips = camgen.place_scene_cameras(scene)
print(len(poses), "poses for", len(scene.objects), "objects,", len(skips), "skipped")

# baselines sample the room instead of the objects
room = scene.scene_aabb
sweep = camgen.sample_baseline_poses(room, "anchor_sweep", "grid", count=64, seed=0, grid_n=2)
print(sweep[0].id, np.round(sweep[0].position, 2), "...", len(sweep), "poses")
print("grid(4) quotas for 5000:", camgen.grid_quotas(5000, 4)[:10], "...")
