"""
Camera placement ablation
=========================

Object-centric cameras against random and anchor-sweep cameras, with uniform
and grid position sampling. The VLM here is the offline structure rule, so
the numbers say more about the scene than about any captioner.
"""

from blendforge import bundled_scene_path, camgen, pipeline, vlm
from blendforge.scene import load_scene

scene = load_scene(bundled_scene_path())
gateway = vlm.StubGateway(rule=pipeline.offline_rule())
rows, paths = pipeline.run_ablation(scene, "demo_out/ablation", gateway, count=64, seed=0,
                                    config=camgen.CameraConfig(width=128, height=128))
print(pipeline.format_ablation(rows))

# the same numbers recounted from the manifest files
for r in rows:
    recs = pipeline.read_manifest(paths[r.method])
    ok = sum(rec["stages"]["heuristic"]["status"] == "passed" for rec in recs)
    print("%-22s %3d/%3d heuristic passed" % (r.method, ok, len(recs)))
