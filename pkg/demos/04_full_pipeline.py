"""
The whole pipeline offline
==========================

Poses through splits on the bundled scene. The VLM is a scripted stub and the
CLIP / aesthetic inputs are synthetic files, since the real models are
external services.
"""

import json
from pathlib import Path

import numpy as np

from blendforge import bundled_scene_path, pipeline
from blendforge.quality import write_aesthetic, write_embeddings
from blendforge.scene import load_scene

root = Path("demo_out/pipeline")
root.mkdir(parents=True, exist_ok=True)
scene = load_scene(bundled_scene_path())
ids = [f"desk/{o.id:04d}/{k:03d}" for o in scene.objects for k in range(8)]

# synthetic scores: text vectors partly aligned with image vectors
rng = np.random.default_rng(1)
img = rng.normal(size=(len(ids), 32))
txt = 0.35 * img + rng.normal(size=img.shape)
write_embeddings(root / "clip_img", ids, img)
write_embeddings(root / "clip_txt", ids, txt)
write_aesthetic(root / "aesthetic.jsonl", dict(zip(ids, np.round(rng.uniform(2, 6, len(ids)), 2).tolist())))

# scripted answers: one BAD per object, everything else GOOD
stub = {
    "filter": {f"desk/{o.id:04d}/003": "BAD: extreme close-up of surface" for o in scene.objects},
    "default": {"filter": "GOOD: clear object with context",
                "caption": "A small object resting on a gray floor beside a plain wall."},
}
(root / "stub.json").write_text(json.dumps(stub))

(root / "run.toml").write_text(f"""
[pipeline]
scene = "{bundled_scene_path()}"
out_dir = "out"

[stage.poses]
width = 128
height = 128

[stage.filter-vlm]
stub = "stub.json"

[stage.score]
image_emb = "clip_img"
text_emb = "clip_txt"
aesthetic = "aesthetic.jsonl"

[stage.sample]
splits = "train:0.6,val:0.2,test:0.2"
""")

result = pipeline.run_pipeline(pipeline.load_config(root / "run.toml"))
records = pipeline.read_manifest(result.manifests["sample"])
print(pipeline.funnel_counts(records))
print(pipeline.format_scene_stats(result.stats))
for name, keys in result.splits.items():
    print(name, len(keys), keys[:3])

# rerunning reuses renders and stub answers and gives the same bytes
before = result.manifests["sample"].read_bytes()
pipeline.run_pipeline(pipeline.load_config(root / "run.toml"))
print("rerun identical:", result.manifests["sample"].read_bytes() == before)
