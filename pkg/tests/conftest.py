import json
import math

import numpy as np
import pytest

from blendforge import bundled_scene_path
from blendforge.quality import write_aesthetic, write_embeddings
from blendforge.scene import (
    Aabb, AmbientLight, DirectionalLight, Material, Scene, SceneObject, Sphere, load_scene,
)


def sphere_object(oid=1, center=(0.0, 0.0, 0.0), radius=1.0, albedo=(0.8, 0.8, 0.8), name="ball"):
    s = Sphere(tuple(center), radius)
    return SceneObject(oid, name, s.aabb, s, Material(albedo))


def lit_sphere_scene(radius=1.0):
    return Scene(
        "one_ball",
        (sphere_object(radius=radius),),
        (AmbientLight((0.1, 0.1, 0.1)), DirectionalLight((-0.3, -0.2, -1.0), (1.0, 1.0, 1.0))),
    )


@pytest.fixture
def desk():
    return load_scene(bundled_scene_path())


@pytest.fixture
def unit_cube():
    return SceneObject(1, "cube", Aabb((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)))


def write_score_fixtures(ids, root, seed=7, dim=16):
    """Image/text embeddings and aesthetic sidecar with a spread of scores.

    Text vectors are mixed with their image vector so CLIPScore lands on both
    sides of 20; aesthetic spans roughly 2..6.
    """
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(len(ids), dim))
    noise = rng.normal(size=(len(ids), dim))
    mix = rng.uniform(0.05, 0.4, size=(len(ids), 1))
    txt = mix * img / np.linalg.norm(img, axis=1, keepdims=True) + (1 - mix) * noise / np.linalg.norm(
        noise, axis=1, keepdims=True)
    write_embeddings(root / "img", ids, img)
    write_embeddings(root / "txt", ids, txt)
    aes = {k: round(float(v), 3) for k, v in zip(ids, rng.uniform(2.0, 6.0, size=len(ids)))}
    write_aesthetic(root / "aesthetic.jsonl", aes)
    return root / "img", root / "txt", root / "aesthetic.jsonl"


def desk_ids(scene):
    return [f"{scene.name}/{o.id:04d}/{k:03d}" for o in scene.objects for k in range(8)]


def write_config(tmp_path, out_dir, stub_path, score_paths, extra=""):
    img, txt, aes = score_paths
    cfg = f"""
[pipeline]
scene = {json.dumps(str(bundled_scene_path()))}
out_dir = {json.dumps(str(out_dir))}

[stage.filter-vlm]
stub = {json.dumps(str(stub_path))}

[stage.score]
image_emb = {json.dumps(str(img))}
text_emb = {json.dumps(str(txt))}
aesthetic = {json.dumps(str(aes))}

[stage.sample]
splits = "train:0.6,val:0.2,test:0.2"
{extra}
"""
    path = tmp_path / "run.toml"
    path.write_text(cfg)
    return path


def scripted_stub(scene):
    """Filter verdicts keyed by image id: mostly GOOD, a few BAD, one garbage-then-GOOD."""
    ids = desk_ids(scene)
    filt = {}
    for i, k in enumerate(ids):
        filt[k] = "BAD: extreme close-up of surface" if i % 5 == 3 else "GOOD: clear object with context"
    filt[ids[1]] = ["The image looks fine to me.", "GOOD: red ball on a floor"]
    return {
        "filter": filt,
        "caption": {},
        "default": {"caption": "A small colored object resting on a gray floor inside a plain room."},
    }


DEG = math.pi / 180


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
