import json
import shutil

import numpy as np
import pytest

from blendforge import camgen, pipeline, vlm
from blendforge.pipeline import (
    STAGE_FILES, STAGES, MismatchedScenes, ablation_report, format_ablation, format_count, format_mean_std,
    read_manifest, scene_stats, write_manifest,
)
from blendforge.scene import load_scene
from blendforge import bundled_scene_path

from conftest import desk_ids, scripted_stub, write_config, write_score_fixtures


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    scene = load_scene(bundled_scene_path())
    stub = root / "stub.json"
    stub.write_text(json.dumps(scripted_stub(scene)))
    scores = write_score_fixtures(desk_ids(scene), root)
    cfg_path = write_config(root, root / "out", stub, scores)
    result = pipeline.run_pipeline(pipeline.load_config(cfg_path))
    return root, cfg_path, result


def _snapshot(out_dir):
    return {p.relative_to(out_dir).as_posix(): p.read_bytes()
            for p in sorted(out_dir.rglob("*.jsonl"))} | {"stats.json": (out_dir / "stats.json").read_bytes()}


def test_all_manifests_written(desk_run):
    _, _, result = desk_run
    for name in STAGE_FILES.values():
        assert (result.out_dir / name).exists()
    assert set(result.splits) == {"train", "val", "test"}


def test_funnel_monotone(desk_run):
    _, _, result = desk_run
    recs = read_manifest(result.out_dir / STAGE_FILES["sample"])
    counts = [pipeline.funnel_counts(recs)[s] for s in STAGES]
    assert counts == sorted(counts, reverse=True)
    assert counts[0] == len(recs) == 64
    assert counts[-1] > 0


def test_status_monotone_per_record(desk_run):
    _, _, result = desk_run
    for rec in read_manifest(result.out_dir / STAGE_FILES["sample"]):
        stopped = False
        for s in STAGES:
            st = rec["stages"][s]["status"]
            if stopped:
                assert st == "pending"
            elif st != "passed":
                stopped = True
        if "caption" in rec:
            assert rec["stages"]["vlm"]["status"] == "passed"
        if "split" in rec:
            assert rec["stages"]["quality"]["status"] == "passed"


def test_occluded_object_zero_fill(desk_run):
    _, _, result = desk_run
    recs = read_manifest(result.out_dir / STAGE_FILES["heuristic"])
    pole = [r for r in recs if r["object_id"] == 8]
    assert len(pole) == 8
    for r in pole:
        assert r["stages"]["heuristic"]["status"] == "rejected"
        assert "zero_fill" in r["stages"]["heuristic"]["reasons"]
    # the visible balls are not zero-fill
    assert all("zero_fill" not in r["heuristic"]["reasons"] for r in recs if r["object_id"] in (1, 3))


def test_vlm_script_applied(desk_run):
    _, _, result = desk_run
    recs = {r["image_id"]: r for r in read_manifest(result.out_dir / STAGE_FILES["vlm"])}
    retried = recs["desk/0001/001"]
    if retried["stages"]["vlm"]["status"] != "pending":
        assert retried["stages"]["vlm"]["status"] == "passed"
        assert retried["vlm_reason"] == "red ball on a floor"
    bad = [r for r in recs.values() if r["stages"]["vlm"]["status"] == "rejected"]
    assert bad and all(r["stages"]["vlm"]["reasons"] == ["vlm_bad"] for r in bad)


def test_splits_disjoint_and_ratio(desk_run):
    _, _, result = desk_run
    all_ids = [k for keys in result.splits.values() for k in keys]
    assert len(all_ids) == len(set(all_ids))
    n = len(all_ids)
    sizes = [len(result.splits[k]) for k in ("train", "val", "test")]
    assert sizes == pipeline.sampler.largest_remainder([0.6, 0.2, 0.2], n)
    for name, keys in result.splits.items():
        lines = read_manifest(result.out_dir / "splits" / f"{name}.jsonl")
        assert [r["image_id"] for r in lines] == sorted(keys)
        assert all(r["split"] == name for r in lines)


def test_manifest_canonical_bytes(desk_run):
    _, _, result = desk_run
    path = result.out_dir / STAGE_FILES["sample"]
    raw = path.read_bytes()
    write_manifest(read_manifest(path), path)
    assert path.read_bytes() == raw


def test_stats_recount(desk_run):
    _, _, result = desk_run
    lines = (result.out_dir / STAGE_FILES["sample"]).read_text().splitlines()
    heur = sum('"heuristic": {"status": "passed"}' in line for line in lines)
    vl = sum('"vlm": {"status": "passed"}' in line for line in lines)
    (s,) = result.stats
    assert (s.total, s.heuristic_passed, s.vlm_passed) == (len(lines), heur, vl)
    text = (result.out_dir / "stats.txt").read_text()
    for col in ("Total", "Heuristic Passed", "VLM Passed", "CLIP Score", "Aesthetic"):
        assert col in text
    assert format_count(heur, len(lines)) in text


def test_rerun_is_byte_identical(desk_run):
    root, cfg_path, result = desk_run
    before = _snapshot(result.out_dir)
    pipeline.run_pipeline(pipeline.load_config(cfg_path))
    assert _snapshot(result.out_dir) == before


def test_stage_idempotence(desk_run):
    _, _, result = desk_run
    out = result.out_dir
    recs = read_manifest(out / STAGE_FILES["heuristic"])
    again = pipeline.stage_heuristic(recs, out / "images")
    assert again == recs
    q = read_manifest(out / STAGE_FILES["quality"])
    assert pipeline.stage_quality(q) == q


def test_resume_after_crash(desk_run, tmp_path):
    root, cfg_path, result = desk_run
    expected = _snapshot(result.out_dir)
    # copy the run, then pretend it died after the heuristic stage with half the renders on disk
    out = tmp_path / "out"
    shutil.copytree(result.out_dir, out)
    for name in ("vlm", "caption", "score", "quality", "sample"):
        (out / STAGE_FILES[name]).unlink()
    shutil.rmtree(out / "splits")
    (out / "stats.json").unlink()
    for p in sorted((out / "images").rglob("*.png"))[::2]:
        p.unlink()
    cfg = pipeline.load_config(cfg_path)
    cfg["pipeline"]["out_dir"] = str(out)
    pipeline.run_pipeline(cfg)
    assert _snapshot(out) == expected


def test_gateway_error_is_not_rejection(tmp_path, desk):
    recs = [pipeline.new_record(p, "desk") for p in camgen.place_scene_cameras(desk)[0][:8]]
    recs = pipeline.stage_render(recs, desk, tmp_path)
    for r in recs:
        r["stages"]["heuristic"] = {"status": "passed"}
    stub = vlm.StubGateway(default="GOOD: fine", responses={recs[0]["image_id"]: {"error": 500}})
    out = pipeline.stage_vlm(recs, tmp_path, stub)
    assert out[0]["stages"]["vlm"] == {"status": "error", "error": out[0]["stages"]["vlm"]["error"]}
    assert pipeline.error_counts(out)["vlm"] == 1
    assert pipeline.funnel_counts(out)["vlm"] == 7


def test_missing_score_is_error(tmp_path, desk):
    from blendforge.quality import EmbeddingStore
    rec = pipeline.new_record(camgen.place_scene_cameras(desk)[0][0], "desk")
    for s in ("render", "heuristic", "vlm", "caption"):
        rec["stages"][s] = {"status": "passed"}
    empty = EmbeddingStore([], np.empty((0, 4)))
    (out,) = pipeline.stage_score([rec], empty, empty, {})
    assert out["stages"]["score"]["status"] == "error"


# -- stats and ablation on synthetic manifests ---------------------------------------


def _synthetic(scene, method, n, heur, vl, clips=()):
    recs = []
    for i in range(n):
        st = {s: {"status": "pending"} for s in STAGES}
        st["render"] = {"status": "passed"}
        st["heuristic"] = {"status": "passed"} if i < heur else {"status": "rejected", "reasons": ["variance"]}
        if i < heur:
            st["vlm"] = {"status": "passed"} if i < vl else {"status": "rejected", "reasons": ["vlm_bad"]}
        rec = {"image_id": f"{scene}/{method}/{i:05d}", "scene": scene, "method": method, "stages": st}
        if i < len(clips):
            rec["clip_score"] = clips[i]
            rec["aesthetic_score"] = 4.0
        recs.append(rec)
    return recs


def test_scene_stats_examples():
    (s,) = scene_stats(_synthetic("a", "m", 100, 45, 2, clips=[20.0, 30.0]))
    assert format_count(s.heuristic_passed, s.total) == "45 (45.0%)"
    assert (s.clip_mean, s.clip_std) == (25.0, 5.0)
    assert format_mean_std(s.clip_mean, s.clip_std) == "25.00 ± 5.00"
    assert s.aesthetic_std == 0.0


def test_ablation_flags_and_ties():
    rows = ablation_report({
        "object_centric": _synthetic("s", "object_centric", 1000, 161, 50),
        "anchor_sweep-uniform": _synthetic("s", "anchor_sweep-uniform", 1000, 104, 50),
    })
    oc, an = rows
    assert oc.best_heuristic and not an.best_heuristic
    assert oc.best_vlm and an.best_vlm
    text = format_ablation(rows)
    assert "16.1*" in text and "10.4" in text and "Heur. uniform" in text


def test_ablation_needs_two_methods_one_scene():
    with pytest.raises(MismatchedScenes):
        ablation_report({"object_centric": _synthetic("s", "object_centric", 4, 1, 1)})
    with pytest.raises(MismatchedScenes):
        ablation_report({"a": _synthetic("s", "a", 4, 1, 1), "b": _synthetic("t", "b", 4, 1, 1)})


def test_config_errors(tmp_path):
    with pytest.raises(pipeline.ConfigError):
        pipeline.run_pipeline({"pipeline": {}})
    bad = tmp_path / "bad.toml"
    bad.write_text("[pipeline\n")
    with pytest.raises(pipeline.ConfigError):
        pipeline.load_config(bad)
