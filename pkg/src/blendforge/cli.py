"""Command line for the blendforge pipeline.

Every flag has a twin key in the TOML config under ``[stage.<subcommand>]``
(dashes become underscores); flags given on the command line win.
Exit codes: 0 success, 1 configuration error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import camgen, imgfilter, pipeline, quality, vlm
from .scene import ParseError, ValidationError, load_scene

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2


def _opts(args: argparse.Namespace, stage: str, defaults: dict) -> dict:
    """Merge config-file stage table, then defaults, then explicit CLI flags."""
    cfg = pipeline.load_config(args.config) if getattr(args, "config", None) else {}
    merged = dict(defaults)
    merged.update({k.replace("-", "_"): v for k, v in pipeline.stage_cfg(cfg, stage).items()})
    for key, value in vars(args).items():
        if value is not None and key not in ("cmd", "config", "func", "verbose"):
            merged[key] = value
    merged["_cfg"] = cfg
    return merged


def _path(o: dict, key: str) -> Path:
    if not o.get(key):
        raise pipeline.ConfigError(f"--{key.replace('_', '-')} is required")
    cfg = o.get("_cfg") or {}
    return pipeline._resolve(cfg, str(o[key])) if cfg else Path(o[key])


def _gateway(o: dict) -> vlm.VlmGateway:
    if o.get("stub") == "offline":
        return vlm.StubGateway(rule=pipeline.offline_rule())
    if o.get("stub"):
        return vlm.StubGateway.from_file(_path(o, "stub"))
    if not o.get("vlm_endpoint"):
        raise pipeline.ConfigError("--vlm-endpoint or --stub is required")
    return vlm.OpenAIGateway(o["vlm_endpoint"], o.get("model", vlm.DEFAULT_MODEL),
                             max_in_flight=int(o.get("max_in_flight", 8)))


def cmd_poses(args) -> int:
    o = _opts(args, "poses", {"spatial": "uniform", "grid_n": 4, "count": 5000, "seed": 0})
    camera = camgen.CameraConfig.from_dict(o)
    if o.get("baseline"):
        if o.get("scene"):
            scene = load_scene(_path(o, "scene"))
            aabb, name = scene.scene_aabb, scene.name
        elif o.get("aabb"):
            vals = [float(v) for v in str(o["aabb"]).split(",")]
            aabb, name = camgen.Aabb(tuple(vals[:3]), tuple(vals[3:])), o.get("scene_name", "scene")
        else:
            raise pipeline.ConfigError("baseline poses need --scene or --aabb")
        poses = camgen.sample_baseline_poses(aabb, o["baseline"], o["spatial"], int(o["count"]), int(o["seed"]),
                                             int(o["grid_n"]), name, camera.fov_y, camera.width, camera.height)
    else:
        scene = load_scene(_path(o, "scene"))
        name = scene.name
        poses, skips = camgen.place_scene_cameras(scene, camera)
        for skip in skips:
            print(f"skipped: {skip}", file=sys.stderr)
    out = _path(o, "out")
    out.parent.mkdir(parents=True, exist_ok=True)
    camgen.write_poses(poses, out)
    if o.get("manifest_out"):
        pipeline.write_manifest([pipeline.new_record(p, name) for p in poses], _path(o, "manifest_out"))
    print(f"{len(poses)} poses -> {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    o = _opts(args, "render", {"workers": 1})
    scene = load_scene(_path(o, "scene"))
    out_dir = _path(o, "out_dir")
    records = [pipeline.new_record(p, scene.name) for p in camgen.read_poses(_path(o, "poses"))]
    records = pipeline.stage_render(records, scene, out_dir, int(o["workers"]))
    manifest = _path(o, "manifest_out") if o.get("manifest_out") else out_dir / "manifest.jsonl"
    pipeline.write_manifest(records, manifest)
    errors = pipeline.error_counts(records)["render"]
    print(f"rendered {len(records) - errors}/{len(records)} -> {out_dir}; manifest {manifest}")
    return EXIT_STAGE if errors else EXIT_OK


def cmd_filter_heuristic(args) -> int:
    o = _opts(args, "filter-heuristic", {})
    t = imgfilter.HeuristicThresholds(
        **{k: float(o[k]) for k in ("min_brightness", "min_variance", "max_dark_fraction", "black_level") if k in o}
    )
    records = pipeline.read_manifest(_path(o, "manifest"))
    seg_dir = _path(o, "segmaps") if o.get("segmaps") else None
    records = pipeline.stage_heuristic(records, _path(o, "images"), t, seg_dir)
    pipeline.write_manifest(records, _path(o, "out"))
    return _report(records, "heuristic")


def cmd_filter_vlm(args) -> int:
    o = _opts(args, "filter-vlm", {"max_in_flight": 8, "retries": 2})
    prompt = _path(o, "prompt_file").read_text(encoding="utf-8") if o.get("prompt_file") else vlm.FILTER_PROMPT
    records = pipeline.read_manifest(_path(o, "manifest"))
    records = pipeline.stage_vlm(records, _path(o, "images"), _gateway(o), prompt,
                                 int(o["max_in_flight"]), int(o["retries"]))
    pipeline.write_manifest(records, _path(o, "out"))
    return _report(records, "vlm")


def cmd_caption(args) -> int:
    o = _opts(args, "caption", {"max_in_flight": 8, "retries": 2})
    prompt = _path(o, "prompt_file").read_text(encoding="utf-8") if o.get("prompt_file") else vlm.CAPTION_PROMPT
    records = pipeline.read_manifest(_path(o, "manifest"))
    records = pipeline.stage_caption(records, _path(o, "images"), _gateway(o), prompt,
                                     int(o["max_in_flight"]), int(o["retries"]))
    pipeline.write_manifest(records, _path(o, "out"))
    return _report(records, "caption")


def cmd_score(args) -> int:
    o = _opts(args, "score", {})
    records = pipeline.read_manifest(_path(o, "manifest"))
    try:
        image_emb = quality.read_embeddings(_path(o, "image_emb"))
        text_emb = quality.read_embeddings(_path(o, "text_emb"))
        aesthetic = quality.read_aesthetic(_path(o, "aesthetic"))
    except OSError as exc:
        raise pipeline.ConfigError(str(exc)) from exc
    records = pipeline.stage_score(records, image_emb, text_emb, aesthetic,
                                   float(o.get("clip_weight", quality.CLIP_WEIGHT)))
    pipeline.write_manifest(records, _path(o, "out"))
    return _report(records, "score")


def cmd_filter_quality(args) -> int:
    o = _opts(args, "filter-quality", {"min_clip": 20.0, "min_aesthetic": 3.0})
    records = pipeline.read_manifest(_path(o, "manifest"))
    records = pipeline.stage_quality(records, quality.QualityThresholds(float(o["min_clip"]),
                                                                          float(o["min_aesthetic"])))
    pipeline.write_manifest(records, _path(o, "out"))
    return _report(records, "quality")


def cmd_sample(args) -> int:
    o = _opts(args, "sample", {"splits": "train:0.6,val:0.2,test:0.2"})
    records = pipeline.read_manifest(_path(o, "manifest"))
    if o.get("emb", "thumbnail") == "thumbnail":
        pool = [r for r in records if pipeline.eligible(r, "sample")]
        emb = pipeline.thumbnail_embeddings(pool, _path(o, "images"))
    else:
        emb = quality.read_embeddings(_path(o, "emb"))
    total = o.get("total")
    records, members = pipeline.stage_sample(records, emb, o["splits"], None if total is None else int(total))
    out_dir = _path(o, "out_dir")
    pipeline.write_manifest(records, out_dir / "manifest.jsonl")
    for name, keys in members.items():
        keep = set(keys)
        pipeline.write_manifest([r for r in records if r["image_id"] in keep], out_dir / f"{name}.jsonl")
        print(f"{name}: {len(keys)}")
    return _report(records, "sample")


def cmd_stats(args) -> int:
    o = _opts(args, "stats", {})
    records = pipeline.read_manifest(_path(o, "manifest"))
    stats = pipeline.scene_stats(records)
    print(pipeline.format_scene_stats(stats))
    errors = {k: v for k, v in pipeline.error_counts(records).items() if v}
    if errors:
        print(f"errors (not rejections): {errors}")
    if o.get("json_out"):
        _path(o, "json_out").write_text(json.dumps([s.to_json() for s in stats], indent=2) + "\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    o = _opts(args, "ablate", {"count": 5000, "seed": 0, "grid_n": 4, "workers": 1, "max_in_flight": 8})
    if o.get("manifests"):
        manifests = {}
        for path in o["manifests"]:
            recs = pipeline.read_manifest(path)
            methods = {r["method"] for r in recs}
            if len(methods) != 1:
                raise pipeline.ConfigError(f"{path}: expected one method, found {sorted(methods)}")
            manifests[methods.pop()] = recs
        rows = pipeline.ablation_report(manifests)
    else:
        scene = load_scene(_path(o, "scene"))
        camera = camgen.CameraConfig.from_dict(o)
        rows, _ = pipeline.run_ablation(scene, _path(o, "out_dir"), _gateway(o), int(o["count"]), int(o["seed"]),
                                        int(o["grid_n"]), camera, workers=int(o["workers"]),
                                        max_in_flight=int(o["max_in_flight"]))
    print(pipeline.format_ablation(rows))
    if o.get("json_out"):
        _path(o, "json_out").write_text(json.dumps([r.to_json() for r in rows], indent=2) + "\n")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = pipeline.load_config(args.config)
    result = pipeline.run_pipeline(cfg)
    print(pipeline.format_scene_stats(result.stats))
    for name, keys in result.splits.items():
        print(f"{name}: {len(keys)}")
    return EXIT_OK


def _report(records: list[dict], stage: str) -> int:
    funnel = pipeline.funnel_counts(records)
    errors = pipeline.error_counts(records)
    print(f"{stage}: {funnel[stage]} passed, {errors[stage]} errors, {len(records)} records")
    return EXIT_STAGE if errors[stage] else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blendforge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="TOML config with a [stage.%s] table" % name)
        sp.set_defaults(func=func)
        return sp

    sp = add("poses", cmd_poses, "generate camera poses (object-centric or baseline)")
    sp.add_argument("--scene")
    sp.add_argument("--out")
    sp.add_argument("--manifest-out", dest="manifest_out")
    sp.add_argument("--baseline", choices=camgen.BASELINE_METHODS)
    sp.add_argument("--spatial", choices=camgen.SPATIAL_MODES)
    sp.add_argument("--grid-n", dest="grid_n", type=int)
    sp.add_argument("--count", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--aabb", help="minx,miny,minz,maxx,maxy,maxz (baseline without a scene file)")

    sp = add("render", cmd_render, "render poses to RGB + segmentation PNGs")
    sp.add_argument("--scene")
    sp.add_argument("--poses")
    sp.add_argument("--out-dir", dest="out_dir")
    sp.add_argument("--manifest-out", dest="manifest_out")
    sp.add_argument("--workers", type=int)

    sp = add("filter-heuristic", cmd_filter_heuristic, "zero fill / brightness / variance / dark fraction")
    sp.add_argument("--images")
    sp.add_argument("--segmaps")
    sp.add_argument("--manifest")
    sp.add_argument("--out")
    sp.add_argument("--min-brightness", dest="min_brightness", type=float)
    sp.add_argument("--min-variance", dest="min_variance", type=float)
    sp.add_argument("--max-dark-fraction", dest="max_dark_fraction", type=float)
    sp.add_argument("--black-level", dest="black_level", type=float)

    for name, func, help_ in (("filter-vlm", cmd_filter_vlm, "captionability verdicts from a VLM"),
                              ("caption", cmd_caption, "caption VLM-approved images")):
        sp = add(name, func, help_)
        sp.add_argument("--manifest")
        sp.add_argument("--images")
        sp.add_argument("--out")
        sp.add_argument("--prompt-file", dest="prompt_file")
        sp.add_argument("--max-in-flight", dest="max_in_flight", type=int)
        sp.add_argument("--retries", type=int)
        sp.add_argument("--stub", help="scripted responses JSON, or 'offline'")
        sp.add_argument("--vlm-endpoint", dest="vlm_endpoint")
        sp.add_argument("--model")

    sp = add("score", cmd_score, "attach CLIPScore and aesthetic scores")
    sp.add_argument("--manifest")
    sp.add_argument("--image-emb", dest="image_emb")
    sp.add_argument("--text-emb", dest="text_emb")
    sp.add_argument("--aesthetic")
    sp.add_argument("--out")

    sp = add("filter-quality", cmd_filter_quality, "drop low CLIPScore / aesthetic images")
    sp.add_argument("--manifest")
    sp.add_argument("--out")
    sp.add_argument("--min-clip", dest="min_clip", type=float)
    sp.add_argument("--min-aesthetic", dest="min_aesthetic", type=float)

    sp = add("sample", cmd_sample, "diversity-aware train/val/test selection")
    sp.add_argument("--manifest")
    sp.add_argument("--emb", help="embedding prefix, or 'thumbnail'")
    sp.add_argument("--images")
    sp.add_argument("--splits")
    sp.add_argument("--total", type=int)
    sp.add_argument("--out-dir", dest="out_dir")

    sp = add("stats", cmd_stats, "scene-wise funnel statistics")
    sp.add_argument("--manifest")
    sp.add_argument("--json-out", dest="json_out")

    sp = add("ablate", cmd_ablate, "camera placement ablation report")
    sp.add_argument("--manifests", nargs="+")
    sp.add_argument("--scene")
    sp.add_argument("--out-dir", dest="out_dir")
    sp.add_argument("--count", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--grid-n", dest="grid_n", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--max-in-flight", dest="max_in_flight", type=int)
    sp.add_argument("--stub")
    sp.add_argument("--vlm-endpoint", dest="vlm_endpoint")
    sp.add_argument("--json-out", dest="json_out")

    sp = sub.add_parser("run", help="full pipeline from a TOML config")
    sp.add_argument("--config", required=True)
    sp.set_defaults(func=cmd_run)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (pipeline.ConfigError, ParseError, ValidationError, camgen.InvalidConfig) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, vlm.GatewayError, pipeline.MismatchedScenes, ValueError) as exc:
        print(f"stage failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    raise SystemExit(main())
