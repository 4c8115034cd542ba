"""Stage orchestration over JSONL manifests, scene statistics and the
camera-placement ablation report.

Every stage reads a manifest and writes a new one; records are never edited
in place on disk. A stage only processes records whose earlier stages all
passed; everything else keeps ``pending`` for this stage, so rejections and
errors stay visible exactly once along the funnel.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

import numpy as np

from . import camgen, imgfilter, quality, render, sampler, vlm
from .scene import Scene, load_scene

log = logging.getLogger(__name__)

STAGES = ("render", "heuristic", "vlm", "caption", "score", "quality", "sample")
STAGE_FILES = {
    "poses": "01_poses.jsonl",
    "render": "02_render.jsonl",
    "heuristic": "03_heuristic.jsonl",
    "vlm": "04_vlm.jsonl",
    "caption": "05_caption.jsonl",
    "score": "06_score.jsonl",
    "quality": "07_quality.jsonl",
    "sample": "08_sample.jsonl",
}
RECORD_KEYS = (
    "image_id", "scene", "object_id", "method", "azimuth_deg", "elevation_deg", "distance",
    "sample_index", "pose", "rgb", "seg", "stages", "heuristic", "vlm_reason", "caption",
    "caption_words", "caption_length_warning", "clip_score", "aesthetic_score", "split",
)

PENDING, PASSED, REJECTED, ERROR = "pending", "passed", "rejected", "error"


class ConfigError(ValueError):
    """Bad or missing configuration; maps to CLI exit code 1."""


class MismatchedScenes(ValueError):
    pass


# -- records ------------------------------------------------------------------


def new_record(pose: camgen.CameraPose, scene: str) -> dict:
    pj = camgen.pose_to_json(pose)
    return canonical(
        {
            "image_id": pose.id,
            "scene": scene,
            "object_id": pose.object_id,
            "method": pose.method,
            "azimuth_deg": pj["azimuth_deg"],
            "elevation_deg": pj["elevation_deg"],
            "distance": pose.distance,
            "sample_index": pose.sample_index,
            "pose": {k: pj[k] for k in ("position", "rotation", "fov_y_deg", "width", "height")},
            "rgb": None,
            "seg": None,
            "stages": {s: {"status": PENDING} for s in STAGES},
        }
    )


def canonical(rec: Mapping) -> dict:
    """Stable key order: known keys first in schema order, then the rest sorted."""
    out = {k: rec[k] for k in RECORD_KEYS if k in rec}
    for k in sorted(set(rec) - set(RECORD_KEYS)):
        out[k] = rec[k]
    return out


def record_pose(rec: Mapping) -> camgen.CameraPose:
    data = dict(rec["pose"])
    data.update(id=rec["image_id"], method=rec.get("method"), object_id=rec.get("object_id"),
                azimuth_deg=rec.get("azimuth_deg"), elevation_deg=rec.get("elevation_deg"),
                distance=rec.get("distance"), sample_index=rec.get("sample_index"))
    return camgen.pose_from_json(data)


def status(rec: Mapping, stage: str) -> str:
    return rec["stages"][stage]["status"]


def eligible(rec: Mapping, stage: str) -> bool:
    """True when every stage before ``stage`` passed."""
    for s in STAGES[: STAGES.index(stage)]:
        if status(rec, s) != PASSED:
            return False
    return True


def _set(rec: dict, stage: str, state: str, reasons: list[str] | None = None, error: str | None = None) -> None:
    entry: dict[str, Any] = {"status": state}
    if state == REJECTED:
        entry["reasons"] = list(reasons or [])
    if state == ERROR:
        entry["error"] = error or ""
    rec["stages"][stage] = entry


def _reset_from(rec: dict, stage: str) -> None:
    """Mark ``stage`` and all later stages pending and drop their outputs."""
    later = STAGES[STAGES.index(stage):]
    for s in later:
        rec["stages"][s] = {"status": PENDING}
    drop = {
        "heuristic": ("heuristic",),
        "vlm": ("vlm_reason",),
        "caption": ("caption", "caption_words", "caption_length_warning"),
        "score": ("clip_score", "aesthetic_score"),
        "sample": ("split",),
    }
    for s in later:
        for key in drop.get(s, ()):
            rec.pop(key, None)


def read_manifest(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_manifest(records: Iterable[Mapping], path: str | Path) -> None:
    """Write sorted, canonical JSONL atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    rows = sorted((canonical(r) for r in records), key=lambda r: r["image_id"])
    with open(tmp, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, ensure_ascii=False, allow_nan=False) + "\n")
    os.replace(tmp, path)


def _copy(records: Iterable[Mapping]) -> list[dict]:
    return [json.loads(json.dumps(r)) for r in records]


def _by_id(records: Iterable[Mapping] | None) -> dict[str, Mapping]:
    return {r["image_id"]: r for r in records} if records else {}


def _reusable(prev: Mapping | None, stage: str) -> bool:
    return prev is not None and status(prev, stage) in (PASSED, REJECTED)


# -- stages -------------------------------------------------------------------


def stage_poses(scene: Scene, config: camgen.CameraConfig = camgen.CameraConfig(),
                baseline: str | None = None, spatial: str = "uniform", grid_n: int = 4,
                count: int = 5000, seed: int = 0) -> list[dict]:
    if baseline is None:
        poses, _ = camgen.place_scene_cameras(scene, config)
    else:
        poses = camgen.sample_baseline_poses(
            scene.scene_aabb, baseline, spatial, count, seed, grid_n, scene.name,
            config.fov_y, config.width, config.height,
        )
    return [new_record(p, scene.name) for p in poses]


def stage_render(records: list[dict], scene: Scene, image_dir: str | Path, workers: int = 1,
                 previous: list[dict] | None = None) -> list[dict]:
    image_dir = Path(image_dir)
    out = _copy(records)
    prev = _by_id(previous)
    todo = []
    for rec in out:
        _reset_from(rec, "render")
        rgb_rel, seg_rel = f"{rec['image_id']}.png", f"{rec['image_id']}.seg.png"
        rec["rgb"], rec["seg"] = rgb_rel, seg_rel
        p = prev.get(rec["image_id"])
        if _reusable(p, "render") and (image_dir / rgb_rel).exists() and (image_dir / seg_rel).exists():
            _set(rec, "render", PASSED)
        else:
            todo.append(rec)

    def work(rec):
        rgb, seg = render.render_view(scene, record_pose(rec))
        render.save_rgb(rgb, image_dir / rec["rgb"])
        render.save_seg(seg, image_dir / rec["seg"])

    for rec, result in zip(todo, vlm.map_bounded(work, todo, workers)):
        if isinstance(result, Exception):
            _set(rec, "render", ERROR, error=f"{type(result).__name__}: {result}")
        else:
            _set(rec, "render", PASSED)
    return out


def stage_heuristic(records: list[dict], image_dir: str | Path,
                    thresholds: imgfilter.HeuristicThresholds = imgfilter.HeuristicThresholds(),
                    segmap_dir: str | Path | None = None) -> list[dict]:
    image_dir = Path(image_dir)
    segmap_dir = Path(segmap_dir) if segmap_dir is not None else image_dir
    out = _copy(records)
    for rec in out:
        _reset_from(rec, "heuristic")
        if not eligible(rec, "heuristic"):
            continue
        try:
            rgb = render.load_rgb(image_dir / rec["rgb"])
            seg, oid = None, rec.get("object_id")
            if oid is not None and rec.get("seg"):
                seg = render.load_seg(segmap_dir / rec["seg"])
            else:
                oid = None
            decision = imgfilter.heuristic_decide(rgb, seg, oid, thresholds)
        except (OSError, imgfilter.EmptyImage) as exc:
            _set(rec, "heuristic", ERROR, error=f"{type(exc).__name__}: {exc}")
            continue
        rec["heuristic"] = {"reasons": decision.reasons, "stats": decision.stats}
        _set(rec, "heuristic", PASSED if decision.passed else REJECTED, decision.reasons)
    return out


def stage_vlm(records: list[dict], image_dir: str | Path, gateway: vlm.VlmGateway,
              prompt: str = vlm.FILTER_PROMPT, max_in_flight: int = 8, retries: int = 2,
              previous: list[dict] | None = None) -> list[dict]:
    image_dir = Path(image_dir)
    out = _copy(records)
    prev = _by_id(previous)
    todo = []
    for rec in out:
        _reset_from(rec, "vlm")
        if not eligible(rec, "vlm"):
            continue
        p = prev.get(rec["image_id"])
        if _reusable(p, "vlm"):
            rec["stages"]["vlm"] = dict(p["stages"]["vlm"])
            rec["vlm_reason"] = p.get("vlm_reason")
        else:
            todo.append(rec)

    def work(rec):
        png = (image_dir / rec["rgb"]).read_bytes()
        return vlm.filter_image(gateway, png, prompt, retries, rec["image_id"])

    for rec, result in zip(todo, vlm.map_bounded(work, todo, max_in_flight)):
        if isinstance(result, Exception):
            _set(rec, "vlm", ERROR, error=f"{type(result).__name__}: {result}")
            continue
        rec["vlm_reason"] = result.reason
        if result.accepted:
            _set(rec, "vlm", PASSED)
        else:
            _set(rec, "vlm", REJECTED, ["unparseable" if result.reason == "unparseable" else "vlm_bad"])
    return out


def stage_caption(records: list[dict], image_dir: str | Path, gateway: vlm.VlmGateway,
                  prompt: str = vlm.CAPTION_PROMPT, max_in_flight: int = 8, retries: int = 2,
                  previous: list[dict] | None = None) -> list[dict]:
    image_dir = Path(image_dir)
    out = _copy(records)
    prev = _by_id(previous)
    todo = []
    for rec in out:
        _reset_from(rec, "caption")
        if not eligible(rec, "caption"):
            continue
        p = prev.get(rec["image_id"])
        if _reusable(p, "caption"):
            rec["stages"]["caption"] = dict(p["stages"]["caption"])
            for k in ("caption", "caption_words", "caption_length_warning"):
                if k in p:
                    rec[k] = p[k]
        else:
            todo.append(rec)

    def work(rec):
        png = (image_dir / rec["rgb"]).read_bytes()
        return vlm.caption_image(gateway, png, prompt, retries, rec["image_id"])

    for rec, result in zip(todo, vlm.map_bounded(work, todo, max_in_flight)):
        if isinstance(result, vlm.UnparseableCaption):
            _set(rec, "caption", REJECTED, ["unparseable"])
        elif isinstance(result, Exception):
            _set(rec, "caption", ERROR, error=f"{type(result).__name__}: {result}")
        else:
            rec["caption"] = result.text
            rec["caption_words"] = result.word_count
            rec["caption_length_warning"] = result.length_warning
            _set(rec, "caption", PASSED)
    return out


def stage_score(records: list[dict], image_emb: quality.EmbeddingStore, text_emb: quality.EmbeddingStore,
                aesthetic: Mapping[str, float], clip_weight: float = quality.CLIP_WEIGHT) -> list[dict]:
    """Attach CLIPScore and aesthetic score; missing inputs are per-record errors."""
    out = _copy(records)
    for rec in out:
        _reset_from(rec, "score")
        if not eligible(rec, "score"):
            continue
        key = rec["image_id"]
        try:
            if key not in aesthetic:
                raise quality.MissingScore(f"no aesthetic score for {key!r}")
            rec["clip_score"] = quality.clip_score(image_emb[key], text_emb[key], clip_weight)
            rec["aesthetic_score"] = float(aesthetic[key])
        except (quality.MissingScore, quality.DimensionMismatch, quality.ZeroVector) as exc:
            rec.pop("clip_score", None)
            _set(rec, "score", ERROR, error=f"{type(exc).__name__}: {exc}")
            continue
        _set(rec, "score", PASSED)
    return out


def stage_quality(records: list[dict], thresholds: quality.QualityThresholds = quality.QualityThresholds()) -> list[dict]:
    out = _copy(records)
    for rec in out:
        _reset_from(rec, "quality")
        if not eligible(rec, "quality"):
            continue
        pair = quality.ScoredPair(rec["image_id"], rec.get("clip_score"), rec.get("aesthetic_score"))
        try:
            passed, reasons = quality.quality_decide(pair, thresholds)
        except quality.MissingScore as exc:
            _set(rec, "quality", ERROR, error=str(exc))
            continue
        _set(rec, "quality", PASSED if passed else REJECTED, reasons)
    return out


def thumbnail_embeddings(records: list[dict], image_dir: str | Path, size: int = 16) -> quality.EmbeddingStore:
    """Block-averaged RGB thumbnails as cheap stand-in image embeddings.

    Not a semantic model: it only separates renders by coarse layout and
    color, enough to exercise diversity sampling offline.
    """
    image_dir = Path(image_dir)
    ids, rows = [], []
    for rec in records:
        img = render.load_rgb(image_dir / rec["rgb"]).astype(np.float64) / 255.0
        h, w = img.shape[:2]
        ys = np.linspace(0, h, size + 1).astype(int)
        xs = np.linspace(0, w, size + 1).astype(int)
        thumb = np.array(
            [[img[ys[i]:ys[i + 1], xs[j]:xs[j + 1]].mean(axis=(0, 1)) for j in range(size)] for i in range(size)]
        )
        ids.append(rec["image_id"])
        rows.append(thumb.ravel())
    dim = 3 * size * size
    return quality.EmbeddingStore(ids, np.array(rows) if rows else np.empty((0, dim)))


def stage_sample(records: list[dict], emb: quality.EmbeddingStore, splits: str = "train:0.6,val:0.2,test:0.2",
                 total: int | None = None) -> tuple[list[dict], dict[str, list[str]]]:
    """Diversity-aware split selection over the records that passed quality.

    ``total=None`` uses the whole eligible pool.
    """
    out = _copy(records)
    pool: list[dict] = []
    for rec in out:
        _reset_from(rec, "sample")
        if eligible(rec, "sample"):
            pool.append(rec)
    usable, vectors = [], []
    for rec in pool:
        key = rec["image_id"]
        if key not in emb:
            _set(rec, "sample", ERROR, error=f"no embedding for {key!r}")
            continue
        v = np.asarray(emb[key], dtype=np.float64)
        if not np.linalg.norm(v) > 0:
            _set(rec, "sample", ERROR, error="zero embedding")
            continue
        usable.append(rec)
        vectors.append(v)
    want = len(usable) if total is None else total
    if want > len(usable):
        raise ConfigError(f"sample total {want} exceeds {len(usable)} eligible images")
    plan = sampler.SplitPlan.parse(splits, want)
    members: dict[str, list[str]] = {name: [] for name in plan.names}
    if usable:
        matrix = sampler.normalize_embeddings(np.array(vectors), [r["image_id"] for r in usable])
        members = sampler.multi_split_assign(matrix, plan).ids(matrix)
    chosen = {key: name for name, keys in members.items() for key in keys}
    for rec in usable:
        name = chosen.get(rec["image_id"])
        if name is None:
            _set(rec, "sample", REJECTED, ["not_selected"])
        else:
            rec["split"] = name
            _set(rec, "sample", PASSED)
    return out, members


# -- statistics -----------------------------------------------------------------


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


@dataclass
class SceneStats:
    scene: str
    total: int
    heuristic_passed: int
    vlm_passed: int
    clip_mean: float | None
    clip_std: float | None
    aesthetic_mean: float | None
    aesthetic_std: float | None

    @property
    def heuristic_pct(self) -> float:
        return 100.0 * self.heuristic_passed / self.total if self.total else 0.0

    @property
    def vlm_pct(self) -> float:
        return 100.0 * self.vlm_passed / self.total if self.total else 0.0

    def to_json(self) -> dict:
        return {
            "scene": self.scene,
            "total": self.total,
            "heuristic_passed": self.heuristic_passed,
            "heuristic_pct": self.heuristic_pct,
            "vlm_passed": self.vlm_passed,
            "vlm_pct": self.vlm_pct,
            "clip_mean": self.clip_mean,
            "clip_std": self.clip_std,
            "aesthetic_mean": self.aesthetic_mean,
            "aesthetic_std": self.aesthetic_std,
        }


def scene_stats(records: list[Mapping]) -> list[SceneStats]:
    """Per-scene funnel counts; score mean/std (population) over VLM-passed records."""
    if not records:
        raise ValueError("manifest is empty")
    groups: dict[str, list[Mapping]] = {}
    for rec in records:
        groups.setdefault(rec["scene"], []).append(rec)
    out = []
    for name in sorted(groups):
        recs = groups[name]
        vlm_ok = [r for r in recs if status(r, "vlm") == PASSED]
        clips = [r["clip_score"] for r in vlm_ok if r.get("clip_score") is not None]
        aes = [r["aesthetic_score"] for r in vlm_ok if r.get("aesthetic_score") is not None]
        out.append(
            SceneStats(
                scene=name,
                total=len(recs),
                heuristic_passed=sum(status(r, "heuristic") == PASSED for r in recs),
                vlm_passed=len(vlm_ok),
                clip_mean=_mean_std(clips)[0],
                clip_std=_mean_std(clips)[1],
                aesthetic_mean=_mean_std(aes)[0],
                aesthetic_std=_mean_std(aes)[1],
            )
        )
    return out


def format_count(n: int, total: int) -> str:
    return f"{n} ({100.0 * n / total:.1f}%)" if total else f"{n} (n/a)"


def format_mean_std(mean: float | None, std: float | None) -> str:
    return "n/a" if mean is None else f"{mean:.2f} ± {std:.2f}"


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) if rows else len(header[i]) for i in range(len(header))]
    fmt = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))  # noqa: E731
    lines = [fmt(header), "  ".join("-" * w for w in widths)]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines)


STATS_HEADER = ["Scene", "Total", "Heuristic Passed", "VLM Passed", "CLIP Score", "Aesthetic"]


def format_scene_stats(stats: list[SceneStats]) -> str:
    rows = [
        [s.scene, str(s.total), format_count(s.heuristic_passed, s.total), format_count(s.vlm_passed, s.total),
         format_mean_std(s.clip_mean, s.clip_std), format_mean_std(s.aesthetic_mean, s.aesthetic_std)]
        for s in stats
    ]
    return _table(STATS_HEADER, rows)


# -- ablation -------------------------------------------------------------------

OBJECT_CENTRIC = "object_centric"


@dataclass
class AblationRow:
    scene: str
    method: str
    total: int
    heuristic_passed: int
    vlm_passed: int
    best_heuristic: bool = False
    best_vlm: bool = False

    @property
    def heuristic_pct(self) -> float:
        return 100.0 * self.heuristic_passed / self.total if self.total else 0.0

    @property
    def vlm_pct(self) -> float:
        return 100.0 * self.vlm_passed / self.total if self.total else 0.0

    def to_json(self) -> dict:
        return {
            "scene": self.scene, "method": self.method, "total": self.total,
            "heuristic_passed": self.heuristic_passed, "heuristic_pct": self.heuristic_pct,
            "vlm_passed": self.vlm_passed, "vlm_pct": self.vlm_pct,
            "best_heuristic": self.best_heuristic, "best_vlm": self.best_vlm,
        }


def ablation_report(manifests: Mapping[str, list[Mapping]]) -> list[AblationRow]:
    """Per-method heuristic / VLM pass rates over one scene; best per column flagged (ties all flagged)."""
    if len(manifests) < 2:
        raise MismatchedScenes("ablation needs at least two methods")
    scenes = {method: {r["scene"] for r in recs} for method, recs in manifests.items()}
    names = set().union(*scenes.values())
    if len(names) != 1 or any(len(s) != 1 for s in scenes.values()):
        raise MismatchedScenes(f"methods cover different scenes: {scenes}")
    (scene,) = names
    rows = [
        AblationRow(
            scene=scene,
            method=method,
            total=len(recs),
            heuristic_passed=sum(status(r, "heuristic") == PASSED for r in recs),
            vlm_passed=sum(status(r, "vlm") == PASSED for r in recs),
        )
        for method, recs in manifests.items()
    ]
    best_h = max(r.heuristic_pct for r in rows)
    best_v = max(r.vlm_pct for r in rows)
    for r in rows:
        r.best_heuristic = r.heuristic_pct == best_h
        r.best_vlm = r.vlm_pct == best_v
    return rows


def format_ablation(rows: list[AblationRow]) -> str:
    """Object-centric row(s) on top, then baselines as method x {uniform, grid} columns."""
    mark = lambda pct, best: f"{pct:.1f}{'*' if best else ''}"  # noqa: E731
    by_method = {r.method: r for r in rows}
    scene = rows[0].scene if rows else ""
    top = [[scene, r.method, mark(r.heuristic_pct, r.best_heuristic), mark(r.vlm_pct, r.best_vlm)]
           for r in rows if "-" not in r.method]
    parts = []
    if top:
        parts.append(_table(["Scene", "Method", "Heuristic (%)", "VLM (%)"], top))
    bottom = []
    for base in camgen.BASELINE_METHODS:
        cells = []
        for key in ("heuristic", "vlm"):
            for spatial in camgen.SPATIAL_MODES:
                r = by_method.get(f"{base}-{spatial}")
                cells.append("-" if r is None else mark(getattr(r, f"{key}_pct"), getattr(r, f"best_{key}")))
        if any(c != "-" for c in cells):
            bottom.append([scene, base] + cells)
    if bottom:
        parts.append(_table(["Scene", "Method", "Heur. uniform", "Heur. grid", "VLM uniform", "VLM grid"], bottom))
    parts.append("* best in column")
    return "\n\n".join(parts)


# -- orchestration ------------------------------------------------------------------


def load_config(path: str | Path) -> dict:
    try:
        import tomllib  # type: ignore[import-not-found]
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg.setdefault("_base_dir", str(Path(path).resolve().parent))
    return cfg


def stage_cfg(cfg: Mapping, name: str) -> dict:
    return dict(cfg.get("stage", {}).get(name, {}))


def _resolve(cfg: Mapping, value: str | None) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else Path(cfg.get("_base_dir", ".")) / p


def camera_config(cfg: Mapping) -> camgen.CameraConfig:
    try:
        return camgen.CameraConfig.from_dict(stage_cfg(cfg, "poses"))
    except (camgen.InvalidConfig, TypeError, ValueError) as exc:
        raise ConfigError(f"stage.poses: {exc}") from exc


def heuristic_thresholds(cfg: Mapping) -> imgfilter.HeuristicThresholds:
    sc = stage_cfg(cfg, "filter-heuristic")
    keys = ("min_brightness", "min_variance", "max_dark_fraction", "black_level")
    try:
        return imgfilter.HeuristicThresholds(**{k: float(sc[k]) for k in keys if k in sc})
    except ValueError as exc:
        raise ConfigError(f"stage.filter-heuristic: {exc}") from exc


def quality_thresholds(cfg: Mapping) -> quality.QualityThresholds:
    sc = stage_cfg(cfg, "filter-quality")
    return quality.QualityThresholds(float(sc.get("min_clip", 20.0)), float(sc.get("min_aesthetic", 3.0)))


def offline_rule(min_foreground: float = 0.05, min_contrast: float = 25.0) -> Callable[[vlm.VlmRequest], str]:
    """Deterministic stand-in VLM judging only coarse image structure.

    GOOD when enough pixels differ from the dominant color and the image has
    some contrast; captions are fixed templates. Intended for offline demos
    and tests, never as a substitute for a real captioner.
    """
    import io

    from PIL import Image

    def rule(req: vlm.VlmRequest) -> str:
        with Image.open(io.BytesIO(req.image)) as im:
            gray = imgfilter.grayscale(np.array(im.convert("RGB")))
        values, counts = np.unique(np.rint(gray).astype(int), return_counts=True)
        dominant = values[np.argmax(counts)]
        foreground = float(np.mean(np.abs(gray - dominant) > 8))
        contrast = float(gray.std())
        if req.task == "caption":
            return "A rendered object standing on a flat gray floor under soft daylight."
        if foreground >= min_foreground and contrast >= min_contrast:
            return f"GOOD: distinct shapes cover {foreground:.0%} of frame"
        return "BAD: frame dominated by one flat surface"

    return rule


def make_gateway(sc: Mapping, cfg: Mapping) -> vlm.VlmGateway:
    stub = sc.get("stub")
    if stub == "offline":
        return vlm.StubGateway(rule=offline_rule())
    if stub:
        return vlm.StubGateway.from_file(_resolve(cfg, stub))
    endpoint = sc.get("endpoint") or cfg.get("vlm", {}).get("endpoint")
    if not endpoint:
        raise ConfigError("VLM stage needs 'endpoint' or 'stub'")
    return vlm.OpenAIGateway(endpoint, sc.get("model", vlm.DEFAULT_MODEL),
                             max_in_flight=int(sc.get("max_in_flight", 8)),
                             timeout=float(sc.get("timeout", 120.0)))


def _prompt(sc: Mapping, cfg: Mapping, default: str) -> str:
    if sc.get("prompt_file"):
        return _resolve(cfg, sc["prompt_file"]).read_text(encoding="utf-8")
    return default


@dataclass
class PipelineResult:
    out_dir: Path
    manifests: dict[str, Path]
    splits: dict[str, list[str]]
    stats: list[SceneStats]


def run_pipeline(cfg: Mapping, gateway: vlm.VlmGateway | None = None) -> PipelineResult:
    """Run poses through sample, writing one manifest per stage under ``out_dir``.

    Existing stage outputs in ``out_dir`` are reused for expensive per-record
    work (renders, VLM answers), so a rerun after an interruption finishes
    with the same manifests as an uninterrupted run.
    """
    pc = cfg.get("pipeline", {})
    if "scene" not in pc or "out_dir" not in pc:
        raise ConfigError("[pipeline] needs 'scene' and 'out_dir'")
    scene = load_scene(_resolve(cfg, pc["scene"]))
    out_dir = _resolve(cfg, pc["out_dir"])
    image_dir = out_dir / "images"
    workers = int(pc.get("workers", 1))
    paths = {k: out_dir / v for k, v in STAGE_FILES.items()}

    def previous(stage):
        return read_manifest(paths[stage]) if paths[stage].exists() else None

    pose_cfg = stage_cfg(cfg, "poses")
    records = stage_poses(
        scene, camera_config(cfg), pose_cfg.get("baseline"), pose_cfg.get("spatial", "uniform"),
        int(pose_cfg.get("grid_n", 4)), int(pose_cfg.get("count", 5000)), int(pose_cfg.get("seed", 0)),
    )
    write_manifest(records, paths["poses"])

    records = stage_render(records, scene, image_dir, workers, previous("render"))
    write_manifest(records, paths["render"])

    records = stage_heuristic(records, image_dir, heuristic_thresholds(cfg))
    write_manifest(records, paths["heuristic"])

    vc = stage_cfg(cfg, "filter-vlm")
    gw = gateway or make_gateway(vc, cfg)
    records = stage_vlm(records, image_dir, gw, _prompt(vc, cfg, vlm.FILTER_PROMPT),
                        int(vc.get("max_in_flight", 8)), int(vc.get("retries", 2)), previous("vlm"))
    write_manifest(records, paths["vlm"])

    cc = stage_cfg(cfg, "caption")
    gw_c = gateway or (make_gateway(cc, cfg) if (cc.get("stub") or cc.get("endpoint")) else gw)
    records = stage_caption(records, image_dir, gw_c, _prompt(cc, cfg, vlm.CAPTION_PROMPT),
                            int(cc.get("max_in_flight", 8)), int(cc.get("retries", 2)), previous("caption"))
    write_manifest(records, paths["caption"])

    sc = stage_cfg(cfg, "score")
    missing = [k for k in ("image_emb", "text_emb", "aesthetic") if not sc.get(k)]
    if missing:
        raise ConfigError(f"stage.score needs {missing}")
    try:
        records = stage_score(records, quality.read_embeddings(_resolve(cfg, sc["image_emb"])),
                              quality.read_embeddings(_resolve(cfg, sc["text_emb"])),
                              quality.read_aesthetic(_resolve(cfg, sc["aesthetic"])),
                              float(sc.get("clip_weight", quality.CLIP_WEIGHT)))
    except OSError as exc:
        raise ConfigError(f"stage.score: {exc}") from exc
    write_manifest(records, paths["score"])

    records = stage_quality(records, quality_thresholds(cfg))
    write_manifest(records, paths["quality"])

    smp = stage_cfg(cfg, "sample")
    eligible_recs = [r for r in records if eligible(r, "sample")]
    if smp.get("emb", "thumbnail") == "thumbnail":
        emb = thumbnail_embeddings(eligible_recs, image_dir)
    else:
        emb = quality.read_embeddings(_resolve(cfg, smp["emb"]))
    total = smp.get("total")
    records, members = stage_sample(records, emb, smp.get("splits", "train:0.6,val:0.2,test:0.2"),
                                    None if total is None else int(total))
    write_manifest(records, paths["sample"])
    manifests = dict(paths)
    for name, keys in members.items():
        keep = set(keys)
        split_path = out_dir / "splits" / f"{name}.jsonl"
        write_manifest([r for r in records if r["image_id"] in keep], split_path)
        manifests[f"split:{name}"] = split_path

    stats = scene_stats(records)
    (out_dir / "stats.json").write_text(json.dumps([s.to_json() for s in stats], indent=2) + "\n")
    (out_dir / "stats.txt").write_text(format_scene_stats(stats) + "\n", encoding="utf-8")
    return PipelineResult(out_dir, manifests, members, stats)


def run_ablation(scene: Scene, out_dir: str | Path, gateway: vlm.VlmGateway, count: int = 5000, seed: int = 0,
                 grid_n: int = 4, config: camgen.CameraConfig = camgen.CameraConfig(),
                 thresholds: imgfilter.HeuristicThresholds = imgfilter.HeuristicThresholds(),
                 workers: int = 1, max_in_flight: int = 8) -> tuple[list[AblationRow], dict[str, Path]]:
    """Object-centric placement vs both baselines x {uniform, grid}, up to the VLM stage."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    runs = {OBJECT_CENTRIC: stage_poses(scene, config)}
    for base in camgen.BASELINE_METHODS:
        for spatial in camgen.SPATIAL_MODES:
            runs[f"{base}-{spatial}"] = stage_poses(scene, config, base, spatial, grid_n, count, seed)
    manifests: dict[str, list[dict]] = {}
    paths: dict[str, Path] = {}
    for method, recs in runs.items():
        recs = stage_render(recs, scene, image_dir, workers)
        recs = stage_heuristic(recs, image_dir, thresholds)
        recs = stage_vlm(recs, image_dir, gateway, max_in_flight=max_in_flight)
        paths[method] = out_dir / f"{method}.jsonl"
        write_manifest(recs, paths[method])
        manifests[method] = recs
    return ablation_report(manifests), paths


def funnel_counts(records: list[Mapping]) -> dict[str, int]:
    return {s: sum(status(r, s) == PASSED for r in records) for s in STAGES}


def error_counts(records: list[Mapping]) -> dict[str, int]:
    """Per-stage error tallies, kept apart from rejections."""
    return {s: sum(status(r, s) == ERROR for r in records) for s in STAGES}
