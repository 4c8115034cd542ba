"""Deterministic direct-lighting raycaster for procedural scenes.

Stands in for a path tracer so camera placement and the image filters can be
exercised end to end. One primary ray per pixel through the pixel center,
nearest hit over spheres, axis-aligned boxes and an optional ground plane,
Lambert shading with hard shadows, gamma 2.2 encode, 8-bit quantization.

Images are numpy arrays: RGB is ``(H, W, 3) uint8``, segmentation is
``(H, W) uint16`` with 0 for background (and for the ground plane, which is
a backdrop rather than an object).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .camgen import CameraPose
from .scene import AmbientLight, Box, DirectionalLight, PointLight, Scene, Sphere

T_MIN = 1e-4
GAMMA = 2.2
DEFAULT_ALBEDO = (0.8, 0.8, 0.8)


def camera_rays(pose: CameraPose) -> np.ndarray:
    """Unit ray directions through pixel centers, shape (H*W, 3), row-major."""
    w, h = pose.width, pose.height
    t = math.tan(pose.fov_y / 2.0)
    aspect = w / h
    cols = ((np.arange(w) + 0.5) / w * 2.0 - 1.0) * t * aspect
    rows = (1.0 - (np.arange(h) + 0.5) / h * 2.0) * t
    x, y = np.meshgrid(cols, rows)
    d = (
        pose.forward[None, :]
        + x.reshape(-1, 1) * pose.right[None, :]
        + y.reshape(-1, 1) * pose.up[None, :]
    )
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def intersect_sphere(orig: np.ndarray, dirs: np.ndarray, center, radius: float, t_min: float = T_MIN) -> np.ndarray:
    oc = orig - np.asarray(center, float)
    b = dirs @ oc if oc.ndim == 1 else np.einsum("ij,ij->i", dirs, oc)
    c = (oc @ oc if oc.ndim == 1 else np.einsum("ij,ij->i", oc, oc)) - radius * radius
    disc = b * b - c
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    # q = -(b + sign(b) sqrt(disc)); roots are q and c / q
    q = -(b + np.copysign(sq, b))
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = q
        r2 = np.where(q != 0.0, c / q, q)
    t_near = np.minimum(r1, r2)
    t_far = np.maximum(r1, r2)
    t = np.where(t_near > t_min, t_near, np.where(t_far > t_min, t_far, np.inf))
    return np.where(hit, t, np.inf)


def intersect_box(orig: np.ndarray, dirs: np.ndarray, lo, hi, t_min: float = T_MIN) -> np.ndarray:
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - orig) * inv
        t2 = (hi - orig) * inv
    # fmin/fmax drop the NaNs from 0 * inf on slab boundaries
    t_enter = np.nanmax(np.fmin(t1, t2), axis=1)
    t_exit = np.nanmin(np.fmax(t1, t2), axis=1)
    hit = (t_exit >= t_enter) & (t_exit > t_min)
    t = np.where(t_enter > t_min, t_enter, t_exit)
    return np.where(hit, t, np.inf)


def intersect_ground(orig: np.ndarray, dirs: np.ndarray, height: float, t_min: float = T_MIN) -> np.ndarray:
    oz = orig[..., 2] if orig.ndim > 1 else orig[2]
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (height - oz) / dz
    return np.where((dz != 0.0) & (t > t_min), t, np.inf)


def _renderables(scene: Scene):
    return [o for o in scene.objects if o.primitive is not None]


def _nearest(scene: Scene, orig: np.ndarray, dirs: np.ndarray, t_min: float = T_MIN):
    """Nearest hit distance and hit slot per ray (-1 miss, len(objs) ground)."""
    objs = _renderables(scene)
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_k = np.full(n, -1, dtype=np.int64)
    for k, obj in enumerate(objs):
        prim = obj.primitive
        if isinstance(prim, Sphere):
            t = intersect_sphere(orig, dirs, prim.center, prim.radius, t_min)
        else:
            t = intersect_box(orig, dirs, prim.aabb.min, prim.aabb.max, t_min)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_k = np.where(closer, k, best_k)
    if scene.ground is not None:
        t = intersect_ground(orig, dirs, scene.ground.height, t_min)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_k = np.where(closer, len(objs), best_k)
    return best_t, best_k, objs


def _occluded(scene: Scene, orig: np.ndarray, dirs: np.ndarray, t_max: np.ndarray) -> np.ndarray:
    t, _, _ = _nearest(scene, orig, dirs)
    return t < t_max


def _normals(points: np.ndarray, dirs: np.ndarray, slots: np.ndarray, objs, scene: Scene) -> np.ndarray:
    normals = np.zeros_like(points)
    for k, obj in enumerate(objs):
        m = slots == k
        if not m.any():
            continue
        prim = obj.primitive
        if isinstance(prim, Sphere):
            normals[m] = (points[m] - np.asarray(prim.center)) / prim.radius
        else:
            c = prim.aabb.center
            half = np.maximum(prim.aabb.extent / 2.0, 1e-12)
            rel = (points[m] - c) / half
            axis = np.argmax(np.abs(rel), axis=1)
            nm = np.zeros((m.sum(), 3))
            nm[np.arange(axis.size), axis] = np.sign(rel[np.arange(axis.size), axis])
            normals[m] = nm
    normals[slots == len(objs)] = (0.0, 0.0, 1.0)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = normals / np.where(norm > 0, norm, 1.0)
    # two-sided surfaces: face the normal toward the viewer
    flip = np.einsum("ij,ij->i", normals, dirs) > 0
    normals[flip] *= -1.0
    return normals


def encode(linear: np.ndarray) -> np.ndarray:
    """Clamp linear RGB to [0, 1], gamma-encode and quantize to uint8."""
    return np.rint(255.0 * np.clip(linear, 0.0, 1.0) ** (1.0 / GAMMA)).astype(np.uint8)


def render_view(scene: Scene, pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Render one pose. Returns ``(rgb uint8 HxWx3, seg uint16 HxW)``."""
    w, h = pose.width, pose.height
    dirs = camera_rays(pose)
    orig = np.asarray(pose.position, float)
    t, slot, objs = _nearest(scene, orig, dirs)

    ambient = np.zeros(3)
    for light in scene.lights:
        if isinstance(light, AmbientLight):
            ambient += np.asarray(light.intensity, float)

    linear = np.tile(ambient, (dirs.shape[0], 1))
    seg = np.zeros(dirs.shape[0], dtype=np.uint16)

    hit = np.isfinite(t)
    if hit.any():
        hs = slot[hit]
        hd = dirs[hit]
        pts = orig + t[hit, None] * hd
        nrm = _normals(pts, hd, hs, objs, scene)

        albedo_table = np.array(
            [o.material.albedo if o.material is not None else DEFAULT_ALBEDO for o in objs]
            + [scene.ground.albedo if scene.ground is not None else DEFAULT_ALBEDO]
        )
        albedo = albedo_table[hs]
        ids = np.array([o.id for o in objs] + [0], dtype=np.uint16)
        seg[hit] = ids[hs]

        radiance = np.tile(ambient, (pts.shape[0], 1))
        for light in scene.lights:
            if isinstance(light, AmbientLight):
                continue
            if isinstance(light, DirectionalLight):
                ldir = -np.asarray(light.direction, float)
                ldir = np.tile(ldir / np.linalg.norm(ldir), (pts.shape[0], 1))
                t_max = np.full(pts.shape[0], np.inf)
            elif isinstance(light, PointLight):
                to_l = np.asarray(light.position, float) - pts
                t_max = np.linalg.norm(to_l, axis=1)
                ldir = to_l / np.maximum(t_max, 1e-300)[:, None]
            else:  # pragma: no cover
                raise TypeError(f"unknown light {light!r}")
            cos = np.einsum("ij,ij->i", nrm, ldir)
            lit = cos > 0
            if lit.any():
                blocked = np.zeros(pts.shape[0], dtype=bool)
                blocked[lit] = _occluded(scene, pts[lit], ldir[lit], t_max[lit])
                lit &= ~blocked
            radiance += np.where(lit, cos, 0.0)[:, None] * np.asarray(light.intensity, float)
        linear[hit] = radiance * albedo

    rgb = encode(linear).reshape(h, w, 3)
    return rgb, seg.reshape(h, w)


def render_views(scene: Scene, poses: Iterable[CameraPose], workers: int = 1):
    """Render many poses; output order matches input order for any worker count."""
    poses = list(poses)
    if workers <= 1:
        return [render_view(scene, p) for p in poses]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda p: render_view(scene, p), poses))


# -- PNG I/O ----------------------------------------------------------------


def rgb_path(out_dir: str | Path, pose_id: str) -> Path:
    return Path(out_dir) / f"{pose_id}.png"


def seg_path(out_dir: str | Path, pose_id: str) -> Path:
    return Path(out_dir) / f"{pose_id}.seg.png"


def save_rgb(rgb: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), mode="RGB").save(path, optimize=False)


def save_seg(seg: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(seg, dtype=np.uint16)).save(path)


def load_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"), dtype=np.uint8)


def load_seg(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im, dtype=np.uint16)
