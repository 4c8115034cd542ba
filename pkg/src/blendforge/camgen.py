"""Object-centric camera placement and object-agnostic baseline samplers.

Camera basis convention: ``rotation`` rows are (right, up, forward) in world
coordinates; the camera looks along +forward. Renderers whose cameras look
down -Z (Blender, OpenGL) use the world-from-camera matrix from
:func:`world_from_camera`, whose columns are (right, up, -forward, position).
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .scene import Aabb, Scene, SceneObject

log = logging.getLogger(__name__)

WORLD_UP = np.array([0.0, 0.0, 1.0])
FALLBACK_UP = np.array([0.0, 1.0, 0.0])
# |forward . world_up| above this switches to FALLBACK_UP
POLE_COS = 1.0 - 1e-6

BASELINE_METHODS = ("random_view", "anchor_sweep")
SPATIAL_MODES = ("uniform", "grid")
BASELINE_MAX_ELEVATION = math.radians(30.0)
SWEEP_AZIMUTHS = tuple(math.radians(45.0 * k) for k in range(8))


class DegenerateObject(ValueError):
    """Projected half-height is (numerically) zero for a view."""


class DegeneratePose(ValueError):
    """Camera position coincides with its target."""


class ObjectSkipped(Exception):
    def __init__(self, object_id: int, reason: str):
        super().__init__(f"object {object_id} skipped: {reason}")
        self.object_id = object_id
        self.reason = reason


class InvalidConfig(ValueError):
    pass


@dataclass(frozen=True)
class CameraConfig:
    azimuths: tuple[float, ...] = SWEEP_AZIMUTHS
    elevations: tuple[float, ...] = (0.0,)
    fov_y: float = math.radians(90.0)
    fill_fraction: float = 2.0 / 3.0
    width: int = 256
    height: int = 256
    min_bbox_diagonal: float | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.fill_fraction <= 1.0:
            raise InvalidConfig(f"fill_fraction must be in (0, 1], got {self.fill_fraction}")
        if not 0.0 < self.fov_y < math.pi:
            raise InvalidConfig(f"fov_y must be in (0, pi), got {self.fov_y}")
        if self.width <= 0 or self.height <= 0:
            raise InvalidConfig("resolution must be positive")
        if not self.azimuths or not self.elevations:
            raise InvalidConfig("azimuth and elevation sets must be nonempty")

    @classmethod
    def from_dict(cls, data: dict) -> "CameraConfig":
        """Build from a degree-based mapping (config files use degrees)."""
        kw: dict = {}
        if "azimuths_deg" in data:
            kw["azimuths"] = tuple(math.radians(a) for a in data["azimuths_deg"])
        elif "azimuth_step_deg" in data:
            step = float(data["azimuth_step_deg"])
            kw["azimuths"] = tuple(math.radians(step * k) for k in range(int(round(360.0 / step))))
        if "elevations_deg" in data:
            kw["elevations"] = tuple(math.radians(e) for e in data["elevations_deg"])
        if "fov_y_deg" in data:
            kw["fov_y"] = math.radians(float(data["fov_y_deg"]))
        if "fill_fraction" in data:
            kw["fill_fraction"] = float(data["fill_fraction"])
        if "resolution" in data:
            kw["width"], kw["height"] = (int(v) for v in data["resolution"])
        for key in ("width", "height"):
            if key in data:
                kw[key] = int(data[key])
        if data.get("min_bbox_diagonal") is not None:
            kw["min_bbox_diagonal"] = float(data["min_bbox_diagonal"])
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class CameraPose:
    position: np.ndarray
    rotation: np.ndarray  # rows: right, up, forward
    fov_y: float
    width: int = 256
    height: int = 256
    id: str = ""
    method: str = "object_centric"
    object_id: int | None = None
    azimuth: float | None = None
    elevation: float | None = None
    distance: float | None = None
    sample_index: int | None = None
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def right(self) -> np.ndarray:
        return self.rotation[0]

    @property
    def up(self) -> np.ndarray:
        return self.rotation[1]

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2]

    def project(self, points: np.ndarray) -> np.ndarray:
        """Pinhole projection of world points to (col, row) pixel coordinates."""
        rel = np.atleast_2d(points) - self.position
        x = rel @ self.right
        y = rel @ self.up
        z = rel @ self.forward
        t = math.tan(self.fov_y / 2.0)
        aspect = self.width / self.height
        col = (x / z / (t * aspect) + 1.0) * self.width / 2.0
        row = (1.0 - y / z / t) * self.height / 2.0
        return np.stack([col, row], axis=-1)


def viewing_direction(azimuth: float, elevation: float) -> np.ndarray:
    v = np.array(
        [
            math.cos(elevation) * math.cos(azimuth),
            math.cos(elevation) * math.sin(azimuth),
            math.sin(elevation),
        ]
    )
    return v / np.linalg.norm(v)


def look_at_pose(position, target) -> np.ndarray:
    """Rotation basis (rows right, up, forward) aiming from ``position`` at ``target``."""
    position = np.asarray(position, dtype=float)
    target = np.asarray(target, dtype=float)
    delta = target - position
    dist = np.linalg.norm(delta)
    if not dist > 1e-12 * max(1.0, np.linalg.norm(position), np.linalg.norm(target)):
        raise DegeneratePose(f"position {position} coincides with target {target}")
    return basis_from_forward(delta / dist)


def basis_from_forward(forward: np.ndarray) -> np.ndarray:
    forward = np.asarray(forward, dtype=float)
    forward = forward / np.linalg.norm(forward)
    ref = FALLBACK_UP if abs(forward @ WORLD_UP) > POLE_COS else WORLD_UP
    right = np.cross(forward, ref)
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    up /= np.linalg.norm(up)
    return np.stack([right, up, forward])


def projected_half_height(aabb: Aabb, view_dir, eps: float | None = None) -> float:
    """Half the span of the box corners along the camera-up axis for ``view_dir``.

    ``view_dir`` points from the box center toward the camera, so the camera
    looks along ``-view_dir``. ``eps`` defaults to ``1e-9 * aabb.diagonal``.
    """
    up = basis_from_forward(-np.asarray(view_dir, dtype=float))[1]
    proj = (aabb.corners() - aabb.center) @ up
    h = 0.5 * float(proj.max() - proj.min())
    if eps is None:
        eps = 1e-9 * aabb.diagonal
    if h <= eps:
        raise DegenerateObject(f"projected half-height {h:g} below {eps:g}")
    return h


def camera_distance(h_o: float, f: float, fov_y: float) -> float:
    if not h_o > 0:
        raise DegenerateObject(f"half-height must be positive, got {h_o}")
    if not 0 < f <= 1:
        raise InvalidConfig(f"fill fraction must be in (0, 1], got {f}")
    if not 0 < fov_y < math.pi:
        raise InvalidConfig(f"fov_y must be in (0, pi), got {fov_y}")
    return h_o / (f * math.tan(fov_y / 2.0))


def pose_id(scene: str, key: int | str, index: int) -> str:
    if isinstance(key, int):
        return f"{scene}/{key:04d}/{index:03d}"
    return f"{scene}/{key}/{index:05d}"


def place_object_cameras(obj: SceneObject, config: CameraConfig = CameraConfig(), scene_name: str = "scene",
                         scene_diagonal: float | None = None) -> list[CameraPose]:
    """Orbit cameras around one object's box center, one per (elevation, azimuth)."""
    aabb = obj.aabb
    diag = aabb.diagonal
    if config.min_bbox_diagonal is not None and diag < config.min_bbox_diagonal:
        raise ObjectSkipped(obj.id, f"bbox diagonal {diag:.4g} < {config.min_bbox_diagonal:g}")
    eps = 1e-9 * (scene_diagonal if scene_diagonal is not None else diag)
    center = aabb.center
    poses: list[CameraPose] = []
    skipped = 0
    n_az = len(config.azimuths)
    for ei, theta in enumerate(config.elevations):
        for ai, phi in enumerate(config.azimuths):
            v = viewing_direction(phi, theta)
            try:
                h = projected_half_height(aabb, v, eps)
            except DegenerateObject:
                skipped += 1
                log.warning("object %d: degenerate view az=%.1f el=%.1f skipped", obj.id,
                            math.degrees(phi), math.degrees(theta))
                continue
            d = camera_distance(h, config.fill_fraction, config.fov_y)
            p = center + d * v
            poses.append(
                CameraPose(
                    position=p,
                    rotation=look_at_pose(p, center),
                    fov_y=config.fov_y,
                    width=config.width,
                    height=config.height,
                    id=pose_id(scene_name, obj.id, ei * n_az + ai),
                    object_id=obj.id,
                    azimuth=phi,
                    elevation=theta,
                    distance=d,
                    meta={"half_height": h},
                )
            )
    if not poses:
        raise ObjectSkipped(obj.id, "degenerate: zero projected height in every view")
    return poses


def place_scene_cameras(scene: Scene, config: CameraConfig = CameraConfig()) -> tuple[list[CameraPose], list[ObjectSkipped]]:
    """Poses for every object, sorted by object id then view index, plus the skips."""
    poses: list[CameraPose] = []
    skips: list[ObjectSkipped] = []
    for obj in sorted(scene.objects, key=lambda o: o.id):
        try:
            poses.extend(place_object_cameras(obj, config, scene.name, scene.scene_aabb.diagonal))
        except ObjectSkipped as skip:
            log.info("%s", skip)
            skips.append(skip)
    return poses, skips


# -- baselines ----------------------------------------------------------------


def baseline_rng(seed: int, method: str, scene: str) -> np.random.Generator:
    """PCG64 stream keyed on (seed, method, scene); stable across platforms."""
    key = zlib.crc32(f"{method}|{scene}".encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))


def grid_quotas(count: int, n: int) -> list[int]:
    """Split ``count`` over n**3 cells; the remainder goes to the lowest-index cells."""
    cells = n ** 3
    base, rem = divmod(count, cells)
    return [base + (1 if i < rem else 0) for i in range(cells)]


def _cell_bounds(aabb: Aabb, n: int, index: int) -> tuple[np.ndarray, np.ndarray]:
    # cell index = (ix * n + iy) * n + iz
    ix, rest = divmod(index, n * n)
    iy, iz = divmod(rest, n)
    lo = np.asarray(aabb.min, float)
    step = aabb.extent / n
    cell_lo = lo + step * np.array([ix, iy, iz])
    return cell_lo, cell_lo + step


def _sample_positions(rng: np.random.Generator, aabb: Aabb, count: int, spatial: str, grid_n: int) -> np.ndarray:
    lo, hi = np.asarray(aabb.min, float), np.asarray(aabb.max, float)
    if spatial == "uniform":
        return rng.uniform(lo, hi, size=(count, 3))
    chunks = []
    for cell, quota in enumerate(grid_quotas(count, grid_n)):
        if quota:
            clo, chi = _cell_bounds(aabb, grid_n, cell)
            chunks.append(rng.uniform(clo, chi, size=(quota, 3)))
    return np.concatenate(chunks) if chunks else np.empty((0, 3))


def sample_baseline_poses(
    scene_aabb: Aabb,
    method: str,
    spatial: str = "uniform",
    count: int = 5000,
    seed: int = 0,
    grid_n: int = 4,
    scene_name: str = "scene",
    fov_y: float = math.radians(90.0),
    width: int = 256,
    height: int = 256,
) -> list[CameraPose]:
    """Object-agnostic poses inside ``scene_aabb``.

    ``random_view`` draws one position per pose and looks along a random
    azimuth with elevation in [-30, 30] degrees. ``anchor_sweep`` draws
    ``ceil(count / 8)`` anchors and emits eight horizontal outward views per
    anchor. With ``spatial="grid"`` positions (or anchors) are spread over
    ``grid_n**3`` equal cells by :func:`grid_quotas`.
    """
    if method not in BASELINE_METHODS:
        raise InvalidConfig(f"unknown baseline method {method!r}")
    if spatial not in SPATIAL_MODES:
        raise InvalidConfig(f"unknown spatial mode {spatial!r}")
    if count <= 0:
        raise InvalidConfig(f"count must be positive, got {count}")
    if spatial == "grid" and grid_n < 1:
        raise InvalidConfig(f"grid n must be >= 1, got {grid_n}")

    label = f"{method}-{spatial}"
    rng = baseline_rng(seed, label, scene_name)
    poses: list[CameraPose] = []

    def emit(pos, phi, theta, idx, **meta):
        poses.append(
            CameraPose(
                position=np.asarray(pos, float),
                rotation=basis_from_forward(viewing_direction(phi, theta)),
                fov_y=fov_y,
                width=width,
                height=height,
                id=pose_id(scene_name, label, idx),
                method=label,
                azimuth=float(phi),
                elevation=float(theta),
                sample_index=idx,
                meta=meta,
            )
        )

    if method == "random_view":
        positions = _sample_positions(rng, scene_aabb, count, spatial, grid_n)
        azimuths = rng.uniform(0.0, 2.0 * math.pi, size=count)
        elevations = rng.uniform(-BASELINE_MAX_ELEVATION, BASELINE_MAX_ELEVATION, size=count)
        for i in range(count):
            emit(positions[i], azimuths[i], elevations[i], i)
    else:
        anchors = _sample_positions(rng, scene_aabb, math.ceil(count / 8), spatial, grid_n)
        for a, pos in enumerate(anchors):
            for k, phi in enumerate(SWEEP_AZIMUTHS):
                emit(pos, phi, 0.0, 8 * a + k, anchor_index=a)
    return poses


# -- export -------------------------------------------------------------------


def world_from_camera(pose: CameraPose) -> np.ndarray:
    """4x4 world-from-camera matrix for a camera looking along its local -Z."""
    m = np.eye(4)
    m[:3, 0] = pose.right
    m[:3, 1] = pose.up
    m[:3, 2] = -pose.forward
    m[:3, 3] = pose.position
    return m


def _deg(x: float | None) -> float | None:
    return None if x is None else math.degrees(x)


def pose_to_json(pose: CameraPose) -> dict:
    rec = {"id": pose.id}
    if pose.object_id is not None:
        rec["object_id"] = pose.object_id
    rec.update(
        {
            "method": pose.method,
            "azimuth_deg": _deg(pose.azimuth),
            "elevation_deg": _deg(pose.elevation),
            "distance": pose.distance,
            "position": [float(v) for v in pose.position],
            "rotation": [float(v) for v in np.asarray(pose.rotation).reshape(-1)],
            "fov_y_deg": math.degrees(pose.fov_y),
            "width": pose.width,
            "height": pose.height,
        }
    )
    if pose.sample_index is not None:
        rec["sample_index"] = pose.sample_index
    return rec


def pose_from_json(rec: dict) -> CameraPose:
    az, el = rec.get("azimuth_deg"), rec.get("elevation_deg")
    return CameraPose(
        position=np.asarray(rec["position"], float),
        rotation=np.asarray(rec["rotation"], float).reshape(3, 3),
        fov_y=math.radians(rec["fov_y_deg"]),
        width=int(rec["width"]),
        height=int(rec["height"]),
        id=rec["id"],
        method=rec.get("method", "object_centric"),
        object_id=rec.get("object_id"),
        azimuth=None if az is None else math.radians(az),
        elevation=None if el is None else math.radians(el),
        distance=rec.get("distance"),
        sample_index=rec.get("sample_index"),
    )


def write_poses(poses: Iterable[CameraPose], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pose in poses:
            fh.write(json.dumps(pose_to_json(pose)) + "\n")


def read_poses(path: str | Path) -> list[CameraPose]:
    with open(path, encoding="utf-8") as fh:
        return [pose_from_json(json.loads(line)) for line in fh if line.strip()]
