"""Scene data model and JSON I/O.

World convention: +Z is up (Blender). Units are meters by convention only;
nothing downstream depends on absolute scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

import numpy as np

Vec3 = tuple[float, float, float]
RGB = tuple[float, float, float]


class ParseError(ValueError):
    """Scene file is not valid JSON or does not follow the schema."""


class ValidationError(ValueError):
    """Scene parses but violates an invariant (duplicate ids, inverted boxes)."""


def _vec3(value: Any, what: str) -> Vec3:
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise ParseError(f"{what}: expected a list of 3 numbers, got {value!r}")
    try:
        out = tuple(float(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{what}: non-numeric component in {value!r}") from exc
    if not all(math.isfinite(v) for v in out):
        raise ParseError(f"{what}: non-finite component in {value!r}")
    return out  # type: ignore[return-value]


@dataclass(frozen=True)
class Aabb:
    min: Vec3
    max: Vec3

    def __post_init__(self) -> None:
        if any(lo > hi for lo, hi in zip(self.min, self.max)):
            raise ValidationError(f"inverted AABB: min={self.min} max={self.max}")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.min, dtype=float) + np.asarray(self.max, dtype=float))

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.max, dtype=float) - np.asarray(self.min, dtype=float)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def corners(self) -> np.ndarray:
        """The eight corners as an (8, 3) array."""
        lo, hi = np.asarray(self.min, float), np.asarray(self.max, float)
        idx = np.array([[(k >> a) & 1 for a in range(3)] for k in range(8)], dtype=bool)
        return np.where(idx, hi, lo)

    def contains(self, other: "Aabb", tol: float = 0.0) -> bool:
        return all(a <= b + tol for a, b in zip(self.min, other.min)) and all(
            a + tol >= b for a, b in zip(self.max, other.max)
        )

    def scaled(self, s: float, about: np.ndarray | None = None) -> "Aabb":
        c = self.center if about is None else np.asarray(about, float)
        lo = c + s * (np.asarray(self.min) - c)
        hi = c + s * (np.asarray(self.max) - c)
        return Aabb(tuple(lo.tolist()), tuple(hi.tolist()))

    @staticmethod
    def union(boxes: list["Aabb"]) -> "Aabb":
        if not boxes:
            raise ValidationError("cannot take the union of zero boxes")
        lo = np.min([b.min for b in boxes], axis=0)
        hi = np.max([b.max for b in boxes], axis=0)
        return Aabb(tuple(lo.tolist()), tuple(hi.tolist()))

    def to_json(self) -> dict:
        return {"min": list(self.min), "max": list(self.max)}

    @classmethod
    def from_json(cls, data: Any, what: str = "aabb") -> "Aabb":
        if not isinstance(data, dict) or "min" not in data or "max" not in data:
            raise ParseError(f"{what}: expected {{'min': [...], 'max': [...]}}")
        return cls(_vec3(data["min"], f"{what}.min"), _vec3(data["max"], f"{what}.max"))


@dataclass(frozen=True)
class Sphere:
    center: Vec3
    radius: float

    @property
    def aabb(self) -> Aabb:
        c = np.asarray(self.center)
        return Aabb(tuple((c - self.radius).tolist()), tuple((c + self.radius).tolist()))


@dataclass(frozen=True)
class Box:
    aabb: Aabb


Primitive = Union[Sphere, Box]


@dataclass(frozen=True)
class Material:
    albedo: RGB = (0.8, 0.8, 0.8)


@dataclass(frozen=True)
class SceneObject:
    id: int
    name: str
    aabb: Aabb
    primitive: Primitive | None = None
    material: Material | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.id, int) or self.id <= 0:
            raise ValidationError(f"object id must be a positive integer, got {self.id!r}")
        if isinstance(self.primitive, Sphere):
            tol = 1e-9 * max(1.0, self.aabb.diagonal)
            sb = self.primitive.aabb
            if not (np.allclose(sb.min, self.aabb.min, atol=tol) and np.allclose(sb.max, self.aabb.max, atol=tol)):
                raise ValidationError(f"object {self.id}: sphere bounds do not match its aabb")


@dataclass(frozen=True)
class PointLight:
    position: Vec3
    intensity: RGB


@dataclass(frozen=True)
class DirectionalLight:
    # direction the light travels (from the light toward the scene)
    direction: Vec3
    intensity: RGB


@dataclass(frozen=True)
class AmbientLight:
    intensity: RGB


Light = Union[PointLight, DirectionalLight, AmbientLight]


@dataclass(frozen=True)
class GroundPlane:
    """Infinite horizontal backdrop at z = height. Not an object: segments as 0."""

    height: float = 0.0
    albedo: RGB = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class Scene:
    name: str
    objects: tuple[SceneObject, ...]
    lights: tuple[Light, ...] = ()
    scene_aabb: Aabb | None = None
    ground: GroundPlane | None = None
    _by_id: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        ids = [o.id for o in self.objects]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ValidationError(f"duplicate object ids: {dupes}")
        if self.scene_aabb is None:
            if not self.objects:
                raise ValidationError("scene_aabb is required for a scene without objects")
            object.__setattr__(self, "scene_aabb", Aabb.union([o.aabb for o in self.objects]))
        else:
            for o in self.objects:
                if not self.scene_aabb.contains(o.aabb):
                    raise ValidationError(f"scene_aabb does not contain object {o.id}")
        self._by_id.update({o.id: o for o in self.objects})

    def object(self, object_id: int) -> SceneObject:
        return self._by_id[object_id]

    @property
    def object_ids(self) -> set[int]:
        return set(self._by_id)


# -- JSON ---------------------------------------------------------------------


def _rgb(value: Any, what: str) -> RGB:
    return _vec3(value, what)


def _parse_primitive(data: Any, what: str) -> Primitive:
    if not isinstance(data, dict):
        raise ParseError(f"{what}: expected an object")
    if "sphere" in data:
        sp = data["sphere"]
        if not isinstance(sp, dict):
            raise ParseError(f"{what}.sphere: expected an object")
        try:
            radius = float(sp["radius"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{what}.sphere.radius missing or not a number") from exc
        if not math.isfinite(radius) or radius <= 0:
            raise ValidationError(f"{what}.sphere.radius must be positive")
        return Sphere(_vec3(sp.get("center"), f"{what}.sphere.center"), radius)
    if "box" in data:
        bx = data["box"]
        return Box(Aabb.from_json(bx.get("aabb", bx) if isinstance(bx, dict) else bx, f"{what}.box"))
    raise ParseError(f"{what}: unknown primitive {sorted(data)}")


def _parse_light(data: Any, what: str) -> Light:
    if not isinstance(data, dict) or len(data) != 1:
        raise ParseError(f"{what}: expected one of point/directional/ambient")
    (kind, body), = data.items()
    if not isinstance(body, dict):
        raise ParseError(f"{what}.{kind}: expected an object")
    intensity = _rgb(body.get("intensity"), f"{what}.{kind}.intensity")
    if kind == "point":
        return PointLight(_vec3(body.get("position"), f"{what}.point.position"), intensity)
    if kind == "directional":
        d = _vec3(body.get("direction"), f"{what}.directional.direction")
        if np.linalg.norm(d) == 0:
            raise ValidationError(f"{what}: zero light direction")
        return DirectionalLight(d, intensity)
    if kind == "ambient":
        return AmbientLight(intensity)
    raise ParseError(f"{what}: unknown light type {kind!r}")


def scene_from_dict(data: Any) -> Scene:
    if not isinstance(data, dict):
        raise ParseError("scene: top level must be an object")
    if "name" not in data or "objects" not in data:
        raise ParseError("scene: 'name' and 'objects' are required")
    if not isinstance(data["objects"], list):
        raise ParseError("scene.objects must be a list")
    objects = []
    for i, od in enumerate(data["objects"]):
        what = f"objects[{i}]"
        if not isinstance(od, dict):
            raise ParseError(f"{what}: expected an object")
        oid = od.get("id")
        if isinstance(oid, bool) or not isinstance(oid, int):
            raise ParseError(f"{what}.id must be an integer")
        prim = _parse_primitive(od["primitive"], f"{what}.primitive") if od.get("primitive") is not None else None
        mat = None
        if od.get("material") is not None:
            mat = Material(_rgb(od["material"].get("albedo"), f"{what}.material.albedo"))
        objects.append(
            SceneObject(
                id=oid,
                name=str(od.get("name", f"object_{oid}")),
                aabb=Aabb.from_json(od.get("aabb"), f"{what}.aabb"),
                primitive=prim,
                material=mat,
            )
        )
    lights = tuple(_parse_light(ld, f"lights[{i}]") for i, ld in enumerate(data.get("lights", [])))
    ground = None
    if data.get("ground") is not None:
        g = data["ground"]
        ground = GroundPlane(float(g.get("height", 0.0)), _rgb(g.get("albedo", [0.5, 0.5, 0.5]), "ground.albedo"))
    scene_aabb = Aabb.from_json(data["scene_aabb"], "scene_aabb") if data.get("scene_aabb") is not None else None
    return Scene(str(data["name"]), tuple(objects), lights, scene_aabb, ground)


def scene_to_dict(scene: Scene) -> dict:
    objects = []
    for o in scene.objects:
        od: dict[str, Any] = {"id": o.id, "name": o.name, "aabb": o.aabb.to_json()}
        if isinstance(o.primitive, Sphere):
            od["primitive"] = {"sphere": {"center": list(o.primitive.center), "radius": o.primitive.radius}}
        elif isinstance(o.primitive, Box):
            od["primitive"] = {"box": o.primitive.aabb.to_json()}
        if o.material is not None:
            od["material"] = {"albedo": list(o.material.albedo)}
        objects.append(od)
    lights = []
    for light in scene.lights:
        if isinstance(light, PointLight):
            lights.append({"point": {"position": list(light.position), "intensity": list(light.intensity)}})
        elif isinstance(light, DirectionalLight):
            lights.append({"directional": {"direction": list(light.direction), "intensity": list(light.intensity)}})
        else:
            lights.append({"ambient": {"intensity": list(light.intensity)}})
    out: dict[str, Any] = {"name": scene.name, "objects": objects, "lights": lights}
    if scene.ground is not None:
        out["ground"] = {"height": scene.ground.height, "albedo": list(scene.ground.albedo)}
    out["scene_aabb"] = scene.scene_aabb.to_json()
    return out


def load_scene(path: str | Path) -> Scene:
    """Read and validate a scene JSON file."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return scene_from_dict(data)


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=2) + "\n", encoding="utf-8")
