"""Synthetic image-caption dataset curation from 3D scenes.

Object-centric camera placement, a small raycaster for procedural scenes,
heuristic / VLM / quality filters and diversity-aware split selection,
threaded together by JSONL manifests.
"""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def bundled_scene_path() -> Path:
    """Path of the bundled occlusion-heavy demo scene (``desk``)."""
    return Path(str(resources.files("blendforge").joinpath("data", "desk_scene.json")))
