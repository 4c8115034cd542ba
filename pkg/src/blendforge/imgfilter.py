"""First-pass heuristic filters: zero fill, brightness, variance, dark fraction.

Statistics are taken on the stored 8-bit gamma-encoded values, converted to
BT.601 luma without re-quantizing.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

# BT.601 luma in integer thousandths so uniform gray maps to itself exactly
LUMA_MILLI = np.array([299, 587, 114], dtype=np.int64)
REASONS = ("zero_fill", "brightness", "variance", "dark_fraction")


class EmptyImage(ValueError):
    pass


@dataclass(frozen=True)
class HeuristicThresholds:
    min_brightness: float = 30.0
    min_variance: float = 300.0
    max_dark_fraction: float = 0.3
    black_level: float = 5.0

    def __post_init__(self) -> None:
        if min(self.min_brightness, self.min_variance, self.max_dark_fraction, self.black_level) < 0:
            raise ValueError("thresholds must be nonnegative")
        if self.max_dark_fraction > 1:
            raise ValueError("max_dark_fraction must be in [0, 1]")


@dataclass
class FilterDecision:
    passed: bool
    reasons: list[str] = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def grayscale(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 2:
        return img.astype(np.float64)
    return (img[..., :3].astype(np.int64) @ LUMA_MILLI) / 1000.0


def image_statistics(image: np.ndarray, black_level: float = 5.0) -> dict:
    """Mean, population variance and near-black fraction of the luma channel."""
    gray = grayscale(image)
    if gray.size == 0:
        raise EmptyImage("image has no pixels")
    return {
        "mean": float(gray.mean()),
        "variance": float(gray.var()),
        "dark_fraction": float(np.count_nonzero(gray <= black_level) / gray.size),
    }


def object_fill_fraction(segmap: np.ndarray, object_id: int) -> float:
    seg = np.asarray(segmap)
    if seg.size == 0:
        return 0.0
    return float(np.count_nonzero(seg == object_id) / seg.size)


def heuristic_decide(
    image: np.ndarray,
    segmap: np.ndarray | None = None,
    object_id: int | None = None,
    t: HeuristicThresholds = HeuristicThresholds(),
) -> FilterDecision:
    """Evaluate every criterion and report all violations.

    The fill check runs only when both ``segmap`` and ``object_id`` are
    given (object-agnostic baseline renders have no target).
    """
    if (segmap is None) != (object_id is None):
        raise ValueError("segmap and object_id must be given together")
    stats = image_statistics(image, t.black_level)
    stats["fill"] = None if segmap is None else object_fill_fraction(segmap, object_id)
    reasons = []
    if stats["fill"] is not None and stats["fill"] == 0.0:
        reasons.append("zero_fill")
    if stats["mean"] < t.min_brightness:
        reasons.append("brightness")
    if stats["variance"] < t.min_variance:
        reasons.append("variance")
    if stats["dark_fraction"] > t.max_dark_fraction:
        reasons.append("dark_fraction")
    return FilterDecision(passed=not reasons, reasons=reasons, stats=stats)
