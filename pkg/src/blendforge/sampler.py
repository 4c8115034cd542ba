"""Diversity-aware subset selection over image embeddings.

``fps_select`` is greedy farthest point sampling (maximin). ``multi_split_assign``
grows several disjoint splits from one shared pool: one FPS seed per split,
then a ratio-weighted round-robin where each split, on its turn, takes the
pool element farthest from its own current members.

All ties resolve to the lowest index. Distances are computed in float64 and
values within ``TIE_RTOL`` of the best one count as tied, so rounding noise
(e.g. points on a regular polygon) cannot reorder exact geometric ties.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


TIE_RTOL = 1e-12


class ZeroVectorRow(ValueError):
    def __init__(self, row: int):
        super().__init__(f"row {row} has zero norm")
        self.row = row


class InvalidK(ValueError):
    pass


class InvalidPlan(ValueError):
    pass


@dataclass
class EmbeddingMatrix:
    ids: list[str]
    vectors: np.ndarray

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValueError(f"{len(self.ids)} ids for matrix of shape {self.vectors.shape}")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate ids")

    def __len__(self) -> int:
        return len(self.ids)


def normalize_embeddings(raw, ids: Sequence[str] | None = None) -> EmbeddingMatrix:
    x = np.asarray(raw, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected an N x D matrix, got shape {x.shape}")
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ZeroVectorRow(int(zero[0]))
    if ids is None:
        ids = [str(i) for i in range(x.shape[0])]
    return EmbeddingMatrix(list(ids), x / norms[:, None])


def _matrix(emb) -> np.ndarray:
    if isinstance(emb, EmbeddingMatrix):
        return emb.vectors
    return np.asarray(emb, dtype=np.float64)


def _dist(x: np.ndarray, row: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", x - row, x - row))


def _argbest(values: np.ndarray, maximize: bool = True) -> int:
    """Lowest index whose value is within TIE_RTOL of the best finite value."""
    v = values if maximize else -values
    best = v.max()
    tol = TIE_RTOL * max(1.0, abs(best)) if np.isfinite(best) else 0.0
    return int(np.flatnonzero(v >= best - tol)[0])


def fps_select(emb, k: int, metric: str = "euclidean") -> list[int]:
    """Greedy maximin selection of ``k`` row indices.

    The first pick is the row farthest from the centroid. ``metric="cosine"``
    runs the same greedy on cosine similarity (minimize the maximum
    similarity); on unit rows it yields the same order as Euclidean.
    """
    x = _matrix(emb)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise InvalidK(f"k must be in [1, {n}], got {k}")
    centroid = x.mean(axis=0)
    if metric == "euclidean":
        first = _argbest(_dist(x, centroid))
        order = [first]
        mind = _dist(x, x[first])
        mind[first] = -np.inf
        for _ in range(k - 1):
            nxt = _argbest(mind)
            order.append(nxt)
            mind = np.minimum(mind, _dist(x, x[nxt]))
            mind[order] = -np.inf
        return order
    if metric == "cosine":
        first = _argbest(x @ centroid, maximize=False)
        order = [first]
        maxsim = x @ x[first]
        maxsim[first] = np.inf
        for _ in range(k - 1):
            nxt = _argbest(maxsim, maximize=False)
            order.append(nxt)
            maxsim = np.maximum(maxsim, x @ x[nxt])
            maxsim[order] = np.inf
        return order
    raise ValueError(f"unknown metric {metric!r}")


@dataclass
class SplitPlan:
    names: list[str]
    ratios: list[float]
    total: int
    sizes: list[int] = field(init=False)

    def __post_init__(self) -> None:
        if len(self.names) != len(self.ratios) or not self.names:
            raise InvalidPlan("names and ratios must be nonempty and the same length")
        if len(set(self.names)) != len(self.names):
            raise InvalidPlan("split names must be unique")
        if any(not r > 0 for r in self.ratios):
            raise InvalidPlan(f"ratios must be positive, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-6:
            raise InvalidPlan(f"ratios must sum to 1, got {sum(self.ratios)}")
        if self.total < 0:
            raise InvalidPlan("total must be nonnegative")
        self.sizes = largest_remainder(self.ratios, self.total)

    @classmethod
    def parse(cls, text: str, total: int) -> "SplitPlan":
        """``"train:0.6,val:0.2,test:0.2"`` -> SplitPlan."""
        names, ratios = [], []
        for part in text.split(","):
            name, _, ratio = part.strip().partition(":")
            if not name or not ratio:
                raise InvalidPlan(f"bad split entry {part!r}")
            names.append(name)
            ratios.append(float(ratio))
        return cls(names, ratios, total)


def largest_remainder(ratios: Sequence[float], total: int) -> list[int]:
    quotas = [r * total for r in ratios]
    sizes = [int(np.floor(q + 1e-9)) for q in quotas]
    rem = total - sum(sizes)
    fracs = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in fracs[:rem]:
        sizes[i] += 1
    return sizes


def round_robin_turn(sizes: Sequence[int], counts: Sequence[int]) -> int:
    """Next split in the weighted round-robin, or -1 when every split is full.

    Turn t (1-based over all assignments) goes to the open split with the
    largest deficit ``sizes[i] * t - counts[i] * total``: an exact integer
    form of "ratio * t - taken". For 0.6/0.2/0.2 this repeats
    train, val, train, test, train.
    """
    total = sum(sizes)
    t = sum(counts) + 1
    best, best_def = -1, None
    for i, (s, c) in enumerate(zip(sizes, counts)):
        if c >= s:
            continue
        deficit = s * t - c * total
        if best_def is None or deficit > best_def:
            best, best_def = i, deficit
    return best


@dataclass
class SplitAssignment:
    names: list[str]
    splits: list[list[int]]
    # (split index, pool index, min distance to that split at pick time; inf for seeds)
    steps: list[tuple[int, int, float]] = field(default_factory=list)

    def ids(self, emb: EmbeddingMatrix) -> dict[str, list[str]]:
        return {name: [emb.ids[i] for i in members] for name, members in zip(self.names, self.splits)}


def multi_split_assign(emb, plan: SplitPlan) -> SplitAssignment:
    x = _matrix(emb)
    n = x.shape[0]
    if plan.total > n:
        raise InvalidPlan(f"plan total {plan.total} exceeds pool size {n}")
    n_splits = len(plan.names)
    splits: list[list[int]] = [[] for _ in range(n_splits)]
    steps: list[tuple[int, int, float]] = []
    if plan.total == 0:
        return SplitAssignment(list(plan.names), splits, steps)

    # seeds go to splits in descending-ratio order (stable); empty splits get none
    seed_order = [i for i in sorted(range(n_splits), key=lambda i: -plan.ratios[i]) if plan.sizes[i] > 0]
    seeds = fps_select(x, len(seed_order))
    avail = np.ones(n, dtype=bool)
    mind = np.full((n_splits, n), np.inf)
    for s, idx in zip(seed_order, seeds):
        splits[s].append(idx)
        steps.append((s, idx, np.inf))
        avail[idx] = False
        mind[s] = _dist(x, x[idx])

    counts = [len(m) for m in splits]
    while True:
        s = round_robin_turn(plan.sizes, counts)
        if s < 0:
            break
        score = np.where(avail, mind[s], -np.inf)
        idx = _argbest(score)
        steps.append((s, idx, float(score[idx])))
        splits[s].append(idx)
        counts[s] += 1
        avail[idx] = False
        mind[s] = np.minimum(mind[s], _dist(x, x[idx]))
    return SplitAssignment(list(plan.names), splits, steps)
