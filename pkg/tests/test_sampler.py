import itertools
import math

import numpy as np
import pytest

from blendforge.sampler import (
    InvalidK, InvalidPlan, SplitPlan, ZeroVectorRow, fps_select, largest_remainder, multi_split_assign,
    normalize_embeddings, round_robin_turn,
)


def circle(degrees):
    a = np.radians(degrees)
    return np.stack([np.cos(a), np.sin(a)], axis=1)


def first_best(values):
    # lowest index within 1e-12 of the maximum
    top = max(values.values())
    return min(i for i, v in values.items() if v >= top - 1e-12 * max(1.0, abs(top)))


def brute_fps(x, k):
    """Reference maximin scan written without incremental state."""
    n = len(x)
    c = x.mean(axis=0)
    chosen = [first_best({i: math.dist(x[i], c) for i in range(n)})]
    while len(chosen) < k:
        scores = {i: min(math.dist(x[i], x[j]) for j in chosen) for i in range(n) if i not in chosen}
        chosen.append(first_best(scores))
    return chosen


def test_normalize():
    e = normalize_embeddings([[3, 4], [0, 1]])
    np.testing.assert_allclose(e.vectors, [[0.6, 0.8], [0, 1]], atol=1e-15)
    with pytest.raises(ZeroVectorRow) as err:
        normalize_embeddings([[1, 0], [0, 0]])
    assert err.value.row == 1


def test_fps_three_points():
    x = circle([0, 10, 180])
    order = fps_select(x, 2)
    assert order == [2, 0]
    # exhaustive maximin over pairs agrees on the min distance
    best = max(math.dist(x[i], x[j]) for i, j in itertools.combinations(range(3), 2))
    assert math.dist(x[order[0]], x[order[1]]) == pytest.approx(best)


def test_fps_k_edges():
    x = normalize_embeddings(np.random.default_rng(0).normal(size=(9, 3))).vectors
    assert sorted(fps_select(x, 9)) == list(range(9))
    c = x.mean(axis=0)
    assert fps_select(x, 1) == [int(np.argmax(np.linalg.norm(x - c, axis=1)))]
    with pytest.raises(InvalidK):
        fps_select(x, 0)
    with pytest.raises(InvalidK):
        fps_select(x, 10)


def test_fps_ties_lowest_index():
    x = circle([0, 90, 180, 270])
    assert fps_select(x, 4) == [0, 2, 1, 3]


def test_fps_matches_brute_force():
    rng = np.random.default_rng(42)
    for _ in range(200):
        n, d = rng.integers(2, 101), rng.integers(1, 9)
        x = normalize_embeddings(rng.normal(size=(n, d))).vectors
        k = int(rng.integers(1, min(n, 10) + 1))
        assert fps_select(x, k) == brute_fps(x, k)
        assert fps_select(x, k, "cosine") == fps_select(x, k)


def test_split_sizes():
    assert SplitPlan(["train", "val", "test"], [0.6, 0.2, 0.2], 7500).sizes == [4500, 1500, 1500]
    assert largest_remainder([1 / 3] * 3, 10) == [4, 3, 3]
    assert SplitPlan.parse("a:0.5,b:0.5", 9).sizes == [5, 4]
    with pytest.raises(InvalidPlan):
        SplitPlan(["a", "b"], [0.7, 0.2], 10)
    with pytest.raises(InvalidPlan):
        SplitPlan(["a", "b"], [1.0, 0.0], 10)


def test_round_robin_pattern():
    sizes, counts, seq = [3, 1, 1], [0, 0, 0], []
    while (s := round_robin_turn(sizes, counts)) >= 0:
        seq.append(s)
        counts[s] += 1
    assert seq == [0, 1, 0, 2, 0]


def test_three_seeds_for_three_splits():
    x = circle([0, 120, 240])
    a = multi_split_assign(x, SplitPlan(["a", "b", "c"], [1 / 3] * 3, 3))
    assert sorted(m for s in a.splits for m in s) == [0, 1, 2]
    assert all(len(s) == 1 for s in a.splits)
    assert [s for s, _, d in a.steps if math.isinf(d)] == [0, 1, 2]


def test_eight_point_circle_hand_enumerated():
    # seeds: centroid tie -> 0, antipode 4; then A,B alternate greedily
    a = multi_split_assign(circle(np.arange(8) * 45), SplitPlan(["a", "b"], [0.5, 0.5], 8))
    assert a.splits == [[0, 3, 5, 2], [4, 1, 6, 7]]
    assert sorted(a.splits[0] + a.splits[1]) == list(range(8))


def _check_greedy(x, plan, assign):
    members = [[] for _ in plan.names]
    taken = set()
    for s, idx, score in assign.steps:
        assert idx not in taken
        if members[s]:
            pool = [i for i in range(len(x)) if i not in taken]
            best = max(min(math.dist(x[i], x[j]) for j in members[s]) for i in pool)
            got = min(math.dist(x[idx], x[j]) for j in members[s])
            assert got == pytest.approx(best, abs=1e-12)
            assert score == pytest.approx(best, abs=1e-12)
        members[s].append(idx)
        taken.add(idx)
    assert members == assign.splits


def test_multi_split_greedy_oracle():
    rng = np.random.default_rng(5)
    for _ in range(10):
        n = int(rng.integers(10, 80))
        x = normalize_embeddings(rng.normal(size=(n, 4))).vectors
        plan = SplitPlan(["train", "val", "test"], [0.6, 0.2, 0.2], int(rng.integers(3, n + 1)))
        a = multi_split_assign(x, plan)
        assert [len(s) for s in a.splits] == plan.sizes
        flat = [m for s in a.splits for m in s]
        assert len(flat) == len(set(flat))
        _check_greedy(x, plan, a)


def test_multi_split_too_big():
    with pytest.raises(InvalidPlan):
        multi_split_assign(np.eye(3), SplitPlan(["a"], [1.0], 4))


def test_anti_duplication():
    rng = np.random.default_rng(8)
    x = normalize_embeddings(rng.normal(size=(30, 5))).vectors
    x = np.vstack([x, x[7:8]])  # row 30 duplicates row 7
    order = fps_select(x, 30)
    assert not (7 in order and 30 in order)
    a = multi_split_assign(x, SplitPlan(["a"], [1.0], 30))
    assert not (7 in a.splits[0] and 30 in a.splits[0])


def test_determinism():
    x = np.random.default_rng(3).normal(size=(50, 6))
    plan = SplitPlan(["a", "b"], [0.7, 0.3], 40)
    assert multi_split_assign(x, plan).splits == multi_split_assign(x.copy(), plan).splits
