"""Assignment solver against the exhaustive oracle."""

import numpy as np
import pytest

from proto_align.matching import MatchAssignment, brute_force_assignment, hungarian


def test_zero_diagonal_prefers_identity():
    out = hungarian([[0.0, 1.0], [1.0, 0.0]])
    assert out.perm == (0, 1)
    assert out.total_cost == 0.0


def test_three_by_three_hand_case():
    # all six permutations enumerated by hand: minimum is 1 + 2 + 2 = 5
    cost = [[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]]
    out = hungarian(cost)
    assert out.perm == (1, 0, 2)
    assert out.total_cost == 5.0
    oracle = brute_force_assignment(cost)
    assert oracle.perm == out.perm and oracle.total_cost == out.total_cost


def test_single_entry():
    out = brute_force_assignment([[3.5]])
    assert out == MatchAssignment(perm=(0,), total_cost=3.5)
    assert hungarian([[3.5]]) == out


def test_matches_oracle_on_random_continuous_matrices():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        n = rng.integers(2, 7)
        cost = rng.random((n, n))
        a = hungarian(cost)
        b = brute_force_assignment(cost)
        assert a.perm == b.perm
        assert a.total_cost == b.total_cost


def test_matches_oracle_on_tied_integer_matrices():
    # small integer range forces frequent cost ties; the lexicographic
    # tie-break must agree exactly with the enumeration order
    rng = np.random.default_rng(13)
    for _ in range(500):
        n = rng.integers(2, 7)
        cost = rng.integers(0, 4, size=(n, n)).astype(np.float64)
        a = hungarian(cost)
        b = brute_force_assignment(cost)
        assert a.perm == b.perm
        assert a.total_cost == b.total_cost


def test_random_six_by_six_equals_exhaustive_minimum():
    rng = np.random.default_rng(5)
    cost = rng.random((6, 6))
    assert hungarian(cost).total_cost == brute_force_assignment(cost).total_cost


def test_row_permutation_relabels_assignment():
    rng = np.random.default_rng(17)
    cost = rng.random((5, 5))
    base = brute_force_assignment(cost)
    order = rng.permutation(5)
    permuted = brute_force_assignment(cost[order])
    assert permuted.total_cost == pytest.approx(base.total_cost, abs=1e-12)
    assert tuple(np.array(base.perm)[order]) == permuted.perm


def test_row_constant_shift_property():
    rng = np.random.default_rng(23)
    cost = rng.random((5, 5))
    shifted = cost.copy()
    shifted[2] += 7.25
    a, b = hungarian(cost), hungarian(shifted)
    assert b.perm == a.perm
    assert b.total_cost == pytest.approx(a.total_cost + 7.25, abs=1e-9)


def test_rejections():
    with pytest.raises(ValueError, match="square"):
        hungarian(np.zeros((2, 3)))
    with pytest.raises(ValueError, match="finite"):
        hungarian([[np.inf, 0.0], [0.0, 1.0]])
    with pytest.raises(ValueError, match="U <= 8"):
        brute_force_assignment(np.zeros((9, 9)))
    with pytest.raises(ValueError, match="non-empty"):
        hungarian(np.zeros((0, 0)))
