"""Optimal bipartite assignment between decoder slots and padded targets.

Costs are square matrices (rows = targets including zero padding, columns =
predictions) of finite nonnegative L1 distances. ``hungarian`` returns the
minimum-total-cost perfect matching; among cost ties it returns the
lexicographically smallest permutation, matching ``brute_force_assignment``
which enumerates permutations in lexicographic order. Matching is a
forward-only combinatorial step: gradients flow only through losses
evaluated at the chosen pairs, never through the permutation itself.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from . import kernels

BRUTE_FORCE_LIMIT = 8

# Relative slack when deciding whether a partial assignment still attains the
# optimum. Exact for integer-valued costs (permutation totals differ by >= 1);
# for continuous costs the optimum is unique almost surely.
_TIE_RTOL = 1e-9


@dataclass(frozen=True)
class MatchAssignment:
    """Bijection target index -> prediction index plus its total cost."""

    perm: tuple
    total_cost: float


def _validate(cost):
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if cost.shape[0] == 0:
        raise ValueError("cost matrix must be non-empty")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    return cost


def _total(cost, perm):
    return float(cost[np.arange(len(perm)), perm].sum())


def brute_force_assignment(cost):
    """Exhaustive minimum over all permutations (test oracle, U <= 8)."""
    cost = _validate(cost)
    n = cost.shape[0]
    if n > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force limited to U <= {BRUTE_FORCE_LIMIT}, got {n}")
    rows = np.arange(n)
    best_perm = None
    best = np.inf
    # itertools yields permutations in lexicographic order; strict < keeps
    # the first (smallest) optimal one.
    for perm in itertools.permutations(range(n)):
        total = cost[rows, perm].sum()
        if total < best:
            best = total
            best_perm = perm
    return MatchAssignment(perm=best_perm, total_cost=_total(cost, list(best_perm)))


def min_assignment_cost(cost):
    """Total cost of an optimal assignment (no tie-break guarantees)."""
    cost = _validate(cost)
    return _total(cost, kernels.lap_min_assign(cost))


def hungarian(cost):
    """Minimum-cost perfect matching with lexicographic tie resolution.

    An O(U^3) augmenting-path solve gives the optimal total; rows are then
    fixed greedily to the smallest column whose optimal completion preserves
    that total.
    """
    cost = _validate(cost)
    n = cost.shape[0]
    if n == 1:
        return MatchAssignment(perm=(0,), total_cost=float(cost[0, 0]))
    optimum = _total(cost, kernels.lap_min_assign(cost))
    slack = _TIE_RTOL * max(1.0, abs(optimum))

    free_cols = list(range(n))
    perm = []
    fixed = 0.0
    for row in range(n):
        remaining_rows = slice(row + 1, n)
        for pos, col in enumerate(free_cols):
            candidate = fixed + cost[row, col]
            rest_cols = free_cols[:pos] + free_cols[pos + 1:]
            if rest_cols:
                sub = np.ascontiguousarray(cost[remaining_rows][:, rest_cols])
                candidate += _total(sub, kernels.lap_min_assign(sub))
            if candidate <= optimum + slack:
                perm.append(col)
                fixed += cost[row, col]
                free_cols = rest_cols
                break
        else:  # numerically impossible: the optimum is attainable
            raise RuntimeError("assignment refinement failed to reach the optimum")
    return MatchAssignment(perm=tuple(perm), total_cost=_total(cost, perm))
