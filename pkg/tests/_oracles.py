"""Slow, independent reference implementations used as test oracles."""

import itertools

import numpy as np


def brute_force_shapley(f, x, bg):
    """Average marginal contributions over all n! orderings, one row at a time."""
    n = len(x)

    def value(S):
        rows = bg.copy()
        for i in S:
            rows[:, i] = x[i]
        return np.mean([f(r[None, :])[0] for r in rows])

    phi = np.zeros(n)
    perms = list(itertools.permutations(range(n)))
    for perm in perms:
        S = []
        prev = value(S)
        for i in perm:
            S.append(i)
            cur = value(S)
            phi[i] += cur - prev
            prev = cur
    return phi / len(perms)
