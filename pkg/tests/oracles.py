"""Brute-force references, deliberately naive and independent of the library paths."""

import itertools
import math

import numpy as np


def two_case_d2(a, b):
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    plus = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
    minus = math.sqrt(sum((x + y) ** 2 for x, y in zip(a, b)))
    return min(plus, minus)


def exhaustive_dist_12(D1, D2):
    """min over all 2^r r! signed permutations of max column norm of D1 P - D2."""
    r = D1.shape[1]
    best = math.inf
    for perm in itertools.permutations(range(r)):
        for signs in itertools.product((1.0, -1.0), repeat=r):
            worst = 0.0
            for k in range(r):
                col = signs[k] * D1[:, perm[k]] - D2[:, k]
                worst = max(worst, math.sqrt(float(np.sum(col * col))))
            best = min(best, worst)
    return best


def brute_force_paths(weights, sizes):
    """All layer-index combinations; returns (best length, lexicographically first best path).

    Lengths are summed front to back.
    """
    best, best_path = math.inf, None
    for path in itertools.product(*[range(s) for s in sizes]):
        length = 0.0
        for i in range(len(sizes) - 1):
            length += float(weights[i][path[i], path[i + 1]])
        if length < best:
            best, best_path = length, list(path)
    return best, best_path


def chain_objective_min(D1, D2):
    """Exhaustive minimum over signed permutations of |(D1 P1)_1 - (D2 P2)_1|_2."""
    best = math.inf
    arg = None
    for a in range(D1.shape[1]):
        for b in range(D2.shape[1]):
            for s in (1.0, -1.0):
                for t in (1.0, -1.0):
                    v = float(np.linalg.norm(s * D1[:, a] - t * D2[:, b]))
                    if v < best - 1e-15:
                        best, arg = v, (a, b)
    return best, arg


def central_difference_grad(f, D, h=1e-6):
    G = np.zeros_like(D)
    for idx in np.ndindex(*D.shape):
        E = np.zeros_like(D)
        E[idx] = h
        G[idx] = (f(D + E) - f(D - E)) / (2 * h)
    return G


def exhaustive_beta(locals_):
    """Nested min/max over the atom candidate set, written as plain loops."""
    cands = [L[:, j] for L in locals_ for j in range(L.shape[1])]
    best = math.inf
    for v in cands:
        worst = 0.0
        for L in locals_:
            worst = max(worst, min(two_case_d2(L[:, j], v) for j in range(L.shape[1])))
        best = min(best, worst)
    return best
