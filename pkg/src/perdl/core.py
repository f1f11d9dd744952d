"""Domain types and signed-permutation-invariant distances.

Dictionaries are plain ``(d, r)`` float arrays whose columns are atoms.
:class:`Dictionary` wraps one with validation for callers that want the
unit-norm contract checked; every function here also accepts a bare array.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-9
MATRIX_D2_MAX_ATOMS = 8


def _as_matrix(D, name: str = "D") -> np.ndarray:
    A = np.asarray(D, dtype=float)
    if A.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} has non-finite entries")
    return A


@dataclass(frozen=True)
class Dictionary:
    """A ``d x r`` matrix of atoms.

    With ``unit_norm`` set, every column must have Euclidean norm 1 to
    within ``UNIT_NORM_TOL``.
    """

    data: np.ndarray
    unit_norm: bool = True

    def __post_init__(self):
        A = _as_matrix(self.data, "Dictionary.data").copy()
        if A.shape[0] < 1 or A.shape[1] < 1:
            raise ValueError(f"Dictionary needs d >= 1 and r >= 1, got {A.shape}")
        if self.unit_norm:
            norms = np.linalg.norm(A, axis=0)
            bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
            if bad.size:
                raise ValueError(
                    f"columns {bad.tolist()} are not unit norm (norms {norms[bad].tolist()})"
                )
        A.setflags(write=False)
        object.__setattr__(self, "data", A)

    @property
    def d(self) -> int:
        return self.data.shape[0]

    @property
    def r(self) -> int:
        return self.data.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


@dataclass(frozen=True)
class PartitionedDictionary:
    """A dictionary split as ``[global_part, local_part]``.

    Either block may have zero columns.
    """

    global_part: np.ndarray
    local_part: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.global_part, dtype=float)
        loc = np.asarray(self.local_part, dtype=float)
        if g.ndim != 2 or loc.ndim != 2:
            raise ValueError("both parts must be 2-D")
        if g.shape[0] != loc.shape[0]:
            raise ValueError(
                f"global part has d={g.shape[0]} but local part has d={loc.shape[0]}"
            )
        g, loc = g.copy(), loc.copy()
        g.setflags(write=False)
        loc.setflags(write=False)
        object.__setattr__(self, "global_part", g)
        object.__setattr__(self, "local_part", loc)

    @property
    def d(self) -> int:
        return self.global_part.shape[0]

    @property
    def r_global(self) -> int:
        return self.global_part.shape[1]

    @property
    def r_local(self) -> int:
        return self.local_part.shape[1]

    @property
    def full(self) -> np.ndarray:
        return np.hstack([self.global_part, self.local_part])

    @classmethod
    def split(cls, D, r_global: int) -> "PartitionedDictionary":
        A = np.asarray(D, dtype=float)
        if not 0 <= r_global <= A.shape[1]:
            raise ValueError(f"r_global={r_global} out of range for {A.shape[1]} atoms")
        return cls(A[:, :r_global], A[:, r_global:])


@dataclass(frozen=True)
class SignedPermutation:
    """Column permutation with a sign per output column.

    ``apply(D)[:, k] == signs[k] * D[:, perm[k]]``.
    """

    perm: np.ndarray
    signs: np.ndarray

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=np.int64).copy()
        signs = np.asarray(self.signs, dtype=float).copy()
        if perm.ndim != 1 or signs.shape != perm.shape:
            raise ValueError("perm and signs must be 1-D of equal length")
        if not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise ValueError(f"perm {perm.tolist()} is not a bijection on range({perm.size})")
        if not np.all(np.isin(signs, (-1.0, 1.0))):
            raise ValueError("signs must be +1 or -1")
        perm.setflags(write=False)
        signs.setflags(write=False)
        object.__setattr__(self, "perm", perm)
        object.__setattr__(self, "signs", signs)

    @property
    def size(self) -> int:
        return self.perm.size

    @classmethod
    def identity(cls, r: int) -> "SignedPermutation":
        return cls(np.arange(r), np.ones(r))

    @classmethod
    def random(cls, r: int, rng: np.random.Generator) -> "SignedPermutation":
        return cls(rng.permutation(r), rng.choice([-1.0, 1.0], size=r))

    def apply(self, D) -> np.ndarray:
        A = np.asarray(D, dtype=float)
        if A.shape[1] != self.size:
            raise ValueError(f"permutation of size {self.size} applied to {A.shape[1]} columns")
        return A[:, self.perm] * self.signs

    def inverse(self) -> "SignedPermutation":
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.size)
        return SignedPermutation(inv, self.signs[inv])

    def as_matrix(self) -> np.ndarray:
        """The signed permutation matrix ``P`` with ``D @ P == self.apply(D)``."""
        P = np.zeros((self.size, self.size))
        P[self.perm, np.arange(self.size)] = self.signs
        return P


@dataclass(frozen=True)
class SparseCode:
    data: np.ndarray
    sparsity: float = field(init=False)

    def __post_init__(self):
        X = _as_matrix(self.data, "SparseCode.data").copy()
        X.setflags(write=False)
        object.__setattr__(self, "data", X)
        object.__setattr__(self, "sparsity", float(np.count_nonzero(X)) / max(X.size, 1))


def vector_d2(a, b) -> float:
    """Sign-invariant distance ``min(|a - b|, |a + b|)`` between two vectors."""
    return _vector_d2_with_sign(a, b)[0]


def _vector_d2_with_sign(a, b) -> tuple[float, float]:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite entry")
    plus = float(np.linalg.norm(a - b))
    minus = float(np.linalg.norm(a + b))
    # ties resolve toward +1
    if minus < plus:
        return minus, -1.0
    return plus, 1.0


def pairwise_d2(A, B) -> tuple[np.ndarray, np.ndarray]:
    """Cost and sign matrices between columns of ``A`` and ``B``.

    ``cost[j, k]`` is ``vector_d2(A[:, j], B[:, k])`` and ``sign[j, k]`` the
    sign ``s`` minimising ``|s * A[:, j] - B[:, k]|`` (``+1`` on ties).
    """
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    if A.shape[0] != B.shape[0]:
        raise ValueError(f"dimension mismatch: d={A.shape[0]} vs d={B.shape[0]}")
    diff = A[:, :, None] - B[:, None, :]
    summ = A[:, :, None] + B[:, None, :]
    plus = np.sqrt(np.einsum("ijk,ijk->jk", diff, diff))
    minus = np.sqrt(np.einsum("ijk,ijk->jk", summ, summ))
    sign = np.where(minus < plus, -1.0, 1.0)
    return np.minimum(plus, minus), sign


def _augment(u: int, allowed: np.ndarray, match_col: np.ndarray, seen: np.ndarray,
             banned_rows: np.ndarray) -> bool:
    for v in np.flatnonzero(allowed[u]):
        if seen[v]:
            continue
        seen[v] = True
        w = match_col[v]
        if w < 0 or (not banned_rows[w] and _augment(w, allowed, match_col, seen, banned_rows)):
            match_col[v] = u
            return True
    return False


def max_bipartite_matching(allowed: np.ndarray, rows: Sequence[int] | None = None) -> int:
    """Size of a maximum matching in the bipartite graph ``allowed`` (rows x cols).

    Simple augmenting-path search; ``rows`` restricts which left vertices take part.
    """
    n_rows, n_cols = allowed.shape
    match_col = np.full(n_cols, -1, dtype=np.int64)
    rows = range(n_rows) if rows is None else rows
    banned = np.ones(n_rows, dtype=bool)
    banned[list(rows)] = False
    size = 0
    for u in rows:
        if _augment(u, allowed, match_col, np.zeros(n_cols, dtype=bool), banned):
            size += 1
    return size


def bottleneck_assignment(cost: np.ndarray) -> tuple[float, np.ndarray]:
    """Assign every row to a distinct column minimising the largest cost used.

    Binary search over the sorted distinct costs, with a maximum matching as
    the feasibility test. Among optimal assignments the lexicographically
    smallest column sequence is returned.

    Returns:
        (bottleneck value, ``cols`` with ``cols[j]`` the column given to row j)
    """
    cost = np.asarray(cost, dtype=float)
    n_rows, n_cols = cost.shape
    if n_rows > n_cols:
        raise ValueError(f"cannot assign {n_rows} rows to {n_cols} columns")
    if n_rows == 0:
        return 0.0, np.zeros(0, dtype=np.int64)
    levels = np.unique(cost)
    lo, hi = 0, levels.size - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if max_bipartite_matching(cost <= levels[mid]) == n_rows:
            hi = mid
        else:
            lo = mid + 1
    theta = float(levels[lo])
    allowed = cost <= theta

    # greedy lexicographic extraction: fix row j to the smallest column that
    # still leaves a perfect matching for the remaining rows
    cols = np.empty(n_rows, dtype=np.int64)
    free = allowed.copy()
    for j in range(n_rows):
        for k in np.flatnonzero(free[j]):
            trial = free.copy()
            trial[:, k] = False
            trial[j, :] = False
            rest = range(j + 1, n_rows)
            if max_bipartite_matching(trial, rest) == n_rows - j - 1:
                cols[j] = k
                free = trial
                break
        else:  # pragma: no cover - theta guarantees a perfect matching
            raise RuntimeError("bottleneck extraction failed")
    return theta, cols


def dist_12(D1, D2) -> tuple[float, SignedPermutation]:
    """Signed-permutation-invariant l_{1,2} distance.

    Computes ``min_P max_k |(D1 P - D2)[:, k]|`` exactly and the minimising
    signed permutation ``P`` (applied to ``D1``).
    """
    A = _as_matrix(D1, "D1")
    B = _as_matrix(D2, "D2")
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")
    # row k of the cost is column k of D2; we pick which column of D1 feeds it
    cost, sign = pairwise_d2(B, A)
    value, cols = bottleneck_assignment(cost)
    signs = sign[np.arange(B.shape[1]), cols]
    return value, SignedPermutation(cols, signs)


def aligned_subset_error(D, reference) -> tuple[float, np.ndarray, np.ndarray]:
    """d_{1,2} between ``reference`` and its best-matching columns of ``D``.

    ``D`` may have more columns than ``reference``; each reference column is
    assigned a distinct column of ``D``.

    Returns:
        (error, chosen column indices of D, their signs)
    """
    A = _as_matrix(D, "D")
    R = _as_matrix(reference, "reference")
    if R.shape[1] == 0:
        return 0.0, np.zeros(0, dtype=np.int64), np.zeros(0)
    cost, sign = pairwise_d2(R, A)
    value, cols = bottleneck_assignment(cost)
    return value, cols, sign[np.arange(R.shape[1]), cols]


def dist_2_columns(D1, D2, pi: SignedPermutation) -> np.ndarray:
    """Per-column residual norms ``|(D1 P - D2)[:, j]|`` under a given ``P``."""
    A = _as_matrix(D1, "D1")
    B = _as_matrix(D2, "D2")
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")
    if not isinstance(pi, SignedPermutation):
        pi = SignedPermutation(*pi)
    return np.linalg.norm(pi.apply(A) - B, axis=0)


def dist_2_matrix(D1, D2) -> tuple[float, SignedPermutation]:
    """Spectral-norm variant ``min_P |D1 P - D2|_2`` by exhaustive search.

    Only feasible for small dictionaries; refuses ``r > 8``.
    """
    A = _as_matrix(D1, "D1")
    B = _as_matrix(D2, "D2")
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")
    r = A.shape[1]
    if r > MATRIX_D2_MAX_ATOMS:
        raise ValueError(f"matrix-level d_2 is exhaustive; r={r} exceeds {MATRIX_D2_MAX_ATOMS}")
    best, best_pi = np.inf, None
    for perm in itertools.permutations(range(r)):
        for signs in itertools.product((1.0, -1.0), repeat=r):
            pi = SignedPermutation(perm, signs)
            val = float(np.linalg.norm(pi.apply(A) - B, ord=2))
            if val < best:
                best, best_pi = val, pi
    return best, best_pi


def incoherence(D) -> float:
    """``sqrt(d) * max_{j != k} |<D_j, D_k>|`` for a unit-norm dictionary."""
    A = _as_matrix(D)
    d, r = A.shape
    if r < 2:
        logger.info("incoherence of a single-atom dictionary is 0 by convention")
        return 0.0
    G = np.abs(A.T @ A)
    np.fill_diagonal(G, 0.0)
    return float(np.sqrt(d) * min(G.max(), 1.0))


def estimate_beta(locals_: Sequence, n_random: int = 0,
                  rng: np.random.Generator | None = None) -> float:
    """Upper estimate of the identifiability margin of a set of local dictionaries.

    Evaluates ``max_i min_j vector_d2(local_i[:, j], v)`` at every candidate
    unit vector ``v`` and returns the smallest value. Candidates are all local
    atoms plus ``n_random`` uniform random unit vectors. A value near zero
    means some direction sits close to an atom of every client.
    """
    mats = [_as_matrix(L, f"locals[{i}]") for i, L in enumerate(locals_)]
    if not mats:
        raise ValueError("need at least one local dictionary")
    d = mats[0].shape[0]
    for i, L in enumerate(mats):
        if L.shape[0] != d:
            raise ValueError(f"locals[{i}] has d={L.shape[0]}, expected {d}")
        if L.shape[1] == 0:
            raise ValueError(f"locals[{i}] is empty; beta is undefined")
    candidates = [np.hstack(mats)]
    if n_random:
        rng = rng if rng is not None else np.random.default_rng(0)
        V = rng.standard_normal((d, n_random))
        candidates.append(V / np.linalg.norm(V, axis=0))
    V = np.hstack(candidates)
    worst = np.zeros(V.shape[1])
    for L in mats:
        cost, _ = pairwise_d2(L, V)
        worst = np.maximum(worst, cost.min(axis=0))
    return float(worst.min())
