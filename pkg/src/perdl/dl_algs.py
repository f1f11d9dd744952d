"""Per-client dictionary-learning iterations.

Two alternating-minimisation solvers share one shape: threshold the analysis
code ``D.T @ Y``, then update the dictionary, either by projecting ``Y X.T``
onto matrices with orthonormal columns (``orthogonal``) or by one gradient
step on ``|DX - Y|_F^2`` (``general``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Literal, NamedTuple, Sequence

import numpy as np

from . import rng as rng_mod
from .core import PartitionedDictionary

logger = logging.getLogger(__name__)

RANK_TOL = 1e-12


class DictionaryLearningError(RuntimeError):
    pass


@dataclass(frozen=True)
class DlAlgorithm:
    """One iteration of a per-client solver.

    ``eta=None`` for the general kind picks ``1 / (2 |X|_2^2)`` per step,
    i.e. the reciprocal Lipschitz constant of the gradient at the current code.
    """

    kind: Literal["orthogonal", "general"] = "orthogonal"
    zeta: float = 0.15
    eta: float | None = None
    renormalize: bool = True
    # orthogonal kind: accept any SVD polar factor when Y X^T is rank deficient
    allow_rank_deficient: bool = False

    def __post_init__(self):
        if self.kind not in ("orthogonal", "general"):
            raise ValueError(f"unknown solver kind {self.kind!r}")
        if self.zeta < 0:
            raise ValueError("zeta must be >= 0")
        if self.eta is not None and self.eta <= 0:
            raise ValueError("eta must be > 0")

    def with_zeta(self, zeta: float) -> "DlAlgorithm":
        return replace(self, zeta=zeta)

    def step(self, Y, D) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "orthogonal":
            return step_orthogonal(Y, D, self.zeta, self.allow_rank_deficient)
        return step_general(Y, D, self.zeta, self.eta, self.renormalize)


@dataclass(frozen=True)
class WarmStartConfig:
    zeta0: float = 0.5
    gamma: float = 0.9
    zeta_final: float = 0.15
    iters_per_level: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.zeta_final <= 0 or self.zeta0 < self.zeta_final:
            raise ValueError("need zeta0 >= zeta_final > 0")
        if self.iters_per_level < 1:
            raise ValueError("iters_per_level must be >= 1")

    def schedule(self) -> list[float]:
        levels = []
        k = 0
        while True:
            z = max(self.zeta_final, self.gamma ** k * self.zeta0)
            levels.append(z)
            if z == self.zeta_final:
                return levels
            k += 1


def hard_threshold(A, zeta: float) -> np.ndarray:
    """Keep entries with ``|a| >= zeta``, zero the rest."""
    if zeta < 0:
        raise ValueError("zeta must be >= 0")
    A = np.asarray(A, dtype=float)
    return np.where(np.abs(A) >= zeta, A, 0.0)


def polar(A, allow_rank_deficient: bool = False) -> np.ndarray:
    """Orthonormal polar factor ``U V^T`` of a full-column-rank matrix.

    For a rank-deficient input the factor is not unique; with
    ``allow_rank_deficient`` the SVD's choice is returned (still a maximiser
    of ``<Q, A>``), otherwise :class:`DictionaryLearningError` is raised.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[1] > A.shape[0]:
        raise ValueError(f"polar needs a tall (d >= r) matrix, got {A.shape}")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if not allow_rank_deficient and s.size and s[-1] <= RANK_TOL * max(1.0, s[0]):
        raise DictionaryLearningError(
            f"polar factor undefined: smallest singular value {s[-1]:.3e} (rank deficient)"
        )
    return U @ Vt


def sparse_code(Y, D, zeta: float) -> tuple[np.ndarray, float]:
    """Thresholded analysis code ``HT_zeta(D.T Y)`` and its residual ``|Y - DX|_F``."""
    Y = np.asarray(Y, dtype=float)
    D = np.asarray(D, dtype=float)
    if D.shape[0] != Y.shape[0]:
        raise ValueError(f"D has d={D.shape[0]} but Y has d={Y.shape[0]}")
    if np.isinf(zeta):
        X = np.zeros((D.shape[1], Y.shape[1]))
    else:
        X = hard_threshold(D.T @ Y, zeta)
    return X, float(np.linalg.norm(Y - D @ X))


def step_orthogonal(Y, D, zeta: float, allow_rank_deficient: bool = False
                    ) -> tuple[np.ndarray, np.ndarray]:
    """``X = HT_zeta(D^T Y)`` then ``D+ = Polar(Y X^T)``."""
    Y = np.asarray(Y, dtype=float)
    X, _ = sparse_code(Y, D, zeta)
    if not X.any():
        raise DictionaryLearningError(
            f"threshold zeta={zeta} zeroes the whole code; use a smaller zeta")
    try:
        D_new = polar(Y @ X.T, allow_rank_deficient)
    except DictionaryLearningError as exc:
        raise DictionaryLearningError(
            f"{exc}; threshold zeta={zeta} leaves too few active codes, try a smaller zeta"
        ) from exc
    return D_new, X


def default_eta(X) -> float:
    s = np.linalg.norm(X, ord=2) if np.size(X) else 0.0
    if s == 0:
        raise DictionaryLearningError("all-zero code; no gradient step possible")
    return 1.0 / (2.0 * s * s)


def step_general(Y, D, zeta: float, eta: float | None = None,
                 renormalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """``D - 2 eta (DX - Y) X^T`` at the thresholded code, optionally renormalised."""
    Y = np.asarray(Y, dtype=float)
    D = np.asarray(D, dtype=float)
    X, _ = sparse_code(Y, D, zeta)
    if eta is None:
        eta = default_eta(X)
    elif eta < 0:
        raise ValueError("eta must be >= 0")
    with np.errstate(over="ignore", invalid="ignore"):
        D_new = D - 2.0 * eta * (D @ X - Y) @ X.T
    if not np.all(np.isfinite(D_new)):
        raise DictionaryLearningError(f"gradient step diverged (eta={eta} too large)")
    if renormalize:
        norms = np.linalg.norm(D_new, axis=0)
        if np.any(norms == 0):
            raise DictionaryLearningError("gradient step produced a zero atom")
        D_new = D_new / norms
    return D_new, X


def random_dictionary(gen: np.random.Generator, d: int, r: int, orthogonal: bool) -> np.ndarray:
    if orthogonal:
        return rng_mod.random_orthogonal(gen, d, r)
    D = gen.standard_normal((d, r))
    return D / np.linalg.norm(D, axis=0)


def warm_start(Y, cfg: WarmStartConfig, alg: DlAlgorithm, r: int,
               D0=None) -> np.ndarray:
    """Random start followed by solver iterations at a shrinking threshold.

    Runs ``iters_per_level`` steps at each threshold of ``cfg.schedule()``.
    """
    Y = np.asarray(Y, dtype=float)
    if D0 is None:
        gen = rng_mod.stream(cfg.seed, rng_mod.WARM_START)
        D = random_dictionary(gen, Y.shape[0], r, alg.kind == "orthogonal")
    else:
        D = np.asarray(D0, dtype=float)
    for zeta in cfg.schedule():
        level = alg.with_zeta(zeta)
        for _ in range(cfg.iters_per_level):
            D, _ = level.step(Y, D)
    return D


def refine_local(Y, part: PartitionedDictionary, alg: DlAlgorithm, t_refine: int) -> np.ndarray:
    """Re-fit the local block on the data with the global contribution removed."""
    if t_refine < 0:
        raise ValueError("t_refine must be >= 0")
    if part.r_local == 0:
        raise ValueError("local part is empty; nothing to refine")
    if t_refine == 0:
        return np.array(part.local_part)
    Y = np.asarray(Y, dtype=float)
    X, _ = sparse_code(Y, part.full, alg.zeta)
    residual = Y - part.global_part @ X[: part.r_global]
    D = np.array(part.local_part)
    for _ in range(t_refine):
        D, _ = alg.step(residual, D)
    return D


class RateFit(NamedTuple):
    rho: float
    psi: float

    @property
    def contracting(self) -> bool:
        return self.rho < 1.0

    def fixed_point(self) -> float:
        return self.psi / (1.0 - self.rho) if self.contracting else np.inf


def estimate_rate(errors: Sequence[float]) -> RateFit:
    """Least-squares fit of ``e[t+1] = rho * e[t] + psi``."""
    e = np.asarray(errors, dtype=float)
    if e.ndim != 1 or e.size < 3:
        raise ValueError("need at least 3 error values")
    if not np.all(np.isfinite(e)) or np.any(e < 0):
        raise ValueError("errors must be finite and nonnegative")
    A = np.column_stack([e[:-1], np.ones(e.size - 1)])
    (rho, psi), *_ = np.linalg.lstsq(A, e[1:], rcond=None)
    fit = RateFit(float(rho), float(psi))
    if not fit.contracting:
        logger.warning("fitted rate %.4f >= 1: error sequence is not contracting", fit.rho)
    return fit
