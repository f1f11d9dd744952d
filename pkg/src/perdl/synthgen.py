"""Synthetic ground truth: shared/unique orthogonal dictionaries and sparse codes.

Default parameters reproduce the small synthetic benchmark: ten clients,
6-dimensional data, six atoms per client of which three are shared, 200
samples each, Gaussian-Bernoulli codes with activation probability 0.2 and
nonzero magnitudes floored at 0.3.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng as rng_mod
from .core import SignedPermutation


@dataclass(frozen=True)
class SynthConfig:
    num_clients: int = 10
    dim: int = 6
    atoms_per_client: int = 6
    global_atoms: int = 3
    samples_per_client: int | tuple[int, ...] = 200
    bernoulli_p: float = 0.2
    truncation: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if not 0 <= self.global_atoms <= self.atoms_per_client:
            raise ValueError("need 0 <= global_atoms <= atoms_per_client")
        if not 0 < self.bernoulli_p <= 1:
            raise ValueError("bernoulli_p must lie in (0, 1]")
        if self.truncation < 0:
            raise ValueError("truncation must be >= 0")
        n = self.samples_per_client
        if isinstance(n, (list, tuple)):
            if len(n) != self.num_clients:
                raise ValueError(
                    f"samples_per_client has {len(n)} entries for {self.num_clients} clients"
                )
            object.__setattr__(self, "samples_per_client", tuple(int(v) for v in n))
            if min(self.samples_per_client) < 1:
                raise ValueError("every client needs at least one sample")
        elif n < 1:
            raise ValueError("samples_per_client must be >= 1")

    @property
    def local_atoms(self) -> int:
        return self.atoms_per_client - self.global_atoms

    def samples(self, client: int) -> int:
        n = self.samples_per_client
        return n[client] if isinstance(n, tuple) else int(n)


@dataclass(frozen=True)
class GroundTruth:
    global_dict: np.ndarray
    local_dicts: list[np.ndarray]
    codes: list[np.ndarray]
    data: list[np.ndarray] = field(repr=False)

    @property
    def num_clients(self) -> int:
        return len(self.local_dicts)

    def client_dict(self, i: int) -> np.ndarray:
        return np.hstack([self.global_dict, self.local_dicts[i]])


def generate_dictionaries(cfg: SynthConfig) -> tuple[np.ndarray, list[np.ndarray]]:
    """Shared global block plus per-client local blocks, jointly orthonormal.

    The global block is the first ``global_atoms`` columns of a random
    orthogonal basis. Each client's local block is an orthonormal basis of a
    random subspace of the global block's orthogonal complement.
    """
    d, r, rg = cfg.dim, cfg.atoms_per_client, cfg.global_atoms
    if r > d:
        raise ValueError(
            f"orthogonal construction needs atoms_per_client <= dim, got {r} > {d}; "
            "use ground_truth_from_dictionaries for overcomplete models"
        )
    G = rng_mod.random_orthogonal(rng_mod.stream(cfg.seed, rng_mod.GLOBAL_BASIS), d, rg)
    locals_ = []
    for i in range(cfg.num_clients):
        gen = rng_mod.stream(cfg.seed, rng_mod.LOCAL_BASIS, i)
        Z = gen.standard_normal((d, r - rg))
        Z -= G @ (G.T @ Z)
        Q, R = np.linalg.qr(Z)
        s = np.sign(np.diag(R))
        s[s == 0] = 1.0
        L = Q * s
        # second pass removes the residual global component left by round-off
        L -= G @ (G.T @ L)
        L /= np.linalg.norm(L, axis=0) if L.size else 1.0
        locals_.append(L)
    return G, locals_


def generate_codes(cfg: SynthConfig, r: int, n: int | None = None,
                   client: int = 0) -> np.ndarray:
    """Truncated Gaussian-Bernoulli code matrix of shape ``(r, n)``.

    Entries are standard normal times Bernoulli(``bernoulli_p``); nonzeros
    smaller than ``truncation`` in magnitude are pushed out to
    ``truncation * sign``.
    """
    n = cfg.samples(client) if n is None else n
    gen = rng_mod.stream(cfg.seed, rng_mod.CODES, client)
    vals = gen.standard_normal((r, n))
    mask = gen.random((r, n)) < cfg.bernoulli_p
    X = np.where(mask, vals, 0.0)
    c = cfg.truncation
    small = mask & (np.abs(X) < c)
    # exact zeros from the Gaussian are measure-zero; sign(0) would drop them
    X[small] = c * np.where(X[small] < 0, -1.0, 1.0)
    return X


def ground_truth_from_dictionaries(cfg: SynthConfig, global_dict, local_dicts: Sequence
                                   ) -> GroundTruth:
    """Generate codes and data for caller-supplied (possibly overcomplete) dictionaries."""
    G = np.asarray(global_dict, dtype=float)
    Ls = [np.asarray(L, dtype=float) for L in local_dicts]
    if len(Ls) != cfg.num_clients:
        raise ValueError(f"got {len(Ls)} local dictionaries for {cfg.num_clients} clients")
    codes, data = [], []
    for i, L in enumerate(Ls):
        if L.shape[0] != G.shape[0]:
            raise ValueError(f"local_dicts[{i}] has d={L.shape[0]}, expected {G.shape[0]}")
        D = np.hstack([G, L])
        X = generate_codes(cfg, D.shape[1], client=i)
        codes.append(X)
        data.append(D @ X)
    return GroundTruth(G, Ls, codes, data)


def generate(cfg: SynthConfig) -> GroundTruth:
    G, Ls = generate_dictionaries(cfg)
    return ground_truth_from_dictionaries(cfg, G, Ls)


def perturb_dictionary(D, eps: float, seed: int, *, permute: bool = True
                       ) -> tuple[np.ndarray, SignedPermutation]:
    """Move each atom by at most ``eps`` (sign-invariant distance) and shuffle.

    Each column gets a random tangent vector of norm ``eps`` and is
    renormalised, which moves it by ``sqrt(2 - 2 / sqrt(1 + eps^2)) <= eps``.
    The result is then passed through a random signed permutation, returned
    alongside so tests can compare against the recovered one.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    A = np.asarray(D, dtype=float)
    d, r = A.shape
    gen = rng_mod.stream(seed, rng_mod.PERTURB)
    out = A.copy()
    if eps > 0:
        T = gen.standard_normal((d, r))
        T -= A * np.sum(A * T, axis=0)
        norms = np.linalg.norm(T, axis=0)
        norms[norms == 0] = 1.0
        out = A + eps * T / norms
        out /= np.linalg.norm(out, axis=0)
    pi = SignedPermutation.random(r, gen) if permute else SignedPermutation.identity(r)
    return pi.apply(out), pi
