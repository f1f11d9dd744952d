"""Global matching: pull shared atoms out of N client dictionaries.

Atoms of client ``i`` form layer ``i`` of a DAG; every atom of layer ``i``
links to every atom of layer ``i + 1`` with the sign-invariant distance as
weight, and a source/sink attach to the first/last layers at zero cost. Each
shortest source-to-sink path picks one atom per client; those atoms are
sign-aligned to the layer-1 atom, averaged into a global atom, and removed
before the next search.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import pairwise_d2

logger = logging.getLogger(__name__)


class MatchingError(ValueError):
    pass


@dataclass
class LayeredDag:
    """Weighted N-layer DAG over client atoms.

    ``weights[i][a, b]`` is the edge weight from atom ``a`` of layer ``i`` to
    atom ``b`` of layer ``i + 1``. ``active[i]`` marks atoms not yet consumed
    by an extracted path. Source and sink edges have weight 0 and are implicit.
    """

    weights: list[np.ndarray]
    signs: list[np.ndarray]
    active: list[np.ndarray]
    relaxations: int = 0

    @property
    def num_layers(self) -> int:
        return len(self.active)

    @property
    def layer_sizes(self) -> list[int]:
        return [int(m.sum()) for m in self.active]

    def edge_count(self) -> int:
        sizes = self.layer_sizes
        inner = sum(a * b for a, b in zip(sizes[:-1], sizes[1:]))
        return sizes[0] + sizes[-1] + inner

    def layers(self) -> list[np.ndarray]:
        return [np.flatnonzero(m) for m in self.active]

    def remove_path(self, path: Sequence[int]) -> None:
        for mask, node in zip(self.active, path):
            if not mask[node]:
                raise MatchingError(f"node {node} already removed")
            mask[node] = False


def build_dag(dicts: Sequence) -> LayeredDag:
    mats = [np.asarray(D, dtype=float) for D in dicts]
    if len(mats) < 2:
        raise MatchingError(f"matching needs at least two clients, got {len(mats)}")
    d = mats[0].shape[0]
    for i, D in enumerate(mats):
        if D.ndim != 2 or D.shape[0] != d:
            raise MatchingError(f"client {i} dictionary has shape {D.shape}, expected d={d}")
    weights, signs = [], []
    for A, B in zip(mats[:-1], mats[1:]):
        w, s = pairwise_d2(A, B)
        weights.append(w)
        signs.append(s)
    active = [np.ones(D.shape[1], dtype=bool) for D in mats]
    return LayeredDag(weights, signs, active)


def shortest_path(dag: LayeredDag) -> tuple[list[int], float]:
    """Minimum-weight source-to-sink path over the active atoms.

    Costs-to-sink are relaxed backwards layer by layer (one pass over the
    edges); the path is then read forwards choosing the smallest optimal atom
    index in each layer, which makes it the lexicographically smallest
    shortest path.
    """
    N = dag.num_layers
    layers = dag.layers()
    for i, nodes in enumerate(layers):
        if nodes.size == 0:
            raise MatchingError(
                f"layer {i} has no atoms left; r_g exceeds that client's atom count"
            )
    to_sink = [None] * N
    to_sink[N - 1] = np.zeros(layers[N - 1].size)
    dag.relaxations += layers[N - 1].size
    for i in range(N - 2, -1, -1):
        w = dag.weights[i][np.ix_(layers[i], layers[i + 1])]
        to_sink[i] = (w + to_sink[i + 1][None, :]).min(axis=1)
        dag.relaxations += w.size
    dag.relaxations += layers[0].size

    # forward read-out; equality is exact because the minima were formed
    # from these same sums
    pos = int(np.flatnonzero(to_sink[0] == to_sink[0].min())[0])
    path_pos = [pos]
    for i in range(N - 1):
        w = dag.weights[i][layers[i][pos], layers[i + 1]]
        pos = int(np.flatnonzero(w + to_sink[i + 1] == to_sink[i][pos])[0])
        path_pos.append(pos)
    path = [int(layers[i][p]) for i, p in enumerate(path_pos)]
    length = 0.0
    for i in range(N - 1):
        length += float(dag.weights[i][path[i], path[i + 1]])
    return path, length


@dataclass
class MatchResult:
    """Output of :func:`global_matching`.

    ``assignments[i]`` lists ``(atom index, sign)`` pairs of client ``i`` in
    global-column order. ``layer_order`` records which input client sits in
    each layer.
    """

    global_estimate: np.ndarray
    local_estimates: list[np.ndarray]
    assignments: list[list[tuple[int, float]]]
    path_lengths: list[float]
    layer_order: list[int] = field(default_factory=list)
    relaxations: int = 0

    def indices(self, client: int) -> list[int]:
        return [k for k, _ in self.assignments[client]]

    def local_indices(self, client: int, r: int) -> list[int]:
        used = set(self.indices(client))
        return [k for k in range(r) if k not in used]


def global_matching(dicts: Sequence, r_g: int, renormalize: bool = True,
                    dag: LayeredDag | None = None) -> MatchResult:
    mats = [np.asarray(D, dtype=float) for D in dicts]
    if r_g < 0:
        raise MatchingError("r_g must be >= 0")
    if mats and r_g > min(D.shape[1] for D in mats):
        raise MatchingError(
            f"r_g={r_g} exceeds the smallest client atom count {min(D.shape[1] for D in mats)}"
        )
    dag = build_dag(mats) if dag is None else dag
    d = mats[0].shape[0]
    N = len(mats)
    columns, lengths = [], []
    assignments: list[list[tuple[int, float]]] = [[] for _ in mats]
    for _ in range(r_g):
        path, length = shortest_path(dag)
        anchor = mats[0][:, path[0]]
        acc = np.zeros(d)
        for i, k in enumerate(path):
            atom = mats[i][:, k]
            ip = float(anchor @ atom)
            if ip == 0.0:
                logger.warning("client %d atom %d is orthogonal to its anchor; using sign +1", i, k)
            s = -1.0 if ip < 0 else 1.0
            acc += s * atom
            assignments[i].append((k, s))
        col = acc / N
        if renormalize:
            col = col / np.linalg.norm(col)
        columns.append(col)
        lengths.append(length)
        dag.remove_path(path)
    G = np.column_stack(columns) if columns else np.zeros((d, 0))
    locals_ = [D[:, dag.active[i]] for i, D in enumerate(mats)]
    return MatchResult(G, locals_, assignments, lengths, list(range(N)), dag.relaxations)


def matching_cost(result: MatchResult, dicts: Sequence) -> float:
    """Sum over global columns and consecutive clients of the matched-atom distance."""
    mats = [np.asarray(D, dtype=float) for D in dicts]
    if len(mats) != len(result.assignments):
        raise MatchingError("assignment count does not match the number of clients")
    widths = {len(a) for a in result.assignments}
    if len(widths) > 1:
        raise MatchingError("clients have different numbers of matched atoms")
    for i, (D, assigned) in enumerate(zip(mats, result.assignments)):
        idx = [k for k, _ in assigned]
        if len(set(idx)) != len(idx) or any(not 0 <= k < D.shape[1] for k in idx):
            raise MatchingError(f"client {i} has an invalid assignment {idx}")
    total = 0.0
    for i in range(len(mats) - 1):
        A = mats[i][:, result.indices(i)]
        B = mats[i + 1][:, result.indices(i + 1)]
        diff = np.minimum(np.linalg.norm(A - B, axis=0), np.linalg.norm(A + B, axis=0))
        total += float(diff.sum())
    return total


def dump_dag(dag: LayeredDag, paths: Sequence[Sequence[int]] = ()) -> str:
    """Plain-text adjacency listing of the active DAG plus any chosen paths."""
    out = io.StringIO()
    layers = dag.layers()
    out.write(f"# layers {dag.num_layers} sizes {dag.layer_sizes}\n")
    for k in layers[0]:
        out.write(f"s -> L0:{k} 0\n")
    for i in range(dag.num_layers - 1):
        for a in layers[i]:
            for b in layers[i + 1]:
                out.write(f"L{i}:{a} -> L{i + 1}:{b} {dag.weights[i][a, b]:.17g}\n")
    for k in layers[-1]:
        out.write(f"L{dag.num_layers - 1}:{k} -> t 0\n")
    for j, path in enumerate(paths):
        out.write(f"# path {j}: " + " ".join(f"L{i}:{k}" for i, k in enumerate(path)) + "\n")
    return out.getvalue()
