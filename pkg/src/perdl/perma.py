"""Federated matching-and-averaging over a simulated client/server harness.

Clients own their data and local dictionaries. Round 0: every client warm
starts and uploads its full dictionary; the server runs global matching and
sends each client back the averaged global block plus that client's own
local block. Every later round: clients run one solver step followed by
re-identification of the global atoms, upload only the global block, and the
server broadcasts the average.

Messages travel over per-client queues and every message is logged, so a run
can be audited for what left each client.
"""

from __future__ import annotations

import csv
import json
import logging
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np

from .core import PartitionedDictionary, aligned_subset_error, dist_12, pairwise_d2
from .dl_algs import DlAlgorithm, WarmStartConfig, refine_local, sparse_code, warm_start
from .matching import global_matching
from .synthgen import GroundTruth

logger = logging.getLogger(__name__)

TRACE_FIELDS = ["round", "client_id", "global_err", "local_err", "recon_residual", "wall_ms"]


class ClientFailure(RuntimeError):
    def __init__(self, client_id, round_, cause: BaseException):
        super().__init__(f"client {client_id} failed in round {round_}: {cause}")
        self.client_id = client_id
        self.round = round_


@dataclass
class ClientState:
    client_id: int
    data: np.ndarray
    alg: DlAlgorithm = field(default_factory=DlAlgorithm)
    r: int | None = None
    warm: WarmStartConfig | None = None
    initial: np.ndarray | None = None
    partition: PartitionedDictionary | None = None
    t_refine: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.r is None:
            self.r = self.data.shape[0] if self.initial is None else np.shape(self.initial)[1]

    def initialize(self) -> np.ndarray:
        if self.initial is None:
            warm = self.warm if self.warm is not None else WarmStartConfig(
                zeta_final=self.alg.zeta, seed=self.client_id)
            self.initial = warm_start(self.data, warm, self.alg, self.r)
        return self.initial


@dataclass(frozen=True)
class Message:
    round: int
    direction: Literal["up", "down"]
    client_id: int
    kind: str
    payload: np.ndarray

    def record(self) -> dict:
        return {"round": self.round, "direction": self.direction, "client_id": self.client_id,
                "kind": self.kind, "payload_shape": list(self.payload.shape)}


class MessageBus:
    """One uplink queue to the server and one downlink queue per client."""

    def __init__(self, client_ids: Sequence[int]):
        self.uplink: queue.Queue[Message] = queue.Queue()
        self.downlinks = {cid: queue.Queue() for cid in client_ids}
        self.log: list[Message] = []
        self._lock = threading.Lock()

    def _record(self, msg: Message):
        with self._lock:
            self.log.append(msg)

    def send_up(self, msg: Message):
        self._record(msg)
        self.uplink.put(msg)

    def send_down(self, msg: Message):
        self._record(msg)
        self.downlinks[msg.client_id].put(msg)

    def gather(self, order: Sequence[int]) -> list[Message]:
        """Block until one uplink message per id in ``order``; return them in that order."""
        by_id = {}
        for _ in range(len(order)):
            m = self.uplink.get()
            by_id[m.client_id] = m
        return [by_id[cid] for cid in order]

    def receive(self, client_id: int) -> Message:
        return self.downlinks[client_id].get_nowait()

    def records(self) -> list[dict]:
        return [m.record() for m in sorted(self.log, key=lambda m: (m.round, m.direction != "up",
                                                                      m.client_id, m.kind))]

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")


@dataclass
class RoundTrace:
    round: int
    client_ids: list[int]
    global_err: list[float]
    local_err: list[float]
    recon_residual: list[float]
    wall_ms: float = 0.0

    def rows(self) -> list[dict]:
        return [
            {"round": self.round, "client_id": cid, "global_err": g, "local_err": loc,
             "recon_residual": res, "wall_ms": self.wall_ms}
            for cid, g, loc, res in zip(self.client_ids, self.global_err, self.local_err,
                                        self.recon_residual)
        ]


@dataclass
class ServerState:
    round: int = 0
    global_dict: np.ndarray | None = None
    history: list[RoundTrace] = field(default_factory=list)
    bus: MessageBus | None = None
    matching: object = None

    def global_errors(self, client: int = 0) -> list[float]:
        return [tr.global_err[client] for tr in self.history]


def local_update(Y, part: PartitionedDictionary, alg: DlAlgorithm) -> PartitionedDictionary:
    """One solver step, then re-identify the global atoms against the input global block.

    Reference atoms are matched in order, each to its nearest not-yet-taken
    output atom, and flipped to agree in sign with the reference.
    """
    ref = part.global_part
    D_new, _ = alg.step(Y, part.full)
    r_g = ref.shape[1]
    if r_g == 0:
        return PartitionedDictionary(D_new[:, :0], D_new)
    cost, _ = pairwise_d2(ref, D_new)
    taken = np.zeros(D_new.shape[1], dtype=bool)
    chosen, signs = [], []
    for j in range(r_g):
        order = np.argsort(cost[j], kind="stable")
        k = next(int(k) for k in order if not taken[k])
        if k != order[0]:
            logger.info("reference atom %d: nearest atom %d already taken, using %d",
                        j, int(order[0]), k)
        taken[k] = True
        chosen.append(k)
        signs.append(-1.0 if ref[:, j] @ D_new[:, k] < 0 else 1.0)
    G = D_new[:, chosen] * np.asarray(signs)
    return PartitionedDictionary(G, D_new[:, ~taken])


def _local_error(local, truth) -> float:
    if truth is None:
        return float("nan")
    local = np.asarray(local)
    truth = np.asarray(truth)
    if truth.shape[1] == 0 and local.shape[1] == 0:
        return 0.0
    if local.shape == truth.shape:
        return dist_12(local, truth)[0]
    return aligned_subset_error(local, truth)[0] if local.shape[1] >= truth.shape[1] else float("nan")


def _recon(Y, D, zeta) -> float:
    return sparse_code(Y, D, zeta)[1]


def _map(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def initialize_clients(clients: Sequence[ClientState], threads: int = 1) -> list[np.ndarray]:
    """Run (or reuse) every client's warm start; returns the initial dictionaries."""
    def init(c: ClientState):
        try:
            return c.initialize()
        except Exception as exc:
            raise ClientFailure(c.client_id, 0, exc) from exc
    return _map(init, clients, threads)


def run_perma(clients: Sequence[ClientState], r_g: int, rounds: int,
              ground_truth: GroundTruth | None = None, *, renormalize: bool = True,
              threads: int = 1, record_timing: bool = False
              ) -> tuple[ServerState, list[PartitionedDictionary]]:
    """Run the federated meta-algorithm for ``rounds`` update rounds.

    ``ground_truth`` enables per-round error traces. Client lists index
    ground truth positionally. ``record_timing`` fills ``wall_ms``; it is off
    by default so traces are byte-reproducible.
    """
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    if not clients:
        raise ValueError("need at least one client")
    d = clients[0].data.shape[0]
    for c in clients:
        if c.data.shape[0] != d:
            raise ValueError(f"client {c.client_id} has d={c.data.shape[0]}, expected {d}")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ValueError(f"client ids must be unique, got {ids}")
    bus = MessageBus(ids)
    server = ServerState(bus=bus)
    N = len(clients)

    def trace(t: int, wall: float) -> RoundTrace:
        g_err, l_err, res = [], [], []
        for i, c in enumerate(clients):
            part = c.partition
            if ground_truth is not None:
                g_err.append(dist_12(server.global_dict, ground_truth.global_dict)[0]
                             if r_g else 0.0)
                l_err.append(_local_error(part.local_part, ground_truth.local_dicts[i]))
            else:
                g_err.append(float("nan"))
                l_err.append(float("nan"))
            res.append(_recon(c.data, part.full, c.alg.zeta))
        return RoundTrace(t, ids, g_err, l_err, res, wall if record_timing else 0.0)

    start = time.perf_counter()
    inits = initialize_clients(clients, threads)
    for c, D0 in zip(clients, inits):
        bus.send_up(Message(0, "up", c.client_id, "initial_dictionary", np.array(D0)))
    uploads = bus.gather(ids)
    if N >= 2:
        match = global_matching([m.payload for m in uploads], r_g, renormalize=renormalize)
        G, locals_ = match.global_estimate, match.local_estimates
    else:
        match = None
        G, locals_ = uploads[0].payload[:, :r_g], [uploads[0].payload[:, r_g:]]
    server.matching = match
    server.global_dict = G
    for c, L in zip(clients, locals_):
        bus.send_down(Message(0, "down", c.client_id, "global_dictionary", G))
        bus.send_down(Message(0, "down", c.client_id, "local_dictionary", L))
    for c in clients:
        G_c = bus.receive(c.client_id).payload
        L_c = bus.receive(c.client_id).payload
        c.partition = PartitionedDictionary(G_c, L_c)
    server.history.append(trace(0, (time.perf_counter() - start) * 1e3))

    for t in range(1, rounds + 1):
        start = time.perf_counter()

        def client_round(c: ClientState):
            try:
                part = c.partition
                if c.t_refine > 0 and part.r_local > 0:
                    part = PartitionedDictionary(
                        part.global_part, refine_local(c.data, part, c.alg, c.t_refine))
                part = local_update(c.data, part, c.alg)
            except Exception as exc:
                raise ClientFailure(c.client_id, t, exc) from exc
            c.partition = part
            bus.send_up(Message(t, "up", c.client_id, "global_dictionary", part.global_part))

        _map(client_round, clients, threads)
        uploads = bus.gather(ids)
        G = np.mean([m.payload for m in uploads], axis=0)
        if renormalize and G.shape[1]:
            G = G / np.linalg.norm(G, axis=0)
        server.global_dict = G
        server.round = t
        for c in clients:
            bus.send_down(Message(t, "down", c.client_id, "global_dictionary", G))
        for c in clients:
            G_c = bus.receive(c.client_id).payload
            c.partition = PartitionedDictionary(G_c, c.partition.local_part)
        server.history.append(trace(t, (time.perf_counter() - start) * 1e3))
    return server, [c.partition for c in clients]


def run_independent(clients: Sequence[ClientState], rounds: int, ground_truth: GroundTruth,
                    *, threads: int = 1, record_timing: bool = False) -> list[RoundTrace]:
    """Baseline: each client iterates its own solver with no communication.

    The global error of a client is measured on the atoms that best align
    with the true global dictionary; its local error on the remaining atoms.
    """
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    ids = [c.client_id for c in clients]
    G_true = ground_truth.global_dict
    dicts = [np.array(D) for D in initialize_clients(clients, threads)]

    def evaluate(i: int, D: np.ndarray) -> tuple[float, float, float]:
        c = clients[i]
        err, cols, _ = aligned_subset_error(D, G_true)
        rest = np.delete(D, cols, axis=1)
        return err, _local_error(rest, ground_truth.local_dicts[i]), _recon(c.data, D, c.alg.zeta)

    def trace(t: int, wall: float) -> RoundTrace:
        vals = [evaluate(i, D) for i, D in enumerate(dicts)]
        return RoundTrace(t, ids, [v[0] for v in vals], [v[1] for v in vals],
                          [v[2] for v in vals], wall if record_timing else 0.0)

    traces = [trace(0, 0.0)]
    for t in range(1, rounds + 1):
        start = time.perf_counter()

        def step(i: int):
            c = clients[i]
            try:
                return c.alg.step(c.data, dicts[i])[0]
            except Exception as exc:
                raise ClientFailure(c.client_id, t, exc) from exc

        dicts = _map(step, list(range(len(clients))), threads)
        traces.append(trace(t, (time.perf_counter() - start) * 1e3))
    return traces


def reconstruct_split(Y, part: PartitionedDictionary, zeta: float, k: int
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Top-``k`` reconstruction of ``Y`` split into global and local contributions.

    Codes come from thresholded analysis against the full dictionary; only the
    ``k`` largest-magnitude coefficients of each sample are kept (ties go to
    the lower atom index).
    """
    Y = np.asarray(Y, dtype=float)
    D = part.full
    r = D.shape[1]
    if not 0 <= k <= r:
        raise ValueError(f"k={k} must lie in [0, {r}]")
    X, _ = sparse_code(Y, D, zeta)
    if k < r:
        order = np.argsort(-np.abs(X), axis=0, kind="stable")
        drop = order[k:, :]
        np.put_along_axis(X, drop, 0.0, axis=0)
    rg = part.r_global
    return part.global_part @ X[:rg], part.local_part @ X[rg:]


def write_traces_csv(traces: Sequence[RoundTrace], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, lineterminator="\n")
        w.writeheader()
        for tr in traces:
            for row in tr.rows():
                w.writerow({k: (repr(float(v)) if isinstance(v, float) else v)
                            for k, v in row.items()})
