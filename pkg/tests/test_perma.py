import csv

import numpy as np
import pytest

from perdl.core import PartitionedDictionary, dist_12
from perdl.dl_algs import DlAlgorithm, WarmStartConfig, estimate_rate
from perdl.matching import global_matching
from perdl.perma import (ClientFailure, ClientState, MessageBus, local_update, reconstruct_split,
                         run_independent, run_perma, write_traces_csv)
from perdl.synthgen import SynthConfig, generate, perturb_dictionary


@pytest.fixture(scope="module")
def gt():
    return generate(SynthConfig(seed=0))


def make_clients(gt, alg=None, **kw):
    alg = alg or DlAlgorithm()
    return [ClientState(i, Y, alg, warm=WarmStartConfig(seed=i), **kw) for i, Y in enumerate(gt.data)]


# --- local_update ----------------------------------------------------------

def test_local_update_fixed_point(gt):
    part = PartitionedDictionary(gt.global_dict, gt.local_dicts[0])
    out = local_update(gt.data[0], part, DlAlgorithm())
    assert dist_12(out.global_part, gt.global_dict)[0] <= 1e-12
    # identity assignment and reference signs
    np.testing.assert_allclose(out.global_part, gt.global_dict, atol=1e-12)
    assert dist_12(out.local_part, gt.local_dicts[0])[0] <= 1e-12


def test_local_update_contracts_global_part(gt):
    D = gt.client_dict(0)
    Dp, pi = perturb_dictionary(D, 0.15, seed=1, permute=False)
    part = PartitionedDictionary.split(Dp, 3)
    errs = [dist_12(part.global_part, gt.global_dict)[0]]
    for _ in range(5):
        part = local_update(gt.data[0], part, DlAlgorithm())
        errs.append(dist_12(part.global_part, gt.global_dict)[0])
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert estimate_rate(errs).rho < 1


def test_local_update_zero_width(gt):
    D = gt.client_dict(0)
    out = local_update(gt.data[0], PartitionedDictionary.split(D, 0), DlAlgorithm())
    assert out.r_global == 0
    np.testing.assert_array_equal(out.local_part, DlAlgorithm().step(gt.data[0], D)[0])


def test_local_update_without_replacement():
    # two identical reference atoms cannot both take the same output atom
    ref = np.eye(4)[:, [0, 0]]
    part = PartitionedDictionary(ref, np.eye(4)[:, [1, 2]])
    out = local_update(np.eye(4) * 2.0, part, DlAlgorithm(zeta=0.1, allow_rank_deficient=True))
    assert out.r_global == 2 and out.r_local == 2
    np.testing.assert_allclose(out.full.T @ out.full, np.eye(4), atol=1e-12)


# --- run_perma -------------------------------------------------------------

def test_zero_rounds_equals_matching(gt):
    clients = make_clients(gt)
    server, parts = run_perma(clients, 3, 0, gt)
    match = global_matching([c.initial for c in clients], 3)
    np.testing.assert_array_equal(server.global_dict, match.global_estimate)
    for p, L in zip(parts, match.local_estimates):
        np.testing.assert_array_equal(p.local_part, L)
    assert len(server.history) == 1 and server.history[0].round == 0


def test_reference_run_converges(gt):
    server, parts = run_perma(make_clients(gt), 3, 50, gt)
    assert server.history[-1].global_err[0] <= 0.05
    for p in parts:
        np.testing.assert_array_equal(p.global_part, server.global_dict)
    rounds = [tr.round for tr in server.history]
    assert rounds == list(range(51))
    errs = [e for tr in server.history for e in tr.global_err + tr.local_err]
    assert min(errs) >= 0


def test_averaging_is_exact_mean(gt):
    server, _ = run_perma(make_clients(gt), 3, 3, gt, renormalize=False)
    ups = [m for m in server.bus.log if m.round == 3 and m.direction == "up"]
    mean = np.mean([m.payload for m in ups], axis=0)
    assert np.max(np.abs(mean - server.global_dict)) <= 1e-12


def test_messages_after_round_zero_are_global_only(gt):
    server, _ = run_perma(make_clients(gt), 3, 2, gt)
    for m in server.bus.log:
        if m.round > 0:
            assert m.kind == "global_dictionary" and m.payload.shape == (6, 3)
    kinds = {(m.round, m.direction, m.kind) for m in server.bus.log if m.round == 0}
    assert kinds == {(0, "up", "initial_dictionary"), (0, "down", "global_dictionary"),
                     (0, "down", "local_dictionary")}


def test_message_log_file(tmp_path, gt):
    server, _ = run_perma(make_clients(gt), 3, 1, gt)
    server.bus.write_log(tmp_path / "m.jsonl")
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert len(lines) == len(server.bus.log) == 10 + 20 + 10 + 10


def test_serial_and_threaded_identical(gt):
    a, _ = run_perma(make_clients(gt), 3, 5, gt, threads=1)
    b, _ = run_perma(make_clients(gt), 3, 5, gt, threads=8)
    assert a.global_dict.tobytes() == b.global_dict.tobytes()
    assert [t.global_err for t in a.history] == [t.global_err for t in b.history]


def test_client_order_equivariance(gt):
    clients = make_clients(gt)
    a, _ = run_perma(clients, 3, 10, gt)
    order = [3, 1, 4, 0, 9, 2, 6, 5, 8, 7]
    shuffled = [ClientState(c.client_id, c.data, c.alg, warm=c.warm) for c in
                (clients[i] for i in order)]
    gt_shuffled = type(gt)(gt.global_dict, [gt.local_dicts[i] for i in order],
                           [gt.codes[i] for i in order], [gt.data[i] for i in order])
    b, _ = run_perma(shuffled, 3, 10, gt_shuffled)
    assert abs(dist_12(a.global_dict, gt.global_dict)[0]
               - dist_12(b.global_dict, gt.global_dict)[0]) <= 1e-9


def test_single_client(gt):
    server, parts = run_perma(make_clients(gt)[:1], 3, 2, gt)
    assert parts[0].r_global == 3 and parts[0].r_local == 3


def test_client_failure_names_client(gt):
    clients = make_clients(gt)
    clients[4] = ClientState(4, gt.data[4], DlAlgorithm(zeta=50.0), initial=gt.client_dict(4))
    with pytest.raises(ClientFailure, match="client 4 failed in round 1"):
        run_perma(clients, 3, 1, gt)


def test_rejects_mismatched_dimensions(gt):
    bad = make_clients(gt)[:2] + [ClientState(2, np.ones((5, 10)))]
    with pytest.raises(ValueError, match="d=5"):
        run_perma(bad, 3, 1)


def test_rate_averaging_across_heterogeneous_solvers(gt):
    # gradient clients with different fixed step sizes contract at different rates
    etas = [0.002, 0.004, 0.006, 0.008, 0.010] * 2
    def clients():
        return [ClientState(i, Y, DlAlgorithm("general", eta=eta), initial=perturb_dictionary(
                    gt.client_dict(i), 0.1, seed=100 + i, permute=False)[0])
                for i, (Y, eta) in enumerate(zip(gt.data, etas))]
    server, _ = run_perma(clients(), 3, 30, gt, renormalize=False)
    rho_global = estimate_rate(server.global_errors()).rho
    rhos = []
    for i, c in enumerate(clients()):
        solo = run_perma([c], 3, 30, type(gt)(gt.global_dict, [gt.local_dicts[i]], [], []),
                         renormalize=False)[0]
        rhos.append(estimate_rate(solo.global_errors()).rho)
    assert min(rhos) <= rho_global <= max(rhos)
    assert abs(rho_global - np.mean(rhos)) <= 0.1


# --- run_independent -------------------------------------------------------

def test_independent_zero_rounds(gt):
    traces = run_independent(make_clients(gt), 0, gt)
    assert len(traces) == 1 and traces[0].round == 0


def test_homogeneous_gap_is_small():
    cfg = SynthConfig(num_clients=4, global_atoms=6, samples_per_client=400, seed=2)
    g = generate(cfg)
    mk = lambda: [ClientState(i, Y, warm=WarmStartConfig(seed=i)) for i, Y in enumerate(g.data)]
    server, _ = run_perma(mk(), 6, 20, g)
    indep = run_independent(mk(), 20, g)
    collab = server.history[-1].global_err[0]
    assert abs(collab - max(indep[-1].global_err)) < 1e-6


# --- reconstruction and traces ---------------------------------------------

def test_reconstruct_split_full_k_exact(gt):
    part = PartitionedDictionary(gt.global_dict, gt.local_dicts[0])
    Yg, Yl = reconstruct_split(gt.data[0], part, 0.15, 6)
    np.testing.assert_allclose(Yg + Yl, gt.data[0], atol=1e-9)
    np.testing.assert_allclose(Yg, gt.global_dict @ gt.codes[0][:3], atol=1e-12)


def test_reconstruct_split_top_k_support():
    rng = np.random.default_rng(0)
    Q = np.linalg.qr(rng.standard_normal((6, 6)))[0]
    Y = rng.standard_normal((6, 40))
    part = PartitionedDictionary.split(Q, 2)
    Yg, Yl = reconstruct_split(Y, part, 0.0, 2)
    X = Q.T @ (Yg + Yl)
    assert np.all(np.count_nonzero(np.abs(X) > 1e-12, axis=0) <= 2)
    with pytest.raises(ValueError):
        reconstruct_split(Y, part, 0.0, 7)


def test_trace_csv_schema(tmp_path, gt):
    server, _ = run_perma(make_clients(gt), 3, 2, gt)
    write_traces_csv(server.history, tmp_path / "t.csv")
    with open(tmp_path / "t.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["round", "client_id", "global_err", "local_err", "recon_residual",
                             "wall_ms"]
    assert len(rows) == 30 and all(r["wall_ms"] == "0.0" for r in rows)


def test_record_timing_fills_wall_ms(gt):
    server, _ = run_perma(make_clients(gt), 3, 1, gt, record_timing=True)
    assert server.history[1].wall_ms > 0


def test_bus_routes_per_client():
    bus = MessageBus([0, 1])
    from perdl.perma import Message
    bus.send_down(Message(0, "down", 1, "global_dictionary", np.zeros((2, 1))))
    assert bus.receive(1).client_id == 1
    assert bus.records()[0]["payload_shape"] == [2, 1]
