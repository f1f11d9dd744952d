import csv
import json
import math

import numpy as np
import pytest

from perdl.cli import ExperimentConfig, main, validation_report
from perdl.ingest import read_matrix, write_matrix
from perdl.synthgen import SynthConfig, generate


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_default_config_is_reference_benchmark():
    cfg = ExperimentConfig()
    s = cfg.synth(0)
    assert (s.num_clients, s.dim, s.atoms_per_client, s.global_atoms) == (10, 6, 6, 3)
    assert s.samples_per_client == (200,) * 10
    assert (s.bernoulli_p, s.truncation, cfg.zeta) == (0.2, 0.3, 0.15)


def test_weak_clients_get_fewer_samples():
    cfg = ExperimentConfig(weak_clients=3, weak_factor=10)
    assert cfg.synth(0).samples_per_client == (200,) * 7 + (20,) * 3


def test_synth_outputs(tmp_path):
    out = tmp_path / "s"
    assert main(["synth", "--out", str(out), "--seeds", "0", "--rounds", "2"]) == 0
    rows = read_csv(out / "seed0" / "collaborative.csv")
    assert len(rows) == 30 and rows[0]["round"] == "0"
    assert len(read_csv(out / "seed0" / "independent.csv")) == 30
    summary = read_csv(out / "summary.csv")
    assert {r["method"] for r in summary} == {"collaborative", "independent"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["rounds"] == 2 and manifest["command"] == "synth"


def test_synth_zero_rounds(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--rounds", "0"]) == 0
    rows = read_csv(tmp_path / "seed0" / "collaborative.csv")
    assert {r["round"] for r in rows} == {"0"}


def test_synth_repeat_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name), "--rounds", "3"]) == 0
    for f in ("seed0/collaborative.csv", "seed0/independent.csv", "summary.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_config_file_then_flags(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[run]\nrounds = 1\nseeds = 4 5\n[synth]\nnum_clients = 3\n"
                   "[solver]\nzeta = 0.15\n")
    out = tmp_path / "o"
    assert main(["synth", "--config", str(ini), "--out", str(out), "--num-clients", "4"]) == 0
    cfg = json.loads((out / "manifest.json").read_text())["config"]
    assert cfg["seeds"] == [4, 5] and cfg["num_clients"] == 4 and cfg["rounds"] == 1


def test_config_errors_exit_1(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--threads", "0"]) == 1
    assert "threads" in capsys.readouterr().err
    ini = tmp_path / "bad.ini"
    ini.write_text("[run]\nbogus = 1\n")
    assert main(["synth", "--config", str(ini)]) == 1
    assert main(["match", "--dicts", str(tmp_path / "missing.pdlm")]) == 1


def test_runtime_error_exit_2(tmp_path):
    a, b = tmp_path / "a.pdlm", tmp_path / "b.pdlm"
    write_matrix(np.eye(3), a)
    write_matrix(np.eye(3)[:, :2], b)
    assert main(["match", "--dicts", str(a), str(b), "--r-global", "3",
                 "--out", str(tmp_path / "o")]) == 2


# --- validate --------------------------------------------------------------

def test_validate_orthogonal_ground_truth(tmp_path, capsys):
    assert main(["validate", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "validate.txt").read_text()
    assert "beta (estimate)" in text
    gt = generate(SynthConfig())
    _, info = validation_report([gt.client_dict(i) for i in range(10)], gt.local_dicts, [])
    assert max(info["mu"]) < 1e-12


def test_validate_duplicated_local_atom():
    I = np.eye(4)
    dicts = [I[:, [0, 1, 2]], I[:, [0, 3, 2]]]
    text, info = validation_report(dicts, [d[:, 1:] for d in dicts], [0.01])
    assert info["beta"] == 0.0 and info["margin"] < 0 and "fails" in text


def test_validate_margin_by_hand():
    gt = generate(SynthConfig(num_clients=3, seed=1))
    dicts = [gt.client_dict(i) for i in range(3)]
    eps = [0.01, 0.02, 0.005]
    _, info = validation_report(dicts, gt.local_dicts, eps)
    # recomputed: incoherence and beta from explicit loops
    mu = 0.0
    for D in dicts:
        for a in range(6):
            for b in range(6):
                if a != b:
                    mu = max(mu, math.sqrt(6) * abs(float(D[:, a] @ D[:, b])))
    beta = math.inf
    for L in gt.local_dicts:
        for v in L.T:
            worst = max(min(min(np.linalg.norm(v - u), np.linalg.norm(v + u)) for u in M.T)
                        for M in gt.local_dicts)
            beta = min(beta, worst)
    expected = min(math.sqrt(2 - 2 * mu / math.sqrt(6)), beta) - 4 * sum(eps)
    assert info["margin"] == pytest.approx(expected, abs=1e-12)


def test_validate_empty_locals_not_applicable():
    text, info = validation_report([np.eye(3), np.eye(3)], [np.zeros((3, 0))] * 2, [0.1])
    assert "not applicable" in text and info["beta"] is None


# --- match -----------------------------------------------------------------

def test_match_files(tmp_path):
    gt = generate(SynthConfig(num_clients=3, seed=2))
    paths = []
    for i in range(3):
        p = tmp_path / f"d{i}.csv"
        write_matrix(gt.client_dict(i)[:, ::-1], p)
        paths.append(str(p))
    out = tmp_path / "o"
    dag = tmp_path / "dag.txt"
    assert main(["match", "--dicts", *paths, "--out", str(out), "--dump-dag", str(dag)]) == 0
    G = read_matrix(out / "global.pdlm")
    from perdl.core import dist_12
    assert dist_12(G, gt.global_dict)[0] <= 1e-12
    assert read_matrix(out / "local1.pdlm").shape == (6, 3)
    assert len(read_csv(out / "assignments.csv")) == 9
    assert "# path 2:" in dag.read_text()


# --- reconstruct -----------------------------------------------------------

def test_reconstruct_custom_full_k_is_exact(tmp_path):
    gt = generate(SynthConfig(num_clients=3, seed=0))
    paths = []
    for i, Y in enumerate(gt.data):
        write_matrix(Y, tmp_path / f"y{i}.pdlm")
        paths.append(str(tmp_path / f"y{i}.pdlm"))
    out = tmp_path / "o"
    assert main(["reconstruct", "--data", *paths, "--out", str(out), "--k", "6",
                 "--rounds", "10"]) == 0
    res = [float(r["residual_fro"]) for r in read_csv(out / "residuals.csv")]
    assert len(res) == 3 and max(res) <= 1e-9


def test_reconstruct_imbalanced(tmp_path):
    rng = np.random.default_rng(0)
    labels = np.repeat(np.arange(10), 40)
    centres = np.linalg.qr(rng.standard_normal((16, 16)))[0][:, :10]
    pool = centres[:, labels] + 0.05 * rng.standard_normal((16, labels.size))
    write_matrix(pool, tmp_path / "pool.pdlm")
    write_matrix(labels[None, :].astype(float), tmp_path / "labels.pdlm")
    out = tmp_path / "o"
    assert main(["reconstruct", "--scenario", "imbalanced", "--pool", str(tmp_path / "pool.pdlm"),
                 "--labels", str(tmp_path / "labels.pdlm"), "--per-client", "40",
                 "--num-clients", "3", "--r-global", "4", "--rounds", "3", "--zeta", "0.05",
                 "--out", str(out)]) == 0
    rows = read_csv(out / "residuals.csv")
    assert {r["method"] for r in rows} == {"independent", "perma_global"}
    cfg = json.loads((out / "manifest.json").read_text())["config"]
    assert cfg["k"] == 5 and cfg["majority_fraction"] == 0.9


def test_reconstruct_frames(tmp_path):
    rng = np.random.default_rng(1)
    background = rng.random((8, 8, 3))
    paths = []
    for i in range(3):
        frame = background.copy()
        frame[2 * i:2 * i + 2, 2 * i:2 * i + 2] += 1.0
        p = tmp_path / f"f{i}.pdlm"
        write_matrix(frame.reshape(8, -1), p)
        paths.append(str(p))
    out = tmp_path / "o"
    assert main(["reconstruct", "--scenario", "frames", "--frames", *paths,
                 "--frame-shape", "8,8,3", "--patch-height", "4", "--patch-width", "4",
                 "--r-global", "2", "--k", "4", "--atoms", "6", "--zeta", "0.05",
                 "--rounds", "2", "--out", str(out)]) == 0
    assert read_matrix(out / "frame0_global.pdlm").shape == (8, 24)
    cfg = json.loads((out / "manifest.json").read_text())["config"]
    assert cfg["kind"] == "general"


def test_frames_scenario_defaults():
    from perdl.cli import SCENARIO_DEFAULTS
    assert SCENARIO_DEFAULTS["frames"]["r_global"] == 30 and SCENARIO_DEFAULTS["frames"]["k"] == 50
    imb = SCENARIO_DEFAULTS["imbalanced"]
    assert (imb["num_clients"], imb["per_client"], imb["majority_fraction"], imb["k"]) == \
        (10, 500, 0.9, 5)
