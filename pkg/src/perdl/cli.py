"""Command-line entry point.

Subcommands::

    perdl synth        independent vs collaborative runs on synthetic data
    perdl reconstruct  top-k reconstructions on ingested data (imbalanced | frames | custom)
    perdl validate     incoherence / identifiability report for a set of dictionaries
    perdl match        global matching on dictionary files

Settings resolve as built-in defaults, then ``--config`` file, then flags.
The config file is INI style with sections ``[run]``, ``[synth]``,
``[solver]`` and ``[reconstruct]``; keys mirror the long flag names with
dashes replaced by underscores.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .core import estimate_beta, incoherence
from .dl_algs import DlAlgorithm, WarmStartConfig
from .ingest import (PatchConfig, build_imbalanced_split, frames_to_patches,
                     patches_to_frames, read_matrix, write_matrix)
from .matching import build_dag, dump_dag, global_matching
from .perma import (ClientState, PartitionedDictionary, reconstruct_split, run_independent,
                    run_perma, write_traces_csv)
from .synthgen import SynthConfig, generate

log = logging.getLogger("perdl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    scenario: str = "synthetic"
    seeds: list[int] = field(default_factory=lambda: [0])
    rounds: int = 50
    r_global: int = 3
    renormalize: bool = True
    threads: int = 1
    out: str = "results"
    # synthetic model
    num_clients: int = 10
    dim: int = 6
    atoms_per_client: int = 6
    samples_per_client: int = 200
    bernoulli_p: float = 0.2
    truncation: float = 0.3
    weak_clients: int = 0
    weak_factor: int = 10
    # solver
    kind: str = "orthogonal"
    zeta: float = 0.15
    eta: float | None = None
    atom_renormalize: bool = True
    allow_rank_deficient: bool = True
    zeta0: float = 0.5
    gamma: float = 0.9
    iters_per_level: int = 10
    t_refine: int = 0
    # reconstruction
    k: int = 5
    data: list[str] = field(default_factory=list)
    pool: str | None = None
    labels: str | None = None
    majority_fraction: float = 0.9
    per_client: int = 500
    frames: list[str] = field(default_factory=list)
    frame_shape: list[int] = field(default_factory=list)
    patch_height: int = 12
    patch_width: int = 16
    stride: int | None = None
    channels: str = "stack"
    atoms: int | None = None
    # validate / match
    dicts: list[str] = field(default_factory=list)
    eps: list[float] = field(default_factory=list)
    dump_dag: str | None = None

    def validate(self) -> None:
        errors = []
        if self.scenario not in ("synthetic", "imbalanced", "frames", "custom"):
            errors.append(f"scenario: unknown value {self.scenario!r}")
        if not self.seeds:
            errors.append("seeds: need at least one seed")
        if self.rounds < 0:
            errors.append("rounds: must be >= 0")
        if self.r_global < 0:
            errors.append("r_global: must be >= 0")
        if self.threads < 1:
            errors.append("threads: must be >= 1")
        if self.kind not in ("orthogonal", "general"):
            errors.append(f"kind: unknown solver {self.kind!r}")
        if self.zeta < 0:
            errors.append("zeta: must be >= 0")
        if self.eta is not None and self.eta <= 0:
            errors.append("eta: must be > 0")
        if not 0 < self.gamma < 1:
            errors.append("gamma: must lie in (0, 1)")
        if self.zeta0 < self.zeta:
            errors.append("zeta0: must be >= zeta")
        if self.k < 0:
            errors.append("k: must be >= 0")
        if not 0 <= self.weak_clients <= self.num_clients:
            errors.append("weak_clients: must lie in [0, num_clients]")
        if self.weak_factor < 1:
            errors.append("weak_factor: must be >= 1")
        for name in ("data", "frames", "dicts"):
            for p in getattr(self, name):
                if not Path(p).exists():
                    errors.append(f"{name}: path {p} does not exist")
        for name in ("pool", "labels"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                errors.append(f"{name}: path {p} does not exist")
        if errors:
            raise ConfigError("; ".join(errors))

    def solver(self) -> DlAlgorithm:
        return DlAlgorithm(self.kind, self.zeta, self.eta, self.atom_renormalize,
                           self.allow_rank_deficient)

    def warm(self, seed: int, client: int) -> WarmStartConfig:
        return WarmStartConfig(self.zeta0, self.gamma, self.zeta, self.iters_per_level,
                               seed=(seed << 20) + client)

    def synth(self, seed: int) -> SynthConfig:
        n = [self.samples_per_client] * self.num_clients
        for i in range(self.num_clients - self.weak_clients, self.num_clients):
            n[i] = max(1, self.samples_per_client // self.weak_factor)
        return SynthConfig(self.num_clients, self.dim, self.atoms_per_client, self.r_global,
                           tuple(n), self.bernoulli_p, self.truncation, seed)


SCENARIO_DEFAULTS = {
    "synthetic": {},
    "imbalanced": {"num_clients": 10, "per_client": 500, "majority_fraction": 0.9, "k": 5,
                   "r_global": 20},
    "frames": {"r_global": 30, "k": 50, "kind": "general"},
    "custom": {},
}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "on", "true", "yes"):
        return True
    if t in ("0", "off", "false", "no"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _coerce(name: str, raw):
    if name not in _FIELD_TYPES:
        raise ConfigError(f"{name}: unknown setting")
    kind = str(_FIELD_TYPES[name])
    try:
        if isinstance(raw, str) and raw.strip() == "" and "None" in kind:
            return None
        if kind.startswith("list"):
            if isinstance(raw, str):
                raw = [v for v in raw.replace(",", " ").split() if v]
            cast = int if "int" in kind else float if "float" in kind else str
            return [cast(v) for v in raw]
        if kind == "bool":
            return raw if isinstance(raw, bool) else _parse_bool(raw)
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def load_config_file(path) -> dict:
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"config: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in ("run", "synth", "solver", "reconstruct"):
            raise ConfigError(f"config: unknown section [{section}]")
        for key, raw in parser.items(section):
            values[key] = _coerce(key, raw)
    return values


def resolve_config(args: argparse.Namespace, fallback: str) -> ExperimentConfig:
    from_file = load_config_file(args.config) if args.config else {}
    scenario = getattr(args, "scenario", None) or from_file.get("scenario") or fallback
    values = dict(SCENARIO_DEFAULTS.get(scenario, {}))
    values.update(from_file)
    values["scenario"] = scenario
    for name in _FIELD_TYPES:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = _coerce(name, v)
    if getattr(args, "seed", None) is not None:
        values["seeds"] = [args.seed]
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def write_manifest(cfg: ExperimentConfig, out: Path, command: str) -> None:
    manifest = {"artifact": "perdl", "version": __version__, "schema_version": SCHEMA_VERSION,
                "command": command, "config": asdict(cfg)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def cmd_synth(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    alg = cfg.solver()
    summary = []
    for seed in cfg.seeds:
        gt = generate(cfg.synth(seed))
        clients = [ClientState(i, gt.data[i], alg, r=cfg.atoms_per_client,
                               warm=cfg.warm(seed, i), t_refine=cfg.t_refine)
                   for i in range(cfg.num_clients)]
        server, parts = run_perma(clients, cfg.r_global, cfg.rounds, gt,
                                  renormalize=cfg.renormalize, threads=cfg.threads)
        baseline = [ClientState(c.client_id, c.data, alg, initial=c.initial) for c in clients]
        indep = run_independent(baseline, cfg.rounds, gt, threads=cfg.threads)
        sub = out / f"seed{seed}"
        sub.mkdir(exist_ok=True)
        write_traces_csv(server.history, sub / "collaborative.csv")
        write_traces_csv(indep, sub / "independent.csv")
        server.bus.write_log(sub / "messages.jsonl")
        last_c, last_i = server.history[-1], indep[-1]
        for i, cid in enumerate(last_c.client_ids):
            summary.append((seed, cid, "collaborative", last_c.global_err[i], last_c.local_err[i]))
            summary.append((seed, cid, "independent", last_i.global_err[i], last_i.local_err[i]))
        log.info("seed %d: collaborative global error %.3e", seed, last_c.global_err[0])
    _write_rows(out / "summary.csv",
                ["seed", "client_id", "method", "final_global_err", "final_local_err"], summary)
    write_manifest(cfg, out, "synth")
    return EXIT_OK


def _frames_from_files(cfg: ExperimentConfig) -> list[np.ndarray]:
    if not cfg.frame_shape or len(cfg.frame_shape) not in (2, 3):
        raise ConfigError("frame_shape: give H,W or H,W,C")
    shape = tuple(cfg.frame_shape)
    frames = []
    for p in cfg.frames:
        M = read_matrix(p)
        if M.size != math.prod(shape):
            raise ConfigError(f"frames: {p} has {M.size} values, frame_shape needs {math.prod(shape)}")
        frames.append(M.reshape(shape))
    return frames


def _perma_clients(datasets: Sequence[np.ndarray], cfg: ExperimentConfig, seed: int,
                   r: int) -> list[ClientState]:
    alg = cfg.solver()
    return [ClientState(i, Y, alg, r=r, warm=cfg.warm(seed, i), t_refine=cfg.t_refine)
            for i, Y in enumerate(datasets)]


def cmd_reconstruct(cfg: ExperimentConfig) -> int:
    out = _out_dir(cfg)
    seed = cfg.seeds[0]
    rows = []
    if cfg.scenario == "imbalanced":
        if cfg.pool is None or cfg.labels is None:
            raise ConfigError("imbalanced: --pool and --labels are required")
        pool = read_matrix(cfg.pool)
        labels = read_matrix(cfg.labels).ravel().astype(int)
        datasets = []
        for i in range(cfg.num_clients):
            major = (i + 1) % 10
            datasets.append(build_imbalanced_split(pool, labels, major, cfg.majority_fraction,
                                                   cfg.per_client, seed + i).data)
        r = cfg.atoms if cfg.atoms is not None else pool.shape[0]
        clients = _perma_clients(datasets, cfg, seed, r)
        server, parts = run_perma(clients, cfg.r_global, cfg.rounds,
                                  renormalize=cfg.renormalize, threads=cfg.threads)
        G = server.global_dict
        empty = np.zeros((G.shape[0], 0))
        for i, c in enumerate(clients):
            Y = c.data
            own = PartitionedDictionary(empty, c.initial)
            k_own = min(cfg.k, own.local_part.shape[1])
            Yg, Yl = reconstruct_split(Y, own, cfg.zeta, k_own)
            rows.append((i, "independent", float(np.linalg.norm(Y - Yl))))
            glob = PartitionedDictionary(G, empty)
            Yg, _ = reconstruct_split(Y, glob, cfg.zeta, min(cfg.k, G.shape[1]))
            rows.append((i, "perma_global", float(np.linalg.norm(Y - Yg))))
            if i == 0:
                write_matrix(Yl, out / "client0_independent.pdlm")
                write_matrix(Yg, out / "client0_perma_global.pdlm")
    elif cfg.scenario == "frames":
        frames = _frames_from_files(cfg)
        pcfg = PatchConfig(cfg.patch_height, cfg.patch_width, cfg.stride, cfg.channels)
        datasets = frames_to_patches(frames, pcfg)
        r = cfg.atoms if cfg.atoms is not None else datasets[0].shape[0]
        clients = _perma_clients(datasets, cfg, seed, r)
        server, parts = run_perma(clients, cfg.r_global, cfg.rounds,
                                  renormalize=cfg.renormalize, threads=cfg.threads)
        shape = tuple(cfg.frame_shape)
        for i, (c, part) in enumerate(zip(clients, parts)):
            Yg, Yl = reconstruct_split(c.data, part, cfg.zeta, min(cfg.k, part.full.shape[1]))
            rows.append((i, "perma_split", float(np.linalg.norm(c.data - Yg - Yl))))
            bg, fg = patches_to_frames([Yg, Yl], pcfg, shape)
            write_matrix(bg.reshape(shape[0], -1), out / f"frame{i}_global.pdlm")
            write_matrix(fg.reshape(shape[0], -1), out / f"frame{i}_local.pdlm")
    else:
        if not cfg.data:
            raise ConfigError("custom: --data needs one matrix file per client")
        datasets = [read_matrix(p) for p in cfg.data]
        d = datasets[0].shape[0]
        for p, Y in zip(cfg.data, datasets):
            if Y.shape[0] != d:
                raise ConfigError(f"data: client file {p} has d={Y.shape[0]}, expected {d}")
        r = cfg.atoms if cfg.atoms is not None else d
        clients = _perma_clients(datasets, cfg, seed, r)
        server, parts = run_perma(clients, cfg.r_global, cfg.rounds,
                                  renormalize=cfg.renormalize, threads=cfg.threads)
        for i, (c, part) in enumerate(zip(clients, parts)):
            Yg, Yl = reconstruct_split(c.data, part, cfg.zeta, min(cfg.k, part.full.shape[1]))
            rows.append((i, "perma_split", float(np.linalg.norm(c.data - Yg - Yl))))
            write_matrix(Yg, out / f"client{i}_global.pdlm")
            write_matrix(Yl, out / f"client{i}_local.pdlm")
    _write_rows(out / "residuals.csv", ["client_id", "method", "residual_fro"], rows)
    write_manifest(cfg, out, "reconstruct")
    return EXIT_OK


def _load_partitioned(cfg: ExperimentConfig) -> tuple[list[np.ndarray], list[np.ndarray]]:
    if cfg.dicts:
        mats = [read_matrix(p) for p in cfg.dicts]
        return mats, [M[:, cfg.r_global:] for M in mats]
    gt = generate(cfg.synth(cfg.seeds[0]))
    return [gt.client_dict(i) for i in range(gt.num_clients)], list(gt.local_dicts)


def validation_report(dicts: Sequence[np.ndarray], locals_: Sequence[np.ndarray],
                      eps: Sequence[float]) -> tuple[str, dict]:
    d = dicts[0].shape[0]
    mus = [incoherence(D) for D in dicts]
    mu = max(mus)
    lines = [f"clients: {len(dicts)}  d: {d}"]
    lines += [f"mu[{i}] = {m:.12g}" for i, m in enumerate(mus)]
    lines.append(f"mu (max) = {mu:.12g}")
    info = {"mu": mus, "mu_max": mu, "beta": None, "margin": None}
    if any(L.shape[1] == 0 for L in locals_):
        lines.append("beta: not applicable (empty local dictionary)")
        return "\n".join(lines) + "\n", info
    beta = estimate_beta(locals_)
    info["beta"] = beta
    lines.append(f"beta (estimate) = {beta:.12g}")
    if eps:
        if len(eps) == 1:
            eps = list(eps) * len(dicts)
        if len(eps) != len(dicts):
            raise ConfigError(f"eps: need 1 or {len(dicts)} values, got {len(eps)}")
        bound = min(math.sqrt(max(0.0, 2 - 2 * mu / math.sqrt(d))), beta)
        margin = bound - 4 * sum(eps)
        info["margin"] = margin
        lines.append(f"4*sum(eps) = {4 * sum(eps):.12g}")
        lines.append(f"min(sqrt(2 - 2 mu / sqrt(d)), beta) = {bound:.12g}")
        lines.append(f"margin = {margin:.12g}  hypothesis {'holds' if margin >= 0 else 'fails'}")
    return "\n".join(lines) + "\n", info


def cmd_validate(cfg: ExperimentConfig) -> int:
    dicts, locals_ = _load_partitioned(cfg)
    text, _ = validation_report(dicts, locals_, cfg.eps)
    sys.stdout.write(text)
    out = _out_dir(cfg)
    (out / "validate.txt").write_text(text)
    return EXIT_OK


def cmd_match(cfg: ExperimentConfig) -> int:
    if len(cfg.dicts) < 2:
        raise ConfigError("dicts: matching needs at least two dictionary files")
    mats = [read_matrix(p) for p in cfg.dicts]
    out = _out_dir(cfg)
    result = global_matching(mats, cfg.r_global, renormalize=cfg.renormalize)
    write_matrix(result.global_estimate, out / "global.pdlm")
    for i, L in enumerate(result.local_estimates):
        write_matrix(L, out / f"local{i}.pdlm")
    rows = [(i, j, k, s) for i, a in enumerate(result.assignments) for j, (k, s) in enumerate(a)]
    _write_rows(out / "assignments.csv", ["client_id", "global_column", "atom", "sign"], rows)
    if cfg.dump_dag:
        paths = [[result.assignments[i][j][0] for i in range(len(mats))]
                 for j in range(cfg.r_global)]
        Path(cfg.dump_dag).write_text(dump_dag(build_dag(mats), paths))
    write_manifest(cfg, out, "match")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "reconstruct": cmd_reconstruct,
            "validate": cmd_validate, "match": cmd_match}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--rounds")
    common.add_argument("--renormalize", choices=["on", "off"])
    common.add_argument("--threads")
    common.add_argument("--r-global", dest="r_global")
    common.add_argument("--zeta")
    common.add_argument("--kind", choices=["orthogonal", "general"])
    common.add_argument("--eta")
    common.add_argument("--t-refine", dest="t_refine")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="perdl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"perdl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="synthetic benchmark")
    p.add_argument("--seeds", nargs="+")
    p.add_argument("--num-clients", dest="num_clients")
    p.add_argument("--dim")
    p.add_argument("--atoms-per-client", dest="atoms_per_client")
    p.add_argument("--samples-per-client", dest="samples_per_client")
    p.add_argument("--weak-clients", dest="weak_clients")
    p.add_argument("--weak-factor", dest="weak_factor")

    p = sub.add_parser("reconstruct", parents=[common], help="top-k reconstructions")
    p.add_argument("--scenario", choices=["imbalanced", "frames", "custom"])
    p.add_argument("--k")
    p.add_argument("--atoms")
    p.add_argument("--data", nargs="+")
    p.add_argument("--pool")
    p.add_argument("--labels")
    p.add_argument("--num-clients", dest="num_clients")
    p.add_argument("--per-client", dest="per_client")
    p.add_argument("--frames", nargs="+")
    p.add_argument("--frame-shape", dest="frame_shape")
    p.add_argument("--patch-height", dest="patch_height")
    p.add_argument("--patch-width", dest="patch_width")
    p.add_argument("--stride")
    p.add_argument("--channels", choices=["gray", "stack"])

    p = sub.add_parser("validate", parents=[common], help="incoherence / identifiability report")
    p.add_argument("--dicts", nargs="+")
    p.add_argument("--eps", nargs="+")

    p = sub.add_parser("match", parents=[common], help="global matching on dictionary files")
    p.add_argument("--dicts", nargs="+")
    p.add_argument("--dump-dag", dest="dump_dag")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.renormalize is not None:
        args.renormalize = args.renormalize == "on"
    fallback = "custom" if args.command == "reconstruct" else "synthetic"
    try:
        cfg = resolve_config(args, fallback)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"perdl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surface any runtime failure as exit 2
        log.debug("runtime failure", exc_info=True)
        print(f"perdl: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
