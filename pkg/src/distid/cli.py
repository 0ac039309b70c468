"""Command-line drivers: ``smallscale``, ``feeder`` and ``identify``.

Settings resolve as built-in defaults, then a ``--config`` key=value file,
then explicit flags. Exit codes: 0 success, 1 configuration error,
2 numerical divergence, 3 privacy-audit failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .datamodel import IoDataset, Partition, split_views
from .graph import is_connected
from .netsim import PrivacyTap, WireLog, privacy_audit
from .oracle import generate_smallscale
from .powerflow import (SCENARIOS, ControllerGains, FeederSpecError, ScenarioConfig, ScenarioError,
                        default_feeder, format_feeder_spec, load_feeder, run_scenario)
from .solver import MODES, AdamConfig, CertificateConfig, CertificateWarning, DivergenceError, InitSpec, run
from .textio import FormatError, dump_instance, read_config, read_dataset, read_graph, read_matrix, \
    read_partition, write_matrix

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_AUDIT = 0, 1, 2, 3

logger = logging.getLogger("distid")

DEFAULTS = {
    "seed": 0, "iters": 1000, "alpha": 1e-3, "beta1": 0.9, "beta2": 0.95, "epsilon": 1e-8,
    "mu": 1e-7, "mode": None, "init": "random", "graph": "ring", "out": "out", "record_every": 1,
    "wire_log": False, "dump_payloads": False,
    # feeder
    "feeder": None, "scenario": "all", "horizon": 120, "window": 140, "ident_iters": 200_000,
    "online_iters": 2000, "online_every": 1, "gamma": 20.0, "eta": 0.05, "v_min": 0.95, "v_max": 1.05,
    # identify
    "dataset": None, "partition": None, "astar": None,
}
_TYPES = {k: type(v) for k, v in DEFAULTS.items() if v is not None}


class ConfigError(ValueError):
    pass


def _coerce(key: str, value):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    typ = _TYPES.get(key, str)
    if not isinstance(value, str):
        return value
    if typ is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        return typ(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {typ.__name__}") from None


def resolve(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        if not Path(args.config).is_file():
            raise ConfigError(f"config file not found: {args.config}")
        for k, v in read_config(args.config).items():
            cfg[k.replace("-", "_")] = _coerce(k.replace("-", "_"), v)
    for k, v in vars(args).items():
        if k in DEFAULTS and v is not None:
            cfg[k] = v
    cfg["command"] = args.command
    return cfg


def _solver(cfg) -> tuple[AdamConfig, CertificateConfig]:
    return (AdamConfig(cfg["alpha"], cfg["beta1"], cfg["beta2"], cfg["epsilon"], cfg["iters"]),
            CertificateConfig(cfg["mu"]))


def _write_manifest(out: Path, cfg: dict, extra: dict | None = None) -> None:
    manifest = {
        "config": cfg,
        "seed": cfg["seed"],
        "versions": {"distid": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "argv": sys.argv[1:],
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _identify_run(ds: IoDataset, part: Partition, graph, cfg, mode, reference, out: Path, tag: str):
    """One solver run with wire logging, audit and file output; returns ``(trace, report)``."""
    solver, cert = _solver(cfg)
    views = split_views(ds, part)
    init = InitSpec.zeros(part) if cfg["init"] == "zeros" else None
    tap = PrivacyTap(ds, part)
    log = WireLog(retain_payloads=cfg["dump_payloads"], tap=tap)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CertificateWarning)
        trace = run(views, part, graph, solver, mode, init, reference_A=reference, seed=cfg["seed"],
                    certificate=cert, log=log, record_every=cfg["record_every"])
    if not trace.certified:
        logger.warning("%s: alpha=%g fails the step-size certificate (lambda_max=%.6g)", tag, solver.alpha,
                       trace.lambda_max)
    report = privacy_audit(log, part, ds, graph)
    trace.write_csv(out / f"trace_{tag}.csv")
    (out / f"audit_{tag}.txt").write_text(report.summary() + "\n")
    if cfg["wire_log"]:
        log.write_csv(out / f"wirelog_{tag}.csv")
    if cfg["dump_payloads"]:
        log.dump_payloads(out / f"payloads_{tag}.bin")
    return trace, report


def cmd_smallscale(cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    ds, part, ref = generate_smallscale(cfg["seed"])
    graph = read_graph(cfg["graph"], part.n_agents)
    dump_instance(out / "instance", ds, part, ref)
    modes = [cfg["mode"]] if cfg["mode"] else ["baseline", "adam"]
    summary = {}
    status = EXIT_OK
    for mode in modes:
        trace, report = _identify_run(ds, part, graph, cfg, mode, ref.A_star, out, mode)
        summary[mode] = {"err_max": trace.final.err_max, "audit": report.passed, "z_digest": trace.z_digest}
        print(f"{mode}: err_max={trace.final.err_max:.3e} after {trace.final.k} iterations; "
              f"{report.summary().splitlines()[0]}")
        if not report.passed:
            status = EXIT_AUDIT
    _write_manifest(out, cfg, {"results": summary})
    return status


def cmd_feeder(cfg: dict) -> int:
    out = Path(cfg["out"])
    if cfg["feeder"]:
        if not Path(cfg["feeder"]).is_file():
            raise ConfigError(f"feeder spec not found: {cfg['feeder']}")
        feeder = load_feeder(cfg["feeder"])
    else:
        feeder = default_feeder()
    if not feeder.pv:
        raise ConfigError("feeder has no PV buses to act as agents")
    out.mkdir(parents=True, exist_ok=True)
    (out / "feeder.txt").write_text(format_feeder_spec(feeder))
    scenarios = SCENARIOS if cfg["scenario"] == "all" else [cfg["scenario"]]
    solver, _ = _solver(cfg)
    summary = {}
    status = EXIT_OK
    for sc in scenarios:
        sc_cfg = ScenarioConfig(scenario=sc, horizon=cfg["horizon"], window=cfg["window"],
                                band=(cfg["v_min"], cfg["v_max"]),
                                gains=ControllerGains(cfg["gamma"], cfg["eta"]),
                                ident_iters=cfg["ident_iters"], ident_mode=cfg["mode"] or "adam",
                                online_iters=cfg["online_iters"], online_every=cfg["online_every"],
                                seed=cfg["seed"], graph=cfg["graph"])
        trace = run_scenario(feeder, sc_cfg, solver=solver)
        trace.write_csv(out / f"trace_{sc}.csv", feeder)
        res = {"post_settle_violation": trace.post_settle_violation(),
               "steps_with_violation": int((trace.violation() > 0).sum())}
        for key in ("offline_prediction_error", "offline_err_max", "online_audits_passed"):
            if key in trace.extra:
                res[key] = trace.extra[key]
        if "offline_audit" in trace.extra:
            res["offline_audit"] = trace.extra["offline_audit"].passed
            (out / f"audit_{sc}.txt").write_text(trace.extra["offline_audit"].summary() + "\n")
            if not trace.extra["offline_audit"].passed:
                status = EXIT_AUDIT
        if trace.extra.get("online_audits_passed") is False:
            status = EXIT_AUDIT
        summary[sc] = res
        print(f"{sc}: " + ", ".join(f"{k}={v:.3e}" if isinstance(v, float) else f"{k}={v}" for k, v in res.items()))
    _write_manifest(out, cfg, {"results": summary})
    return status


def cmd_identify(cfg: dict) -> int:
    for key in ("dataset", "partition"):
        if not cfg[key]:
            raise ConfigError(f"--{key} is required")
        if not Path(cfg[key]).is_file():
            raise ConfigError(f"{key} file not found: {cfg[key]}")
    ds = read_dataset(cfg["dataset"])
    part = read_partition(cfg["partition"])
    if (part.m, part.n) != (ds.m, ds.n):
        raise ConfigError(f"partition covers m={part.m}, n={part.n} but the dataset has m={ds.m}, n={ds.n}")
    graph = read_graph(cfg["graph"], part.n_agents)
    if not is_connected(graph):
        raise ConfigError("communication graph is disconnected: the optimality conditions behind this "
                          "method require a connected graph, refusing to iterate")
    reference = read_matrix(cfg["astar"]) if cfg["astar"] else None
    if reference is not None and reference.shape != (ds.n, ds.m):
        raise ConfigError(f"reference matrix has shape {reference.shape}, expected {(ds.n, ds.m)}")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    mode = cfg["mode"] or "adam"
    trace, report = _identify_run(ds, part, graph, cfg, mode, reference, out, mode)
    for i, s in enumerate(trace.states, 1):
        write_matrix(out / f"agent_{i}.txt", s.x.reshape(part.n, -1, order="F"))
    print(f"{mode}: {trace.final.k} iterations, z_norm={trace.final.z_norm:.3e}, "
          f"r_stat={trace.final.r_stat:.3e}, r_cons={trace.final.r_cons:.3e}; {report.summary().splitlines()[0]}")
    _write_manifest(out, cfg, {"results": {"err_max": trace.final.err_max, "audit": report.passed}})
    return EXIT_OK if report.passed else EXIT_AUDIT


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    g = shared.add_argument_group("solver")
    g.add_argument("--config", help="key=value file; flags given here override it")
    g.add_argument("--seed", type=int)
    g.add_argument("--iters", type=int)
    g.add_argument("--alpha", type=float)
    g.add_argument("--beta1", type=float)
    g.add_argument("--beta2", type=float)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--mu", type=float)
    g.add_argument("--mode", choices=MODES)
    g.add_argument("--init", choices=("random", "zeros"), help="initial x blocks (zeros exposes -Y on the wire)")
    g.add_argument("--graph", help="ring, path, complete or an edge-list file")
    g.add_argument("--out", help="output directory")
    g.add_argument("--record-every", type=int, dest="record_every")
    g.add_argument("--wire-log", action="store_const", const=True, dest="wire_log",
                   help="write the per-message wire log CSV")
    g.add_argument("--dump-payloads", action="store_const", const=True, dest="dump_payloads",
                   help="keep every payload in memory and write a binary sidecar")
    g.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="distid", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("smallscale", parents=[shared], help="random networked system, baseline vs adam")

    f = sub.add_parser("feeder", parents=[shared], help="voltage-regulation scenarios on a radial feeder")
    f.add_argument("--feeder", help="feeder spec file (default: built-in 36-bus feeder)")
    f.add_argument("--scenario", choices=(*SCENARIOS, "all"))
    f.add_argument("--horizon", type=int)
    f.add_argument("--window", type=int)
    f.add_argument("--ident-iters", type=int, dest="ident_iters")
    f.add_argument("--online-iters", type=int, dest="online_iters")
    f.add_argument("--online-every", type=int, dest="online_every")
    f.add_argument("--gamma", type=float)
    f.add_argument("--eta", type=float)

    i = sub.add_parser("identify", parents=[shared], help="identify a model from dataset files")
    i.add_argument("--dataset")
    i.add_argument("--partition")
    i.add_argument("--astar", help="optional reference matrix for the error trace")
    return p


COMMANDS = {"smallscale": cmd_smallscale, "feeder": cmd_feeder, "identify": cmd_identify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        if cfg["mode"] is not None and cfg["mode"] not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if cfg["init"] not in ("random", "zeros"):
            raise ConfigError("init must be 'random' or 'zeros'")
        return COMMANDS[args.command](cfg)
    except (ConfigError, FormatError, FeederSpecError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, ScenarioError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
