"""Command-line entry point: ``spinlimit <command> [--config FILE] [--out DIR]``.

Exit codes: 0 success, 1 failed verification or invariant, 2 configuration
error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import platform
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .bath import BathError, PVConvergenceError
from .classical import RNG_ID as KMC_RNG_ID
from .classical import (
    RateMismatchError,
    closed_form_model,
    detailed_balance_check,
    extract_rates,
    gillespie,
)
from .config import ConfigError, RunConfig, parse_config
from .dynamics import (
    DensityOperator,
    IntegrationError,
    evolve_master,
    initial_state,
    observables,
    run_trajectories,
    steady_state,
)
from .generator import StateError, assemble_bundle
from .lattice import LatticeError, ring
from .verification import run_checks

logger = logging.getLogger("spinlimit")

COMMANDS = ("verify", "rates", "evolve", "trajectories", "kmc", "steady")


class InvariantFailure(RuntimeError):
    """A computed quantity failed its check; maps to exit code 1."""


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def metadata(config: RunConfig, command: str, extra: dict | None = None) -> dict:
    meta = {
        "command": command,
        "config_hash": config.hash,
        "config": config.values,
        "versions": {
            "spinlimit": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "tolerances": {
            "integration": config["dynamics"]["tol"],
            "null_tol": config["bath"]["null_tol"],
        },
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    meta.update(extra or {})
    return meta


def write_output(out: Path, name: str, text: str, config: RunConfig, command: str, extra: dict | None = None) -> Path:
    """Write ``name`` and its ``name.meta.json`` sidecar atomically."""
    target = out / name
    atomic_write(target, text)
    meta = metadata(config, command, dict(extra or {}, file=name))
    atomic_write(out / f"{name}.meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return target


# ---------------------------------------------------------------------------
# commands


def cmd_verify(config: RunConfig, out: Path, args) -> int:
    bundle = assemble_bundle(config.graph(), config.bath())
    records = run_checks(bundle, config["verify"]["n_pairs"], config["verify"]["seed"])
    lines = [json.dumps(r.as_json(), sort_keys=True) for r in records]
    write_output(out, "verify.jsonl", "\n".join(lines) + "\n", config, "verify",
                 {"seed": config["verify"]["seed"], "rng": "numpy.random.default_rng(seed)"})
    for r in records:
        logger.info("%-22s residual %.3e  tol %.0e  %s", r.identity, r.residual, r.tolerance, "pass" if r.passed else "FAIL")
    return 0 if all(r.passed for r in records) else 1


def cmd_rates(config: RunConfig, out: Path, args) -> int:
    graph = config.graph()
    bath = config.bath()
    bundle = assemble_bundle(graph, bath)
    rows = []
    for t in bundle.terms:
        s = t.susceptibility
        rows.append([t.label, t.channel.sign_class.value, t.energy, s.gamma_minus, s.gamma_plus, s.minus.imag, s.plus.imag])
    header = ["channel", "sign_class", "energy", "gamma_minus", "gamma_plus", "lamb_minus", "lamb_plus"]
    write_output(out, "rates.csv", csv_text(header, rows), config, "rates")
    status = 0
    if args.classical:
        if graph.n_sites <= 10:
            model = extract_rates(bundle)
            verified = model.verified_residual
        else:
            model, verified = closed_form_model(graph, bath), None
        table = model.rate_table()
        header = ["site", "neighborhood", "center", "energy", "kind", "rate"]
        extra = {"verified_residual": verified, "blocked_classes": len(model.null_blocked())}
        if bath.mu == 0:
            extra["detailed_balance_violation"] = detailed_balance_check(model).max_violation
        write_output(out, "classical_rates.csv", csv_text(header, ([r[k] for k in header] for r in table)),
                     config, "rates --classical", extra)
    return status


def _initial_rho(config: RunConfig, n: int) -> np.ndarray:
    return DensityOperator.pure(initial_state(n, config["dynamics"]["initial"])).matrix


def cmd_evolve(config: RunConfig, out: Path, args) -> int:
    graph = config.graph()
    bundle = assemble_bundle(graph, config.bath())
    dyn = config["dynamics"]
    sol = evolve_master(bundle, _initial_rho(config, graph.n_sites), dyn["t_final"], dyn["tol"], n_grid=dyn["n_grid"])
    rows = []
    for name, op in observables(graph, dyn["observables"]):
        vals = sol.expectation(op.full(graph.n_sites))
        rows += [[t, name, float(v.real), 0.0] for t, v in zip(sol.times, vals)]
    rows.sort(key=lambda r: (r[0], dyn["observables"].index(r[1])))
    extra = {"n_steps": sol.n_steps, "max_trace_drift": sol.max_trace_drift, "min_eigenvalue": sol.min_eigenvalue}
    write_output(out, "evolve.csv", csv_text(["time", "observable", "mean", "stderr"], rows), config, "evolve", extra)
    return 0


def cmd_trajectories(config: RunConfig, out: Path, args) -> int:
    graph = config.graph()
    bundle = assemble_bundle(graph, config.bath())
    dyn, tr = config["dynamics"], config["trajectories"]
    obs = observables(graph, dyn["observables"])
    ens = run_trajectories(bundle, initial_state(graph.n_sites, dyn["initial"]), tr["n_traj"], tr["seed"],
                           dyn["t_final"], dyn["n_grid"], obs)
    rows = []
    for k, t in enumerate(ens.times):
        for name, _ in obs:
            rows.append([t, name, ens.means[name][k], ens.stderr[name][k]])
    extra = {"seed": tr["seed"], "rng": ens.rng, "n_traj": tr["n_traj"], "mean_jumps": float(ens.n_jumps.mean())}
    write_output(out, "trajectories.csv", csv_text(["time", "observable", "mean", "stderr"], rows),
                 config, "trajectories", extra)
    return 0


def cmd_kmc(config: RunConfig, out: Path, args) -> int:
    k = config["kmc"]
    lat = config["lattice"]
    if lat["topology"] == "ring":
        graph = ring(k["n_sites"], lat["coupling_j"])
    else:
        graph = config.graph()
    model = closed_form_model(graph, config.bath())
    res = gillespie(model, k["initial"], k["t_final"], k["seed"], k["n_grid"])
    rows = zip(res.times, res.magnetization, res.energy, res.n_events)
    extra = {"seed": k["seed"], "rng": KMC_RNG_ID, "absorbed_at": res.absorbed_at,
             "n_sites": graph.n_sites, "max_revalidation_drift": res.max_revalidation_drift}
    write_output(out, "kmc.csv", csv_text(["time", "magnetization", "energy", "n_events"], rows), config, "kmc", extra)
    return 0


def cmd_steady(config: RunConfig, out: Path, args) -> int:
    graph = config.graph()
    bundle = assemble_bundle(graph, config.bath())
    ss = steady_state(bundle)
    result = {"nullity": ss.nullity, "reducible": ss.reducible, "truncated": ss.truncated}
    if ss.state is not None:
        result["populations"] = [float(p) for p in np.diag(ss.state.matrix).real]
        result["min_eigenvalue"] = ss.state.min_eigenvalue()
        result["observables"] = {
            name: float(np.real(ss.state.expectation(op.full(graph.n_sites).toarray())))
            for name, op in observables(graph, config["dynamics"]["observables"])
        }
    write_output(out, "steady.json", json.dumps(result, indent=2, sort_keys=True) + "\n", config, "steady")
    return 0


HANDLERS = {
    "verify": cmd_verify,
    "rates": cmd_rates,
    "evolve": cmd_evolve,
    "trajectories": cmd_trajectories,
    "kmc": cmd_kmc,
    "steady": cmd_steady,
}


def _add_common(p: argparse.ArgumentParser, default) -> None:
    p.add_argument("--config", type=Path, default=default, help="TOML configuration file")
    p.add_argument("--out", type=Path, default=default, help="output directory (overrides output.dir)")
    p.add_argument("--seed", type=int, default=default, help="seed for every random stream (overrides the config)")
    p.add_argument("--quiet", action="store_true", default=default if default is not None else False,
                   help="suppress progress messages")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spinlimit", description="Stochastic-limit dynamics of Ising spin lattices.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _add_common(p, None)
    # accepted after the subcommand too; SUPPRESS keeps values given before it
    common = argparse.ArgumentParser(add_help=False)
    _add_common(common, argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp_ = sub.add_parser(name, parents=[common], help=f"run {name}")
        if name == "rates":
            sp_.add_argument("--classical", action="store_true", help="also dump the classical rate table")
    sub.add_parser("config", parents=[common], help="print the validated configuration with defaults")
    return p


def dispatch(command: str, config: RunConfig, out: Path, args) -> int:
    try:
        return HANDLERS[command](config, out, args)
    except (ConfigError, BathError, LatticeError) as exc:
        logger.error("configuration error: %s", exc)
        return 2
    except PVConvergenceError as exc:
        logger.error("principal-value integral failed: %s (residual %.3e)", exc, exc.residual)
        return 1
    except (IntegrationError, RateMismatchError, StateError, InvariantFailure) as exc:
        logger.error("%s", exc)
        return 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        config = parse_config(args.config).with_seed(args.seed)
        config.bath()
    except (ConfigError, BathError, LatticeError) as exc:
        logger.error("configuration error: %s", exc)
        return 2
    if args.command == "config":
        print(config.echo())
        return 0
    out = args.out if args.out is not None else Path(config["output"]["dir"])
    if not args.quiet:
        logger.info("config hash %s", config.hash)
    return dispatch(args.command, config, out, args)


if __name__ == "__main__":
    sys.exit(main())
