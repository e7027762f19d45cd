"""Command line front end.

Four subcommands, each driven by one YAML experiment file:

    ergoflow simulate        free trajectories, energy records, checkpoints
    ergoflow couple          shadow-pair ensembles under budgeted control
    ergoflow ergodic         time-average agreement plus envelope tails
    ergoflow inviscid-limit  shared-noise discrepancy sweep in eps

Every run writes into one output directory: config.resolved.yaml (the fully
defaulted config that reproduces the run), records.ndjson, summary.csv, any
checkpoints, and manifest.json last. Reruns are byte-identical for a fixed
config except manifest.json, which carries the wall time. --from-manifest
reruns a recorded invocation from its resolved config.

Exit codes: 0 success, 2 configuration or usage error, 3 divergence (a
trajectory lost finiteness, or an ensemble exceeded its diverged budget).
"""

import argparse
import csv
import dataclasses
import json
import os
import sys
import time

import numpy as np
import yaml

from . import __version__
from .config import apply_overrides, resolve_config
from .coupling import ic_stream, run_ensemble
from .ergodic import ergodic_agreement, inviscid_limit_study, \
    martingale_tail_check
from .errors import ConfigError, DivergedTrajectory, InsufficientData
from .forcing import NoisePath
from .stepping import integrate, write_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

RESOLVED_NAME = "config.resolved.yaml"
MANIFEST_NAME = "manifest.json"
RECORDS_NAME = "records.ndjson"
SUMMARY_NAME = "summary.csv"
OUTPUT_ROOT_ENV = "ERGOFLOW_OUTPUT_ROOT"

_COMMANDS = {
    "simulate": "free trajectories with energy records and checkpoints",
    "couple": "shadow-pair ensembles under budgeted feedback control",
    "ergodic": "time-average agreement between starts, envelope tails",
    "inviscid-limit": "shared-noise discrepancy sweep in the viscosity knob",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ergoflow",
        description="stochastically forced periodic-box experiments")
    parser.add_argument("--version", action="version",
                        version=f"ergoflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, blurb in _COMMANDS.items():
        sp = sub.add_parser(name, help=blurb)
        sp.add_argument("--config", metavar="FILE",
                        help="YAML experiment file")
        sp.add_argument("--from-manifest", metavar="FILE",
                        dest="from_manifest",
                        help="rerun the invocation a manifest.json records")
        sp.add_argument("--set", dest="overrides", action="append",
                        metavar="KEY=VALUE", default=[],
                        help="override a config entry by dotted path")
        sp.add_argument("--seed", type=int, help="override ensemble.seed")
        sp.add_argument("--replicas", type=int,
                        help="override ensemble.replicas")
        sp.add_argument("--output", metavar="DIR",
                        help="output directory (default: config, then "
                             f"${OUTPUT_ROOT_ENV}/<command>, then "
                             "runs/<command>)")
    return parser


def _load_config(args):
    if args.from_manifest:
        try:
            with open(args.from_manifest) as fh:
                manifest = json.load(fh)
        except (OSError, ValueError) as err:
            raise ConfigError(f"cannot read manifest: {err}")
        recorded = manifest.get("command")
        if recorded != args.command:
            raise ConfigError(f"manifest records a {recorded!r} run, "
                              f"not {args.command!r}")
        base = os.path.dirname(os.path.abspath(args.from_manifest))
        path = os.path.join(base, manifest.get("config_file", RESOLVED_NAME))
    elif args.config:
        path = args.config
    else:
        raise ConfigError("--config or --from-manifest is required")
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"config is not valid YAML: {err}")
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    apply_overrides(raw, args.overrides)
    if args.seed is not None:
        apply_overrides(raw, [f"ensemble.seed={args.seed}"])
    if args.replicas is not None:
        apply_overrides(raw, [f"ensemble.replicas={args.replicas}"])
    return resolve_config(raw)


def _output_dir(args, cfg) -> str:
    if args.output:
        out = args.output
    elif cfg.resolved["output"]["directory"]:
        out = cfg.resolved["output"]["directory"]
    else:
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        out = os.path.join(root, args.command)
    os.makedirs(out, exist_ok=True)
    return out


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return None if not np.isfinite(value) else value
    return value


def _write_records(out_dir, rows, formats):
    if "ndjson" not in formats:
        return
    with open(os.path.join(out_dir, RECORDS_NAME), "w") as fh:
        for row in rows:
            fh.write(json.dumps(_jsonable(row), sort_keys=True))
            fh.write("\n")


def _write_summary(out_dir, fieldnames, rows, formats):
    if "csv" not in formats:
        return
    with open(os.path.join(out_dir, SUMMARY_NAME), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(_jsonable(row))


def _write_manifest(out_dir, command, cfg, result, wall_time):
    outputs = []
    for dirpath, _, names in os.walk(out_dir):
        for name in names:
            rel = os.path.relpath(os.path.join(dirpath, name), out_dir)
            if rel != MANIFEST_NAME:
                outputs.append(rel.replace(os.sep, "/"))
    manifest = {
        "schema_version": 1,
        "package": "ergoflow",
        "package_version": __version__,
        "command": command,
        "config_file": RESOLVED_NAME,
        "config_sha256": cfg.sha256(),
        "seed": cfg.seed,
        "replicas": cfg.replicas,
        "outputs": sorted(outputs),
        "result": _jsonable(result),
        "wall_time_s": wall_time,
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- runners -----------------------------------------------------------------


def _run_simulate(cfg, out_dir):
    grid = cfg.build_grid()
    model = cfg.build_model()
    forcing = cfg.build_forcing(grid)
    scfg = cfg.build_stepper()
    draw = cfg.initial_sampler(grid)
    formats = cfg.resolved["output"]["formats"]
    ck_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ck_dir, exist_ok=True)

    rows, summary = [], []
    for r in range(cfg.replicas):
        path = NoisePath(seed=cfg.seed, replica_id=r, dt=scfg.dt,
                         dimension=forcing.dimension)
        traj = integrate(model, draw(ic_stream(cfg.seed, r)), forcing, scfg,
                         path, record_states=True)
        for i, t in enumerate(traj.times):
            row = {"replica": r, "t": float(t)}
            row.update({k: float(v[i]) for k, v in traj.energy.items()})
            rows.append(row)
        write_checkpoint(os.path.join(ck_dir, f"replica_{r:04d}_final.ergc"),
                         traj.final_state, traj.final_time)
        final = {"replica": r, "t_final": traj.final_time}
        final.update({k: float(v[-1]) for k, v in traj.energy.items()})
        summary.append(final)

    _write_records(out_dir, rows, formats)
    fields = ["replica", "t_final"] + sorted(
        k for k in summary[0] if k not in ("replica", "t_final"))
    _write_summary(out_dir, fields, summary, formats)
    print(f"simulate: {cfg.replicas} trajectory(s) to t = "
          f"{scfg.t_end:g}, {len(rows)} checkpoint records -> {out_dir}")
    return {"n_records": len(rows), "t_end": scfg.t_end}, EXIT_OK


def _run_couple(cfg, out_dir):
    control = cfg.build_control()
    if control is None:
        raise ConfigError("couple needs a control block")
    grid = cfg.build_grid()
    model = cfg.build_model()
    forcing = cfg.build_forcing(grid)
    scfg = cfg.build_stepper()
    ens = cfg.block("ensemble")
    formats = cfg.resolved["output"]["formats"]

    summary = run_ensemble(model, forcing, scfg, control,
                           cfg.pair_sampler(grid), cfg.replicas, cfg.seed,
                           success_factor=ens["success_factor"],
                           envelope_radius=ens["envelope_radius"],
                           record_rho=True)

    rows = []
    for rec in summary.per_replica:
        if rec["diverged"]:
            continue
        for t, rho, cost in zip(rec["times"], rec["rho"], rec["costs"]):
            rows.append({"replica": rec["replica"], "t": float(t),
                         "rho": float(rho), "cost": float(cost)})
    _write_records(out_dir, rows, formats)

    fields = ["replica", "success", "tau_hit", "diverged", "rate", "cost",
              "rho_first", "rho_last", "envelope_sup", "last_finite_time"]
    table = [{k: rec.get(k) for k in fields} for rec in summary.per_replica]
    _write_summary(out_dir, fields, table, formats)

    lo, hi = summary.success_interval
    fraction = len(summary.diverged) / summary.n_replicas
    print(f"couple: {summary.n_replicas} replicas, "
          f"success rate {summary.success_rate:.3f} "
          f"(95% CI {lo:.3f}-{hi:.3f}), "
          f"budget hits {summary.tau_hit_count}, "
          f"diverged {len(summary.diverged)}")
    result = {"success_rate": summary.success_rate,
              "success_interval": [lo, hi],
              "tau_hit_count": summary.tau_hit_count,
              "diverged": summary.diverged,
              "n_replicas": summary.n_replicas}
    code = EXIT_OK
    if fraction > ens["max_diverged_fraction"]:
        print(f"error: diverged fraction {fraction:.3f} exceeds "
              f"ensemble.max_diverged_fraction = "
              f"{ens['max_diverged_fraction']:g}", file=sys.stderr)
        code = EXIT_DIVERGED
    return result, code


def _run_ergodic(cfg, out_dir):
    if "ergodic" not in cfg.resolved:
        raise ConfigError("ergodic runs need an ergodic block")
    erg = cfg.block("ergodic")
    grid = cfg.build_grid()
    model = cfg.build_model()
    forcing = cfg.build_forcing(grid)
    scfg = cfg.build_stepper()
    formats = cfg.resolved["output"]["formats"]
    observables = cfg.build_observables("ergodic")

    u0_a, u0_b = cfg.pair_sampler(grid)(ic_stream(cfg.seed, 0))
    report = ergodic_agreement(model, forcing, scfg, u0_a, u0_b, observables,
                               erg["sample_period"], burn_in=erg["burn_in"],
                               seed=cfg.seed, replicas=(0, 1))

    rows = [dict(kind="agreement", **row) for row in report.table()]
    fields = ["observable", "mean_a", "mean_b", "se_a", "se_b",
              "discrepancy", "combined_se", "agrees"]
    result = {"all_agree": report.all_agree, "horizon": report.horizon}

    if erg["tail_replicas"] > 0:
        tails = martingale_tail_check(model, forcing, scfg, u0_a,
                                      erg["tail_replicas"], cfg.seed,
                                      r_grid=tuple(erg["tail_r_grid"]))
        for row in tails.table():
            rows.append(dict(kind="tail", gamma=tails.gamma, **row))
        result["tail_gamma"] = tails.gamma
        result["tail_flagged"] = tails.any_flagged

    _write_records(out_dir, rows, formats)
    _write_summary(out_dir, fields, report.table(), formats)
    verdict = "agree" if report.all_agree else "DISAGREE"
    print(f"ergodic: {len(report.rows)} observables {verdict} over horizon "
          f"{report.horizon:g} (3 combined standard errors)")
    return result, EXIT_OK


def _run_inviscid(cfg, out_dir):
    if "inviscid" not in cfg.resolved:
        raise ConfigError("inviscid-limit runs need an inviscid block")
    inv = cfg.block("inviscid")
    grid = cfg.build_grid()
    model = cfg.build_model()
    forcing = cfg.build_forcing(grid)
    scfg = cfg.build_stepper()
    formats = cfg.resolved["output"]["formats"]
    observables = cfg.build_observables("inviscid")

    avg_config = None
    if inv["avg_t_end"] is not None:
        avg_config = dataclasses.replace(scfg, t_end=inv["avg_t_end"])
    report = inviscid_limit_study(model, forcing, scfg, inv["eps"],
                                  cfg.replicas, cfg.seed,
                                  cfg.initial_sampler(grid),
                                  observables=observables,
                                  avg_config=avg_config,
                                  avg_sample_period=inv["avg_sample_period"],
                                  burn_in=inv["burn_in"])

    rows = [dict(kind="pair", **row) for row in report.pair_table()]
    rows += [dict(kind="observable", **row) for row in report.observable_rows]
    _write_records(out_dir, rows, formats)
    _write_summary(out_dir, ["eps", "discrepancy", "se", "fitted_order"],
                   report.pair_table(), formats)
    print(f"inviscid-limit: {len(report.eps)} eps values, "
          f"{report.n_replicas} replicas, fitted order "
          f"{report.fitted_order:.3f} at t = {report.t_eval:g}")
    return {"fitted_order": report.fitted_order,
            "t_eval": report.t_eval}, EXIT_OK


_RUNNERS = {
    "simulate": _run_simulate,
    "couple": _run_couple,
    "ergodic": _run_ergodic,
    "inviscid-limit": _run_inviscid,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        out_dir = _output_dir(args, cfg)
        with open(os.path.join(out_dir, RESOLVED_NAME), "w") as fh:
            fh.write(cfg.serialize())
        t0 = time.perf_counter()
        result, code = _RUNNERS[args.command](cfg, out_dir)
        _write_manifest(out_dir, args.command, cfg, result,
                        time.perf_counter() - t0)
        return code
    except (ConfigError, InsufficientData, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedTrajectory as err:
        print(f"error: trajectory diverged ({err})", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
