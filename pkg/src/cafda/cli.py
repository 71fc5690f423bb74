"""Command line: ``cafda {train,monitor,calibrate,simulate,report}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import archive, report, simgen
from .config import RunConfig, SimulationConfig, load_config, override
from .dataset import load_csv, write_csv
from .errors import CafdaError, ConfigError, DataError
from .famm import ModelSpec
from .mewma import ChartConfig, calibrate_h4, monitor_stream
from .pipeline import train
from .scores import day_scores

log = logging.getLogger("cafda")


def _floats(text):
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _global_flags(parser, suppress):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=d, help="TOML run configuration")
    parser.add_argument("--seed", type=int, default=d)
    parser.add_argument("--out", type=Path, default=d, help="output directory")
    parser.add_argument("--threads", type=int, default=d)
    parser.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cafda", description="Covariate-adjusted functional monitoring of daily profiles.")
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_)
        _global_flags(sp, suppress=True)
        return sp

    sp = cmd("train", "fit a model to Phase-I data and write the archive and report")
    sp.add_argument("--data", type=Path, help="Phase-I CSV (overrides [data] phase1)")
    sp.add_argument("--term", action="append", dest="terms", help="model term; repeat for several")
    sp.add_argument("--pve", type=float, dest="pve_threshold")
    sp.add_argument("--min-points", type=int)
    sp.add_argument("--model", type=Path, help="archive path (default OUT/model.json)")

    sp = cmd("monitor", "score Phase-II days and run the control chart")
    sp.add_argument("--model", type=Path, help="archive path (default OUT/model.json)")
    sp.add_argument("--data", type=Path, help="Phase-II CSV (overrides [data] phase2)")
    sp.add_argument("--lambda", type=float, dest="lam")
    sp.add_argument("--rho", type=int, help="leading components excluded from the chart")
    sp.add_argument("--h4", type=float, help="threshold; otherwise taken from the archive calibration")
    sp.add_argument("--method", choices=("blup", "integration"))

    sp = cmd("calibrate", "find h4 for a target in-control ARL and store it in the archive")
    sp.add_argument("--model", type=Path, help="archive to update (default OUT/model.json)")
    sp.add_argument("--dim", type=int, help="chart dimension without an archive")
    sp.add_argument("--lambda", type=float, dest="lam")
    sp.add_argument("--rho", type=int)
    sp.add_argument("--arl0", type=float, dest="target_arl")
    sp.add_argument("--reps", type=int, dest="calibration_reps")

    sp = cmd("simulate", "generate simulated data or run a simulation study")
    what = sp.add_mutually_exclusive_group(required=True)
    what.add_argument("--phase1", action="store_true", help="training days")
    what.add_argument("--phase2", action="store_true", help="monitoring stream, optionally shifted")
    what.add_argument("--recovery", action="store_true", help="repeated training, estimates vs truth")
    what.add_argument("--arl", action="store_true", help="out-of-control ARL table")
    sp.add_argument("--days", type=int, help="J for --phase1, stream length for --phase2")
    sp.add_argument("--component", type=int, default=1)
    sp.add_argument("--delta", type=float, default=0.0)
    sp.add_argument("--tau", type=int, default=1)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--lambdas", type=_floats)
    sp.add_argument("--deltas", type=_floats)
    sp.add_argument("--components", type=_ints)
    sp.add_argument("--std-deltas", type=_floats, default=(), help="extra standardized shifts")
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--missing", type=float, default=0.0, help="fraction of cells to delete")
    sp.add_argument("--model", type=Path, help="trained archive for --arl (default: train on fresh data)")

    sp = cmd("report", "write plot-ready CSVs for a trained archive")
    sp.add_argument("--model", type=Path, help="archive path (default OUT/model.json)")
    return p


def _setup_logging(verbosity):
    level = logging.WARNING - 10 * min(verbosity, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return override(cfg, seed=args.seed, out=args.out, threads=args.threads)


def _archive_path(args, cfg):
    return args.model if getattr(args, "model", None) else cfg.out / "model.json"


def cmd_train(args, cfg: RunConfig):
    cfg = override(cfg, phase1=args.data, terms=tuple(args.terms) if args.terms else None,
                   pve_threshold=args.pve_threshold, min_points=args.min_points)
    spec = cfg.model_spec()
    ds = load_csv(cfg.require("phase1"), cfg.columns or None)
    model = train(spec, ds, min_points=cfg.min_points)
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = _archive_path(args, cfg)
    archive.save_model(archive.ModelArchive(model), path)
    report.write_model_report(model, cfg.out)
    print(f"trained on {model.diagnostics['n_days']} days: R2={model.diagnostics['r2']:.4f}, "
          f"m={[e.m for e in model.eigensystems]}; archive {path}")


def _threshold(arch, lam, rho, h4):
    if h4 is not None:
        return h4
    try:
        return arch.threshold(lam, rho).h4
    except KeyError as exc:
        raise ConfigError(f"{exc.args[0]}; run `cafda calibrate` or pass --h4") from None


def cmd_monitor(args, cfg: RunConfig):
    cfg = override(cfg, phase2=args.data, lam=args.lam, rho=args.rho, method=args.method)
    arch = archive.load_model(_archive_path(args, cfg))
    model = arch.model
    rho = cfg.rho
    h4 = _threshold(arch, cfg.lam, rho, args.h4)
    ds = load_csv(cfg.require("phase2"), cfg.columns or None)
    cfg.out.mkdir(parents=True, exist_ok=True)
    if len(ds) == 0:
        log.warning("Phase-II file has no days; nothing to monitor")
    scored = []
    for day in ds:
        try:
            scored.append(day_scores(model, day, cfg.method, rho))
        except DataError as exc:
            log.warning("day %s skipped: %s", day.day_id, exc)
    eig = model.eigensystem.drop_leading(rho) if rho else model.eigensystem
    chart = ChartConfig(cfg.lam, eig.eigenvalues, h4)
    trace = monitor_stream(chart, scored)
    trace.write_csv(cfg.out / "chart.csv")
    report.write_scores(scored, cfg.out / "phase2_scores.csv")
    alarms = trace.alarm_days
    with (cfg.out / "alarms.log").open("w", encoding="utf-8") as fh:
        for g, d, t2 in zip(trace.g[trace.alarmed], alarms, trace.t2[trace.alarmed]):
            fh.write(f"g={int(g)} day={d.isoformat() if hasattr(d, 'isoformat') else d} T2={float(t2)!r}\n")
    first = trace.run_length
    print(f"monitored {len(scored)} of {len(ds)} days with lambda={cfg.lam}, h4={h4:.4f}: "
          f"{len(alarms)} alarm(s)" + (f", first at g={first}" if first else ""))


def cmd_calibrate(args, cfg: RunConfig):
    cfg = override(cfg, lam=args.lam, rho=args.rho, target_arl=args.target_arl,
                   calibration_reps=args.calibration_reps)
    if args.dim is not None:
        cal = calibrate_h4(args.dim, cfg.lam, cfg.target_arl, cfg.calibration_reps, cfg.seed, cfg.threads)
        print(json.dumps(cal.to_dict()))
        return
    path = _archive_path(args, cfg)
    arch = archive.load_model(path)
    dim = arch.model.m - cfg.rho
    if dim < 1:
        raise ConfigError(f"cannot drop {cfg.rho} of {arch.model.m} components")
    cal = calibrate_h4(dim, cfg.lam, cfg.target_arl, cfg.calibration_reps, cfg.seed, cfg.threads)
    archive.save_model(arch.with_calibration(cfg.rho, cal), path)
    print(json.dumps({"rho": cfg.rho, **cal.to_dict()}))


def _dgp(cfg: RunConfig, J=None):
    sim = cfg.simulation
    return simgen.DgpConfig(J=J or sim.J, sigma2=sim.sigma2, seed=cfg.seed)


def cmd_simulate(args, cfg: RunConfig):
    sim: SimulationConfig = cfg.simulation
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    if args.phase1:
        ds = simgen.generate_phase1(_dgp(cfg, args.days))
        if args.missing:
            ds = simgen.delete_cells(ds, args.missing, seed=cfg.seed)
        write_csv(ds, out / "phase1.csv")
        print(f"wrote {len(ds)} days to {out / 'phase1.csv'}")
    elif args.phase2:
        dgp = _dgp(cfg)
        shift = simgen.ShiftSpec(args.component, args.delta, args.tau) if args.delta else None
        ds = simgen.generate_phase2(dgp, args.days or sim.days, shift, seed=cfg.seed + 1_000_003)
        if args.missing:
            ds = simgen.delete_cells(ds, args.missing, seed=cfg.seed)
        write_csv(ds, out / "phase2.csv")
        print(f"wrote {len(ds)} days to {out / 'phase2.csv'}")
    elif args.recovery:
        dgp = _dgp(cfg)
        rep = simgen.recovery_study(dgp, reps=args.reps or sim.recovery_reps, missing=args.missing)
        summ = rep.summary(np.asarray(dgp.eigenvalues), dgp.sigma2)
        (out / "recovery.json").write_text(json.dumps(summ, indent=1) + "\n", encoding="utf-8")
        rep.write_curves(out / "recovery_curves.csv")
        print(json.dumps(summ))
    else:
        dgp = _dgp(cfg)
        if args.model:
            model = archive.load_model(args.model).model
        else:
            model = train(ModelSpec(simgen.BASIC_SPEC), simgen.generate_phase1(dgp))
        table = simgen.arl_experiment(
            model, dgp, lambdas=args.lambdas or sim.lambdas, components=args.components or sim.components,
            deltas=args.deltas or sim.deltas, std_deltas=args.std_deltas, target_arl=sim.target_arl,
            reps=args.reps or sim.reps, calibration_reps=cfg.calibration_reps, seed=cfg.seed,
            max_steps=args.max_steps or sim.max_steps, threads=cfg.threads,
        )
        table.write_csv(out / "arl.csv")
        print(f"wrote {len(table.rows)} cells to {out / 'arl.csv'}")


def cmd_report(args, cfg: RunConfig):
    arch = archive.load_model(_archive_path(args, cfg))
    report.write_model_report(arch.model, cfg.out)
    print(json.dumps(report.summary(arch.model)))


COMMANDS = {"train": cmd_train, "monitor": cmd_monitor, "calibrate": cmd_calibrate,
            "simulate": cmd_simulate, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        cfg = _run_config(args)
        COMMANDS[args.command](args, cfg)
    except CafdaError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except FileNotFoundError as exc:
        log.error("file not found: %s", exc.filename)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
