"""Command line entry point.

Subcommands: simulate | laplace | control | converge | verify | moments.
Each takes --config PATH (JSON mirroring ExperimentConfig) and --out DIR;
--seed overrides the config seed, --jobs bounds the worker pool.
"""

import argparse
import dataclasses
import json
import os
import sys

from .fields import save_field
from .harness import (ExperimentConfig, load_config, run_convergence_study,
                      run_moment_study, run_property_suite)
from .laplace import estimate_laplace, write_ndjson
from .simulate import simulate
from .control import minimize_value


def _prepare(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def _write_summary(out, payload):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(payload, fh, indent=2)


def cmd_simulate(args):
    config = _prepare(args)
    traj = simulate(config.initial_field(), config.physical_params(),
                    config.forcing_spec(), config.noise_spec(),
                    config.time_grid(), seed=config.seed)
    os.makedirs(args.out, exist_ok=True)
    traj.to_csv(os.path.join(args.out, "trajectory.csv"))
    save_field(traj.fields[-1], os.path.join(args.out, "final_state.bin"))
    _write_summary(args.out, {
        "name": config.name, "steps": config.time_grid().steps,
        "final_norm_H": float(traj.norms["H"][-1]),
        "final_norm_V": float(traj.norms["V"][-1])})
    return 0


def cmd_laplace(args):
    config = _prepare(args)
    n = float(config.n_list[-1] if args.n is None else args.n)
    est = estimate_laplace(
        config.initial_field(), config.build_observable(), n,
        config.samples_for(n), config.physical_params(),
        config.forcing_spec(), config.noise_spec(), config.time_grid(),
        seed=config.seed)
    os.makedirs(args.out, exist_ok=True)
    write_ndjson([est.to_record(config.name)],
                 os.path.join(args.out, "laplace.ndjson"))
    _write_summary(args.out, est.to_record(config.name))
    return 0


def cmd_control(args):
    config = _prepare(args)
    result = minimize_value(
        config.initial_field(), config.build_observable(),
        config.physical_params(), config.forcing_spec(), config.noise_spec(),
        config.time_grid(), config.optimizer_options(), seed=config.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "value.ndjson"), "w") as fh:
        fh.write(result.to_ndjson_line() + "\n")
    slot_dir = os.path.join(args.out, "optimal_control")
    os.makedirs(slot_dir, exist_ok=True)
    for j, fld in enumerate(result.control.fields()):
        save_field(fld, os.path.join(slot_dir, f"u_{j:05d}.bin"))
    _write_summary(args.out, result.to_record())
    return 0


def cmd_converge(args):
    config = _prepare(args)
    report = run_convergence_study(config, jobs=args.jobs, out_dir=args.out)
    print(json.dumps(report.to_summary(), indent=2))
    return 0 if report.passed else 1


def cmd_verify(args):
    config = _prepare(args)
    report = run_property_suite(config, out_dir=args.out)
    for row in report.rows:
        status = "pass" if row["passed"] else "FAIL"
        print(f"[{status}] {row['check']}: worst {row['worst']:.3e} "
              f"(tol {row['tol']:.1e}) {row['detail']}")
    return 0 if report.passed else 1


def cmd_moments(args):
    config = _prepare(args)
    summary = run_moment_study(config, out_dir=args.out)
    print(json.dumps(summary, indent=2))
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="cbflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {"simulate": cmd_simulate, "laplace": cmd_laplace,
                "control": cmd_control, "converge": cmd_converge,
                "verify": cmd_verify, "moments": cmd_moments}
    for name, handler in handlers.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--out", default="out")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=1)
        if name == "laplace":
            p.add_argument("--n", type=float, default=None)
        p.set_defaults(handler=handler)
    args = parser.parse_args(argv)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
