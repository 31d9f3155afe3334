"""Command line entry points.

Exit codes: 0 success, 2 configuration error, 3 solver error, 4 I/O error.
"""

import argparse
import sys

import numpy as np

from . import harness
from .errors import ConfigurationError, RasterIOError, SolverError, ValidationError


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cemflow",
        description="Multiscale solver experiments for nonlinear compressible "
                    "flow in heterogeneous porous media.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config end to end")
    p_run.add_argument("config", help="YAML config path or bundled preset name")
    p_run.add_argument("--output", default=None, help="output root directory")

    p_norms = sub.add_parser("norms", help="recompute error norms from snapshots")
    p_norms.add_argument("config")
    p_norms.add_argument("fine_dir")
    p_norms.add_argument("coarse_dir")

    p_exp = sub.add_parser("export", help="export a saved nodal field")
    p_exp.add_argument("field", help="npy file with one value per fine node")
    p_exp.add_argument("config", help="config describing the grid")
    p_exp.add_argument("out")
    p_exp.add_argument("--format", choices=["legacy-vtk", "csv"],
                       default="legacy-vtk")

    p_enr = sub.add_parser("enrich", help="run with indicator-driven enrichment")
    p_enr.add_argument("config")
    p_enr.add_argument("--rounds", type=int, default=1)
    p_enr.add_argument("--theta", type=float, default=0.3)
    p_enr.add_argument("--output", default=None)

    sub.add_parser("presets", help="list bundled experiment configs")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            report = harness.run_experiment(args.config, output_dir=args.output)
            print(report.to_json(), end="")
        elif args.command == "norms":
            eps0, eps1, eps1e = harness.norms_from_directories(
                args.config, args.fine_dir, args.coarse_dir)
            print("epsilon0 = %.6e" % eps0)
            print("epsilon1 = %.6e" % eps1)
            print("epsilon1_energy = %.6e" % eps1e)
        elif args.command == "export":
            config = harness.load_config(args.config)
            grid, _ = config.build_grid()
            values = np.load(args.field)
            harness.export_field(values, grid, args.out, args.format)
            print(args.out)
        elif args.command == "enrich":
            config = harness.load_config(args.config)
            config.data["method"]["enrichment"] = {
                "theta": args.theta, "rounds": args.rounds}
            report = harness.run_experiment(config, output_dir=args.output)
            print(report.to_json(), end="")
        elif args.command == "presets":
            for name in harness.list_presets():
                print(name)
    except (ConfigurationError, ValidationError) as exc:
        print("configuration error: %s" % exc, file=sys.stderr)
        return 2
    except SolverError as exc:
        print("solver error: %s" % exc, file=sys.stderr)
        return 3
    except (RasterIOError, OSError) as exc:
        print("I/O error: %s" % exc, file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
