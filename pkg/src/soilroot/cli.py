"""Command line interface.

Subcommands:

* ``simulate`` — run a growth/flow scenario from a TOML config file.
* ``converge`` — run the manufactured convergence study and report errors
  and empirical orders.
* ``mesh`` — build the soil mesh of a config file and write it as VTU.

Exit codes: 0 on success, 2 on configuration errors, 3 on solver failure.
"""

import argparse
import sys

from .coupling import CouplingError
from .mesh import MeshError
from .scenarios import (ConfigError, ScenarioError, Simulation, _build_mesh,
                        load_config, run_tp1)
from .vtkio import write_vtu
from .xylem import XylemError


def _cmd_simulate(args):
    cfg = load_config(args.config)
    sim = Simulation(cfg, out_dir=args.out, seed=args.seed)
    sim.run()
    print(f"{cfg.name}: {sim.step_index} growth steps to t = {sim.t:g}, "
          f"{len(sim.net.segments)} segments, "
          f"output in {args.out}")
    return 0


def _cmd_converge(args):
    report = run_tp1(levels=args.levels, out_dir=args.out)
    names = report.names
    print("h        " + "  ".join(f"{n:>14s}" for n in names))
    for lv in report.levels:
        print(f"{lv['h']:<9.4f}" + "  ".join(f"{lv['errors'][n]:14.6e}"
                                             for n in names))
    for i, rates in enumerate(report.eoc()):
        print(f"eoc {i}    " + "  ".join(f"{rates[n]:14.3f}" for n in names))
    return 0


def _cmd_mesh(args):
    cfg = load_config(args.config)
    mesh = _build_mesh(cfg)
    write_vtu(args.out, mesh)
    print(f"{mesh.n_cells} cells, h = {mesh.h:.6g}, written to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="soilroot",
        description="Coupled soil-water / root-network simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a scenario from a config file")
    sim.add_argument("--config", required=True, help="TOML scenario file")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--seed", type=int, default=None,
                     help="override the RNG seed of the config")
    sim.set_defaults(func=_cmd_simulate)

    conv = sub.add_parser("converge", help="manufactured convergence study")
    conv.add_argument("--case", default="tp1", choices=["tp1"])
    conv.add_argument("--levels", type=int, default=4)
    conv.add_argument("--out", required=True, help="output directory")
    conv.set_defaults(func=_cmd_converge)

    msh = sub.add_parser("mesh", help="build and export the soil mesh")
    msh.add_argument("--config", required=True, help="TOML scenario file")
    msh.add_argument("--out", required=True, help="output VTU file")
    msh.set_defaults(func=_cmd_mesh)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except (CouplingError, ScenarioError, MeshError, XylemError) as e:
        print(f"solver error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
