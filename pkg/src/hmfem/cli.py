"""Command line interface ``hmfem``.

Exit codes: 0 on success, 2 if some Newton run did not converge, 1 on usage
or I/O errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import (
    ExperimentSpec,
    export_vtu,
    run_basin_study,
    run_convergence_study,
    solve_level,
)

EXIT_OK, EXIT_USAGE, EXIT_NOT_CONVERGED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hmfem", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, level_help):
        p.add_argument("--config", type=Path, help="JSON study definition")
        p.add_argument("--example", help="example id (overrides the config)")
        p.add_argument("--level", type=int, help=level_help)
        p.add_argument("--seed", type=int, help="mesh perturbation seed")
        p.add_argument("--perturbed", action="store_true", help="use randomly perturbed refinements")
        p.add_argument("--out", type=Path, help="output directory")
        return p

    p = common(sub.add_parser("solve", help="solve on one mesh level"), "refinement level")
    p.add_argument("--rho-rule", default="0", help="noise strength rule for the start (0, h, h34, h12, h14, 1)")
    p.add_argument("--export", type=Path, help="write the solution to this VTU file")
    common(sub.add_parser("convergence", help="error study over mesh levels"), "finest level (runs 1..LEVEL)")
    common(sub.add_parser("basin", help="Newton iteration counts from noisy starts"), "finest level (runs 1..LEVEL)")
    p = common(sub.add_parser("export", help="solve and write a VTU file"), "refinement level")
    p.add_argument("--export", type=Path, help="VTU path (default OUT/solution.vtu)")
    return parser


def _spec(args) -> ExperimentSpec:
    spec = ExperimentSpec.from_json(args.config) if args.config else ExperimentSpec()
    overrides = {"example": args.example, "mesh_seed": args.seed, "out_dir": str(args.out) if args.out else None}
    if args.example and args.example != spec.example and not args.config:
        # the default level range depends on the example's dimension
        spec = ExperimentSpec(example=args.example)
    if args.perturbed:
        overrides["mesh_mode"] = "perturbed"
    spec = spec.with_overrides(**overrides)
    if args.level is not None:
        if args.command in ("solve", "export"):
            spec = spec.with_overrides(levels=(args.level,))
        else:
            spec = spec.with_overrides(levels=tuple(range(1, args.level + 1)))
    return spec


def _solve(args, spec: ExperimentSpec) -> int:
    level = max(spec.levels) if args.level is None else args.level
    rule = getattr(args, "rho_rule", "0")
    state, trace = solve_level(spec, level, rule)
    summary = {"example": spec.example, "level": level, "rho_rule": rule, **trace.summary()}
    print(json.dumps(summary, indent=2))
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "trace.csv").write_text(trace.to_csv())
    target = args.export
    if target is None and args.command == "export":
        if args.out is None:
            raise UsageError("export needs --export PATH or --out DIR")
        target = args.out / "solution.vtu"
    if target is not None and state is not None:
        export_vtu(state, target)
        print(f"wrote {target}")
    return EXIT_OK if trace.converged else EXIT_NOT_CONVERGED


def _convergence(args, spec: ExperimentSpec) -> int:
    report = run_convergence_study(spec)
    print(report.to_csv(), end="")
    if spec.out_dir:
        for path in report.write(spec.out_dir).values():
            print(f"wrote {path}")
    return EXIT_NOT_CONVERGED if report.failed_levels else EXIT_OK


def _basin(args, spec: ExperimentSpec) -> int:
    table = run_basin_study(spec)
    print(table.to_csv(), end="")
    if spec.out_dir:
        for path in table.write(spec.out_dir).values():
            print(f"wrote {path}")
    return EXIT_NOT_CONVERGED if table.any_failed else EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    commands = {"solve": _solve, "export": _solve, "convergence": _convergence, "basin": _basin}
    try:
        spec = _spec(args)
        return commands[args.command](args, spec)
    except (UsageError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"hmfem: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
