"""Command line: ``disperse {simulate,validate,blowup,tube,census}``.

Every command reads a scene (a JSON file or the name of a built-in scene),
takes an explicit seed and writes JSON/CSV files plus ``manifest.json`` to
``--out``. Exit codes: 0 success, 2 validation failure, 3 numerical
failure, 4 bad input.
"""

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import io as dio
from ._parallel import map_chunks
from .billiard import billiard_map_n
from .errors import ConfigurationError, DisperseError, PreconditionError
from .geometry import BilliardConfig, Tolerances, random_phase_point, validate_configuration
from .scenes import SCENES

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_INPUT = 0, 2, 3, 4
STRUCTURAL_FLAGS = {"disjointness", "tau0", "convexity", "multiple_collision"}


class BadInput(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def load_cfg(args):
    """Scene plus tolerance overrides, with the text hashed for the manifest."""
    name = args.scene
    if name in SCENES:
        cfg = SCENES[name]()
        text = json.dumps(cfg.to_dict(), sort_keys=True)
    else:
        path = Path(name)
        if not path.is_file():
            raise BadInput(f"scene {name!r} is neither a file nor a built-in scene "
                           f"({', '.join(sorted(SCENES))})")
        text = path.read_text()
        try:
            cfg = BilliardConfig.from_dict(json.loads(text))
        except (json.JSONDecodeError, ConfigurationError, ValueError) as exc:
            raise BadInput(f"cannot read scene {name}: {exc}") from exc
    overrides = {k: getattr(args, f"tol_{k}") for k in Tolerances().to_dict()
                 if getattr(args, f"tol_{k}", None) is not None}
    if overrides:
        tol = Tolerances.from_dict({**cfg.tolerances.to_dict(), **overrides})
        cfg = replace(cfg, tolerances=tol)
    return cfg, text, overrides


class _DefaultsFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Appends defaults unless the help text already states one."""

    def _get_help_string(self, action):
        if "(default:" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


def _add_common(p):
    p.add_argument("--scene", default="two_disk",
                   help=f"scene JSON file or built-in name ({', '.join(sorted(SCENES))})")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out", default="out", help="output directory")
    for k, v in Tolerances().to_dict().items():
        p.add_argument(f"--tol-{k.replace('_', '-')}", dest=f"tol_{k}",
                       type=type(v), default=argparse.SUPPRESS,
                       help=f"override tolerance {k} (default: scene value, else {v})")


def _check_scene(cfg, seed, n_samples):
    rep = validate_configuration(cfg, n_samples, seed, n_steps=20)
    bad = [f for f in rep.flags if f in STRUCTURAL_FLAGS]
    return rep, bad


# -- commands ---------------------------------------------------------------------


def cmd_simulate(args, cfg, out):
    rep, bad = _check_scene(cfg, args.seed, args.validation_samples)
    if bad:
        print(dio.dumps(rep.to_dict()), file=sys.stderr, end="")
        return EXIT_VALIDATION, {"validation": rep.to_dict()}
    if args.initial:
        try:
            states = dio.load_states(args.initial)
        except (OSError, ValueError, KeyError) as exc:
            raise BadInput(f"cannot read initial states: {exc}") from exc
    else:
        states = [random_phase_point(cfg, np.random.default_rng([args.seed, i]))
                  for i in range(args.trajectories)]

    def run(i, x):
        rec = billiard_map_n(cfg, x, args.steps, abort_on_tangency=args.abort_on_tangency)
        dio.write_trajectory(rec, out / f"trajectory_{i:04d}.csv")
        return rec.termination

    terms = map_chunks(run, list(enumerate(states)))
    return EXIT_OK, {"terminations": terms, "validation_flags": rep.flags}


def cmd_validate(args, cfg, out):
    rep = validate_configuration(cfg, args.samples, args.seed, n_steps=args.steps)
    dio.write_json(rep.to_dict(), out / "validation.json")
    print(dio.dumps(rep.to_dict()), end="")
    return (EXIT_VALIDATION if rep.flags else EXIT_OK), {"flags": rep.flags}


def cmd_blowup(args, cfg, out):
    from .geometry import ScattererInstance
    from .singularity import derivative_blowup_exponent, quasi_regular_chart, sample_tangency_set

    inst = ScattererInstance(args.scatterer, (0,) * cfg.dimension)
    if args.scatterer >= len(cfg.scatterers):
        raise BadInput(f"scene has no scatterer {args.scatterer}")
    sol = sample_tangency_set(cfg, inst, 1, args.seed)[0]
    chart = quasi_regular_chart(cfg, sol)
    taus = np.logspace(np.log10(args.tau_min), np.log10(args.tau_max), args.points)
    result = {}
    for kind in ("tau", "upsilon"):
        rep = derivative_blowup_exponent(cfg, chart, taus, kind=kind, h=args.h)
        result[kind] = rep.to_dict()
    result["base_line"] = {"p": sol.line.p, "v": sol.line.v, "q_star": sol.q_star}
    dio.write_json(result, out / "blowup.json")
    ok = all(result[k]["passed"] for k in ("tau", "upsilon"))
    return EXIT_OK, {"passed": ok}


def cmd_tube(args, cfg, out):
    from . import measure

    deltas = args.deltas
    if args.field:
        if args.field not in measure.FIELDS:
            raise BadInput(f"unknown field {args.field!r} ({', '.join(sorted(measure.FIELDS))})")
        spec = measure.FIELDS[args.field]()
        if args.field == "no_zero":
            est = measure.tube_volumes(spec, deltas, args.n, args.seed)
            rep = measure._fit_estimates(est, (0.9, 1.1), field=spec.name,
                                         n_samples=args.n, seed=args.seed)
        else:
            rep = measure.scaling_fit(spec, deltas, args.n, args.seed)
    else:
        # S itself sits at grazing; preimages are sampled away from it
        max_angle = args.window_max_angle
        if max_angle is None:
            max_angle = np.pi / 2 if args.k == 0 else 1.2
        axis = args.window_axis or [1.0] + [0.0] * (cfg.dimension - 1)
        window = measure.PhaseWindow(args.window_scatterer, (0,) * cfg.dimension,
                                     tuple(axis), args.window_half_angle, max_angle)
        rep = measure.singularity_tube_measure(cfg, args.k, window, deltas, args.n,
                                               args.seed, cloud_size=args.cloud_size)
    doc = dio.tube_report(rep)
    dio.write_json(doc, out / "tube.json")
    return EXIT_OK, {"slope": doc["slope"], "passed": doc["passed"]}


def cmd_census(args, cfg, out):
    from .genericity import tangency_census

    rows = tangency_census(cfg, args.j_max, args.trials, args.seed, max_len=args.max_len,
                           falsification_dir=out / "falsification")
    dio.write_census(rows, out / "census.csv")
    dio.write_json({"rows": [r.__dict__ for r in rows]}, out / "census.json")
    bound = 2 * cfg.dimension - 2
    found = [r.j for r in rows if r.j > bound and r.converged]
    if found:
        print(f"converged solutions with j = {found} > 2d - 2 = {bound}; "
              f"see {out / 'falsification'}", file=sys.stderr)
    return EXIT_OK, {"beyond_bound": found}


# -- parser and entry point -------------------------------------------------------------


def build_parser():
    fmt = _DefaultsFormatter
    parser = _Parser(prog="disperse", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="iterate the billiard map", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--steps", type=int, default=10, help="collisions per trajectory")
    p.add_argument("--trajectories", type=int, default=4,
                   help="random initial states when --initial is not given")
    p.add_argument("--initial", default=None, help="JSON list of initial states")
    p.add_argument("--abort-on-tangency", action="store_true",
                   help="stop a trajectory at its first grazing collision")
    p.add_argument("--validation-samples", type=int, default=10,
                   help="flights sampled by the scene check before simulating")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("validate", help="check the standing assumptions", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--samples", type=int, default=50, help="sampled flights and convexity probes")
    p.add_argument("--steps", type=int, default=100, help="collisions per sampled flight")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("blowup", help="derivative blow-up near a tangency", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--scatterer", type=int, default=0, help="scatterer carrying the tangency")
    p.add_argument("--tau-min", type=float, default=1e-7, help="smallest tau (at least 1e-7)")
    p.add_argument("--tau-max", type=float, default=1e-3, help="largest tau")
    p.add_argument("--points", type=int, default=9, help="log-spaced tau values")
    p.add_argument("--h", type=float, default=1e-6, help="finite-difference step off the tau direction")
    p.set_defaults(func=cmd_blowup)

    p = sub.add_parser("tube", help="tube-volume scaling", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--field", default=None,
                   help="test field (hyperplane, circle, crossing, no_zero); "
                        "without it the singularity tube of the scene is measured")
    p.add_argument("--deltas", type=_floats, default="1e-3,3e-3,1e-2,3e-2,1e-1",
                   help="comma-separated tube radii, at least 5 over 1.5 decades")
    p.add_argument("--n", type=int, default=100000, help="Monte Carlo samples")
    p.add_argument("--k", type=int, default=1, help="preimage order of the tangency set")
    p.add_argument("--window-scatterer", type=int, default=1, help="scatterer carrying the window")
    p.add_argument("--window-axis", type=_floats, default=None,
                   help="cap axis, comma-separated (default: first coordinate axis)")
    p.add_argument("--window-half-angle", type=float, default=0.6, help="cap half-angle in radians")
    p.add_argument("--window-max-angle", type=float, default=None,
                   help="largest reflection angle in the window (default: pi/2 for k=0, else 1.2)")
    p.add_argument("--cloud-size", type=int, default=20000, help="tangent lines sampled for the cloud")
    p.set_defaults(func=cmd_tube)

    p = sub.add_parser("census", help="multi-tangency census", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--j-max", type=int, default=3, help="largest number of tangencies tried")
    p.add_argument("--trials", type=int, default=20, help="incremental chains")
    p.add_argument("--max-len", type=int, default=6, help="collisions followed per chain")
    p.set_defaults(func=cmd_census)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    t0 = time.perf_counter()
    out = Path(args.out)
    cfg = None
    try:
        cfg, text, overrides = load_cfg(args)
        out.mkdir(parents=True, exist_ok=True)
        code, summary = args.func(args, cfg, out)
    except BadInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (PreconditionError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DisperseError as exc:
        # the scene loaded, so the failed run still leaves a manifest behind
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        if cfg is None:
            return EXIT_NUMERICAL
        code, summary = EXIT_NUMERICAL, {"error": f"{type(exc).__name__}: {exc}"}
    manifest = {
        "command": args.command,
        "scene": args.scene,
        "scene_sha256": dio.sha256_text(text),
        "seed": args.seed,
        "tolerance_overrides": overrides,
        "tolerances": cfg.tolerances.to_dict(),
        "arguments": {k: v for k, v in vars(args).items() if k not in ("func", "out")},
        "version": __version__,
        "exit_code": code,
        "summary": summary,
        "duration_s": round(time.perf_counter() - t0, 3),
    }
    dio.write_json(manifest, out / "manifest.json")
    return code


if __name__ == "__main__":
    sys.exit(main())
