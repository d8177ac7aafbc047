"""Command-line entry point.

Every subcommand writes its outputs under ``--out-dir`` and prints the
paths it wrote. Exit codes: 0 on success, 2 when a solver fails or does not
converge, 3 on invalid input or configuration.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import grouplasso, harness, ilqgames, lqsolve, scenarios, sparsedp
from .errors import ConfigError, DimensionError, SolverError
from .gamecore import Dims, RegularizationWeights, load_game

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_SOLVER = 2
EXIT_CONFIG = 3


# ---------------------------------------------------------------------------
# input helpers


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _weights(n_players, lam):
    """``lam`` is a scalar or a nested list (full weight matrix)."""
    if isinstance(lam, (list, tuple)):
        return RegularizationWeights(np.asarray(lam, dtype=float))
    return RegularizationWeights.uniform(n_players, float(lam))


def _lambda_arg(text):
    """``--lambda`` takes a number or a JSON weight matrix."""
    try:
        return float(text)
    except ValueError:
        pass
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"not a number or JSON matrix: {text}") from exc


def _group_lasso_problem(data):
    """Keys: ``S``, ``Y``, ``state_dims``, ``control_dims``, ``weights``."""
    try:
        dims = Dims(data["state_dims"], data["control_dims"], 1)
        weights = _weights(dims.n_players, data.get("weights", 0.0))
        return grouplasso.GroupLassoProblem(np.asarray(data["S"], dtype=float),
                                            np.asarray(data["Y"], dtype=float), dims, weights)
    except KeyError as exc:
        raise ConfigError(f"group Lasso problem is missing {exc}") from exc


def _section(config, name):
    sec = config.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return sec


def _scenario_config(name_or_path, overrides):
    """A named scenario or a JSON file with ``kind`` plus config fields."""
    if name_or_path in scenarios.SCENARIOS:
        base = scenarios.SCENARIOS[name_or_path]()
        cls = type(base)
        data = {f.name: getattr(base, f.name) for f in fields(cls)
                if f.name in overrides or f.name == "n_players"}
    else:
        data = dict(_read_json(name_or_path))
        kind = data.pop("kind", None)
        classes = {"navigation": scenarios.NavigationConfig, "formation": scenarios.FormationConfig}
        if kind not in classes:
            raise ConfigError(f"scenario file needs kind in {sorted(classes)}, got {kind!r}")
        cls = classes[kind]
    data.update(overrides)
    return scenarios.config_from_dict(cls, data)


def _ilq_settings(config, lam, iters, n_players):
    data = _section(config, "ilq")
    names = {f.name for f in fields(ilqgames.IlqSettings)} - {"weights"}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown iLQ settings: {sorted(unknown)}")
    data = dict(data)
    if iters is not None:
        data["max_outer_iters"] = iters
    try:
        return ilqgames.IlqSettings(weights=_weights(n_players, lam), **data)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _sweep_spec(config, full, seed):
    data = dict(_section(config, "sweep"))
    if seed is not None:
        data["seed"] = seed
    if full:
        return harness.SweepSpec.full_scale(seed=data.get("seed", 0))
    names = {f.name for f in fields(harness.SweepSpec)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown sweep settings: {sorted(unknown)}")
    return harness.SweepSpec(**data)


# ---------------------------------------------------------------------------
# output helpers


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_json(path, payload):
    text = json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n"
    return harness.write_text(path, text)


def _strategies_dict(strategies):
    d = strategies.dims
    return {
        "state_dims": list(d.state_dims),
        "control_dims": list(d.control_dims),
        "horizon": d.horizon,
        "P": strategies.P,
        "alpha": strategies.alpha,
    }


def _trajectory_dict(traj):
    return {"x": traj.x, "u": traj.u}


def _announce(paths):
    for p in paths:
        print(p)


# ---------------------------------------------------------------------------
# subcommands


def cmd_solve_lq(args, config):
    game = load_game(args.game)
    strategies, values, sigma_min = lqsolve.solve_feedback_nash(game, return_diagnostics=True)
    payload = {
        "strategies": _strategies_dict(strategies),
        "sigma_min": sigma_min,
        "costs": [float(values.cost_to_go(i, 0, game.x1)) for i in range(game.dims.n_players)],
    }
    _announce([_write_json(args.out_dir / "solve_lq.json", payload)])
    return EXIT_OK


def cmd_solve_sparse(args, config):
    game = load_game(args.game)
    weights = _weights(game.dims.n_players, args.lam)
    report = sparsedp.solve_regularized(game, weights, backend=args.backend)
    _, counts = sparsedp.sparsity_pattern(report.strategies)
    payload = {
        "strategies": _strategies_dict(report.strategies),
        "sparsity_pattern": report.sparsity,
        "nonzero_blocks": counts,
        "delta_P": report.delta_P,
        "lemma1_bound": report.lemma1_bound,
        "kkt_residual": report.kkt,
        "sigma_min": report.sigma_min,
        "costs": [float(report.values.cost_to_go(i, 0, game.x1))
                  for i in range(game.dims.n_players)],
    }
    _announce([_write_json(args.out_dir / "solve_sparse.json", payload)])
    return EXIT_OK


def cmd_group_lasso(args, config):
    prob = _group_lasso_problem(_read_json(args.problem))
    sol = grouplasso.solve(prob, backend=args.backend)
    payload = {
        "P_hat": sol.P_hat,
        "objective": sol.objective,
        "kkt_residual": sol.kkt_residual,
        "iterations": sol.iterations,
        "backend": sol.backend,
    }
    _announce([_write_json(args.out_dir / "group_lasso.json", payload)])
    return EXIT_OK


def cmd_riccati_trace(args, config):
    game = load_game(args.game)
    weights = _weights(game.dims.n_players, args.lam)
    zero = RegularizationWeights.uniform(game.dims.n_players, 0.0)
    try:
        Z_star, _ = sparsedp.infinite_horizon_fixed_point(game, zero)
    except SolverError as exc:
        log.warning("no unregularized fixed point for distances: %s", exc)
        Z_star = None
    _, _, trace = sparsedp.riccati_trace(game, weights, args.steps, Z_star=Z_star)
    traces = {float(weights.weights.max()): trace}
    h = harness.config_hash({"game": str(args.game), "lambda": args.lam, "steps": args.steps})
    paths = harness.emit_outputs(traces, "csv", args.out_dir / "riccati_trace.csv", "traces", h)
    paths += harness.emit_outputs(traces, "svg", args.out_dir / "riccati_trace.svg", "traces", h)
    _announce(paths)
    return EXIT_OK


def cmd_solve_ilq(args, config):
    cfg = _scenario_config(args.scenario, _section(config, "scenario"))
    if isinstance(cfg, scenarios.FormationConfig):
        game = ilqgames.from_lq_game(scenarios.build_formation_game(cfg))
    else:
        game = scenarios.build_navigation_game(cfg)
    settings = _ilq_settings(config, args.lam, args.iters, game.dims.n_players)
    result = ilqgames.solve_ilq(game, settings)
    payload = {
        "scenario": cfg.metadata(),
        "converged": result.converged,
        "iterations": len(result.iterations),
        "strategies": _strategies_dict(result.strategies),
        "operating_point": _trajectory_dict(result.operating_point),
        "costs": game.total_costs(result.operating_point),
    }
    h = harness.config_hash(payload["scenario"])
    header = ("config_hash", "iteration", "step_size", "max_step", "trajectory_change",
              "max_kkt") + tuple(f"cost_{i + 1}" for i in range(game.dims.n_players)) \
        + tuple(f"nonzero_blocks_{i + 1}" for i in range(game.dims.n_players))
    rows = [(h, it.iteration, it.step_size, it.max_step, it.trajectory_change, it.max_kkt,
             *it.costs, *it.nonzero_blocks) for it in result.iterations]
    paths = [_write_json(args.out_dir / "solve_ilq.json", payload),
             harness.write_text(args.out_dir / "solve_ilq_iterations.csv", harness.csv_text(header, rows))]
    _announce(paths)
    if not result.converged:
        print(f"iLQ did not converge in {settings.max_outer_iters} iterations "
              f"(last change {result.iterations[-1].trajectory_change:.3e})", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def cmd_sweep(args, config):
    spec = _sweep_spec(config, args.full, args.seed)
    scenario = _scenario_config("formation3", _section(config, "scenario"))
    result = harness.run_sweep(spec, scenario, backend=args.backend, workers=args.workers)
    out = args.out_dir
    paths = harness.emit_outputs(result, "csv", out / "sweep.csv")
    paths += harness.emit_outputs(result, "svg", out / "sweep.svg")
    paths.append(harness.write_text(out / "sweep_meta.json", harness.metadata_json(result)))
    _announce(paths)
    return EXIT_OK


def cmd_report(args, config):
    sweep_csv = Path(args.sweep)
    samples = sweep_csv.with_name(sweep_csv.stem + "_samples.csv")
    meta = args.meta or sweep_csv.with_name("sweep_meta.json")
    result = harness.load_sweep(samples, meta if Path(meta).exists() else None)
    claims = harness.directional_claims(result, threshold=args.threshold)
    paths = [_write_json(args.out_dir / "claims.json", claims)]
    paths += harness.emit_outputs(result, "svg", args.out_dir / "report.svg")
    _announce(paths)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _global_flags(parser, suppress):
    # Subcommands repeat the global flags with suppressed defaults so a flag
    # given before the subcommand is not overwritten.
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=default(None),
                        help="master seed for random streams")
    parser.add_argument("--out-dir", type=Path, default=default(Path(".")), help="output directory")
    parser.add_argument("--config", type=Path, default=default(None),
                        help="JSON config with optional 'scenario', 'ilq' and 'sweep' sections")
    parser.add_argument("-v", "--verbose", action="store_true", default=default(False))
    return parser


def build_parser():
    common = _global_flags(argparse.ArgumentParser(add_help=False), suppress=True)
    parser = _global_flags(argparse.ArgumentParser(
        prog="sparsegames", description=__doc__.splitlines()[0]), suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve-lq", parents=[common], help="feedback Nash equilibrium of an LQ game")
    p.add_argument("game", type=Path)
    p.set_defaults(func=cmd_solve_lq)

    p = sub.add_parser("solve-sparse", parents=[common], help="group-sparse feedback equilibrium")
    p.add_argument("game", type=Path)
    p.add_argument("--lambda", dest="lam", type=_lambda_arg, default=0.0)
    p.add_argument("--backend", choices=("bcd", "conic"), default="bcd")
    p.set_defaults(func=cmd_solve_sparse)

    p = sub.add_parser("group-lasso", parents=[common], help="solve one group Lasso problem")
    p.add_argument("problem", type=Path)
    p.add_argument("--backend", choices=("bcd", "conic"), default="bcd")
    p.set_defaults(func=cmd_group_lasso)

    p = sub.add_parser("riccati-trace", parents=[common], help="regularized Riccati iteration trace")
    p.add_argument("game", type=Path)
    p.add_argument("--lambda", dest="lam", type=_lambda_arg, default=0.0)
    p.add_argument("--steps", type=int, default=500)
    p.set_defaults(func=cmd_riccati_trace)

    p = sub.add_parser("solve-ilq", parents=[common], help="iterative LQ game solver")
    p.add_argument("scenario", help="scenario name or scenario JSON file")
    p.add_argument("--lambda", dest="lam", type=_lambda_arg, default=0.0)
    p.add_argument("--iters", type=int, default=None, help="maximum outer iterations")
    p.set_defaults(func=cmd_solve_ilq)

    p = sub.add_parser("sweep", parents=[common], help="noisy-observation Monte Carlo sweep")
    p.add_argument("--full", action="store_true", help="50 x 100 x 100 grid instead of the desk-scale default")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--backend", choices=("bcd", "conic"), default="bcd")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", parents=[common], help="directional claims from a sweep")
    p.add_argument("sweep", type=Path, help="sweep.csv written by the sweep subcommand")
    p.add_argument("--meta", type=Path, default=None)
    p.add_argument("--threshold", type=float, default=500.0, help="high-noise variance threshold")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _read_json(args.config) if args.config else {}
        if not isinstance(config, dict):
            raise ConfigError("config file must hold a JSON object")
        return args.func(args, config)
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ConfigError, DimensionError, OSError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
