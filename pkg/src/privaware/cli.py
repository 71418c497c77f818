"""Command-line entry point: ``privaware {solve,simulate,bounds,sweep,manifest-validate}``.

Exit codes: 0 success, 1 validation or parse error, 2 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .bounds import (
    BoundInputs,
    ErrorTerms,
    corollary2_derivative,
    corollary2_f,
    g_dp,
    g_select_clip,
    theorem1_bound,
    theorem2_bound,
)
from .config import POLICY_NAMES, load_config
from .errors import ConsistencyError, ConvergenceError, DomainError, ParseError
from .experiment import (
    SWEEP_PARAMETERS,
    plot_csv,
    rounds_csv,
    run_experiment,
    run_sweep,
    summary_json,
    sweep_csv,
    write_atomic,
)
from .manifest import read_manifest
from .selection import SelectionProblem, kkt_check, objective_value, solve

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED = 0, 1, 2
BOUNDS_HEADER = ("T", "theorem1_bound", "theorem2_bound", "f_T", "f_prime_sign")


def _err(message: str) -> None:
    print(f"error: {message}", file=sys.stderr)


def cmd_solve(args) -> int:
    profiles = read_manifest(args.manifest)
    V = [p.noise_coefficient for p in profiles]
    problem = SelectionProblem.from_sizes([p.dataset_size for p in profiles], V, args.dimension, args.eta)
    try:
        probs = solve(problem, method=args.method)
    except ConvergenceError as exc:
        _err(str(exc))
        if exc.best is not None:
            best = np.asarray(exc.best, dtype=float)
            print(f"best iterate objective {objective_value(problem, best / best.sum())!r}", file=sys.stderr)
            print("best iterate p_s " + " ".join(repr(float(x)) for x in best), file=sys.stderr)
        return EXIT_NONCONVERGED
    p = probs.probabilities
    cert = kkt_check(problem, p)
    record = {
        "eta": args.eta,
        "model_dimension": args.dimension,
        "method": args.method,
        "objective": objective_value(problem, p),
        "kkt": {
            "stationarity_residual": cert.stationarity_residual,
            "complementarity_residual": cert.complementarity_residual,
            "primal_feasibility_residual": cert.primal_feasibility_residual,
            "lambda": cert.multiplier_lambda,
        },
        "clients": [
            {"id": prof.id, "noise_coefficient": float(v), "p_u": float(pu), "p_s": float(ps)}
            for prof, v, pu, ps in zip(profiles, V, problem.unbiased.probabilities, p)
        ],
    }
    if args.output:
        write_atomic(args.output, json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(f"{'id':>6} {'size':>8} {'epsilon':>10} {'p_u':>10} {'p_s':>10}")
    for prof, pu, ps in zip(profiles, problem.unbiased.probabilities, p):
        print(f"{prof.id:>6} {prof.dataset_size:>8} {prof.budget.epsilon:>10.4g} {pu:>10.6f} {ps:>10.6f}")
    print(f"objective {record['objective']:.12g}  kkt residual {cert.stationarity_residual:.3g}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    policies = [args.policy] if args.policy else None
    cfg = load_config(args.config, policies=policies)
    out = Path(args.output_dir or cfg.output_dir)
    constants = _load_constants(args.constants)[0] if args.constants else None
    result = run_experiment(cfg, args.policy, bound_constants=constants)
    write_atomic(out / "rounds.csv", rounds_csv(result.records))
    write_atomic(out / "summary.json", summary_json(result))
    f = result.final
    print(f"{result.policy} seed {result.seed}: eval_accuracy {f['eval_accuracy']:.4f} "
          f"eval_loss {f['eval_loss']:.6g} -> {out}")
    return EXIT_OK


_CONSTANT_KEYS = {
    "smoothness_L", "gradient_bound_B1", "strong_convexity_mu", "dissimilarity_B2", "stepsize_beta",
    "stepsize_gamma", "gamma_tradeoff_Gamma", "initial_gap", "initial_distance", "clipping_gap_estimate",
    "clip_C", "model_dimension_D",
}


def _load_constants(path):
    """[constants] table (and optional [terms] table) from a TOML file."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read constants {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"constants {path}: {exc}") from None
    constants = raw.get("constants")
    if not isinstance(constants, dict):
        raise DomainError("constants: missing [constants] table")
    unknown = set(constants) - _CONSTANT_KEYS
    if unknown:
        raise DomainError(f"constants: unknown field(s) {sorted(unknown)}")
    return constants, raw.get("terms")


def _terms_from_record(path, constants: dict) -> tuple[ErrorTerms, int]:
    """Error terms from a solve/simulate JSON record (p_u, p_s, V per client)."""
    try:
        record = json.loads(Path(path).read_text(encoding="utf-8"))
        clients = record["clients"]
        pu = [c["p_u"] for c in clients]
        ps = [c["p_s"] for c in clients]
        V = [c["noise_coefficient"] for c in clients]
    except OSError as exc:
        raise ParseError(f"cannot read terms {path}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"terms {path}: not a solve/simulate record ({exc})") from None
    D = int(record.get("model_dimension", constants.get("model_dimension_D", 1)))
    C = float(constants.get("clip_C", 1.0))
    terms = ErrorTerms(
        g_select_clip=g_select_clip(ps, pu, float(constants.get("clipping_gap_estimate", 0.0)),
                                    float(constants.get("dissimilarity_B2", 0.0)), C),
        g_dp=g_dp(ps, V, D),
    )
    return terms, D


def parse_grid(spec: str) -> list[int]:
    """``pow2:a:b`` (2^a..2^b), ``geom:lo:hi:n`` (integer-rounded, deduplicated) or a comma list."""
    try:
        if spec.startswith("pow2:"):
            a, b = (int(x) for x in spec[5:].split(":"))
            grid = [2**k for k in range(a, b + 1)]
        elif spec.startswith("geom:"):
            lo, hi, n = spec[5:].split(":")
            grid = sorted({int(round(x)) for x in np.geomspace(float(lo), float(hi), int(n))})
        else:
            grid = [int(float(x)) for x in spec.split(",") if x.strip()]
    except ValueError:
        raise DomainError(f"grid: cannot parse {spec!r}") from None
    if not grid or any(t < 1 for t in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise DomainError(f"grid: need strictly ascending positive integers, got {spec!r}")
    return grid


def cmd_bounds(args) -> int:
    constants, table = _load_constants(args.constants)
    if args.terms:
        terms, D = _terms_from_record(args.terms, constants)
        constants = {**constants, "model_dimension_D": D}
    elif isinstance(table, dict):
        try:
            terms = ErrorTerms(**{k: float(v) for k, v in table.items()})
        except TypeError as exc:
            raise DomainError(f"terms: {exc}") from None
    else:
        raise DomainError("terms: give --terms or a [terms] table in the constants file")
    constants = {"clip_C": 1.0, "model_dimension_D": 1, **constants}
    grid = parse_grid(args.grid)
    lines = [",".join(BOUNDS_HEADER)]
    for T in grid:
        inputs = BoundInputs(total_iterations_T=T, **constants)
        t1 = theorem1_bound(inputs, terms)
        t2 = theorem2_bound(inputs, terms)
        f = corollary2_f(inputs, terms, T)
        sign = int(np.sign(corollary2_derivative(inputs, terms, T)))
        lines.append(f"{T},{t1!r},{t2!r},{f!r},{sign}")
    text = "\n".join(lines) + "\n"
    if args.output:
        write_atomic(args.output, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    if not args.values:
        raise DomainError("sweep: empty values list")
    policies = args.policies or None
    cfg = load_config(args.config, policies=policies)
    out = Path(args.output_dir or cfg.output_dir)
    outcomes = run_sweep(cfg, args.parameter, args.values, policies, workers=args.workers)
    write_atomic(out / f"sweep_{args.parameter}.csv", sweep_csv(args.parameter, outcomes))
    write_atomic(out / f"sweep_{args.parameter}_plot.csv", plot_csv(outcomes))
    failed = [o for o in outcomes if o.status != "ok"]
    for o in failed:
        _err(f"{args.parameter}={o.value} {o.policy} seed {o.seed}: {o.status}")
    print(f"{len(outcomes) - len(failed)}/{len(outcomes)} runs succeeded -> {out}")
    return EXIT_INVALID if failed else EXIT_OK


def cmd_manifest_validate(args) -> int:
    profiles = read_manifest(args.manifest)
    print(f"ok: {len(profiles)} clients")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="privaware", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve the privacy-aware selection problem for a manifest")
    p.add_argument("manifest")
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--dimension", "-D", type=int, required=True, help="model dimension D")
    p.add_argument("--output", "-o", help="JSON record path")
    p.add_argument("--method", choices=("threshold", "subgradient"), default="threshold")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("simulate", help="run DP-FedAvg for one policy and seed")
    p.add_argument("config")
    p.add_argument("--policy", choices=POLICY_NAMES)
    p.add_argument("--output-dir")
    p.add_argument("--constants", help="TOML [constants] table for bound evaluation in the summary")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bounds", help="evaluate the convergence bounds over a T grid")
    p.add_argument("constants", help="TOML file with a [constants] table and optionally [terms]")
    p.add_argument("--terms", help="solve/simulate JSON record to derive the error terms from")
    p.add_argument("--grid", default="pow2:1:40", help="pow2:a:b, geom:lo:hi:n or a comma list")
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("sweep", help="final accuracy per policy across values of one parameter")
    p.add_argument("config")
    p.add_argument("--parameter", required=True, choices=sorted(SWEEP_PARAMETERS))
    p.add_argument("--values", nargs="*", default=[])
    p.add_argument("--policies", nargs="*", choices=POLICY_NAMES)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("manifest-validate", help="check a client manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_manifest_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConvergenceError as exc:
        _err(str(exc))
        return EXIT_NONCONVERGED
    except (DomainError, ParseError, ConsistencyError) as exc:
        _err(str(exc))
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
