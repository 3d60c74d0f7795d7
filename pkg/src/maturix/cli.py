"""Command-line interface: ``maturix {evaluate,simulate,fit,compare,generate}``.

Exit codes: 0 success, 2 invalid input, 3 numeric failure, 4 optimizer did
not converge (the result is still written).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import explicit_model as em
from . import fitting
from .distributions import chi_square_gof, total_variation
from .rates import zero
from .specfile import SpecError, load_spec
from .stochastic_sim import MajorantError, empirical_pmf, simulate_counting_replicas

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_NOCONVERGE = 4


class InputError(ValueError):
    pass


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _header(digest: str, seed) -> str:
    return f"# spec_sha256={digest} seed={seed}\n"


def _write(text: str, out: Optional[str]) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _grid(t_from: float, t_to: float, step: float) -> np.ndarray:
    if step <= 0:
        raise InputError("--step must be positive")
    if t_to < t_from:
        raise InputError("--to must not precede --from")
    n = int(np.floor((t_to - t_from) / step + 1e-9))
    return t_from + step * np.arange(n + 1)


def read_observations(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a ``t,y`` CSV; ``#`` lines and a ``t,y`` header are skipped."""
    times, ys = [], []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = [p.strip() for p in s.split(",")]
        if parts == ["t", "y"]:
            continue
        try:
            if len(parts) != 2:
                raise ValueError
            t, y = float(parts[0]), float(parts[1])
            if not (np.isfinite(t) and np.isfinite(y)):
                raise ValueError
        except ValueError:
            raise InputError(f"{path}:{lineno}: malformed row {line!r}") from None
        times.append(t)
        ys.append(y)
    if not times:
        raise InputError(f"{path}: no observations")
    return np.array(times), np.array(ys)


# -- commands -------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    spec, digest = load_spec(args.model)
    times = _grid(args.t_from, args.t_to, args.step)
    ev = spec.evaluate
    tol = args.tol
    if ev.quantity == "catenary" or spec.model.kind == "catenary":
        if spec.model.kind != "catenary":
            raise InputError("quantity 'catenary' needs model.kind = 'catenary'")
        if times[0] < 0:
            raise InputError("catenary curves start at t = 0")
        values = fitting.predict_catenary(
            spec.params(), spec.model.n, spec.kinetics_obj(), times, tol if tol else 1e-8
        )
    else:
        model = spec.continuous()
        if ev.quantity == "q_infinity":
            if model.g is None:
                model = em.ContinuousModel(model.rho, model.lam, model.mu, em.PartialKilling(0.0, 0.0, zero()))
            values = em.q_infinity_curve(model, times, tol or em.BETA_TOL)
        else:
            values = np.array(
                [
                    em.mean_count(model, ev.start, t, ev.m0) if t >= ev.start else np.nan
                    for t in times
                ]
            )
    q = spec.q_schedule()
    cols = ["t", "value"] + (["q"] if ev.include_q else [])
    rows = [_header(digest, "none"), ",".join(cols) + "\n"]
    for i, t in enumerate(times):
        row = [_fmt(t), _fmt(values[i])]
        if ev.include_q:
            row.append(_fmt(q(t) if q is not None else 0.0))
        rows.append(",".join(row) + "\n")
    _write("".join(rows), args.out or spec.output.path)
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec, digest = load_spec(args.model)
    sim = spec.simulation
    seed = sim.seed if args.seed is None else args.seed
    replicas = sim.replicas if args.replicas is None else args.replicas
    at = sim.at if args.at is None else args.at
    if at is None:
        raise InputError("simulation time missing: pass --at or set simulation.at")
    if replicas < 1:
        raise InputError("--replicas must be positive")
    if at < sim.start:
        raise InputError("--at precedes simulation.start")
    model = spec.continuous()
    counts = simulate_counting_replicas(model, sim.m0, sim.start, [at], replicas, seed)[:, 0]
    law = em.occupation_law(model, sim.start, at, sim.m0)
    emp = empirical_pmf(counts)
    exact = law.pmf_vector(max(law.tail_bound, emp.size - 1))
    tv = total_variation(emp, exact)
    try:
        pvalue = chi_square_gof(counts, law).pvalue
    except ValueError:
        pvalue = None
    report = {
        "spec_sha256": digest,
        "seed": seed,
        "replicas": replicas,
        "time": at,
        "counts": np.bincount(counts).tolist(),
        "pmf": emp.tolist(),
        "exact_pmf": exact.tolist(),
        "law": {"m": law.m, "alpha": law.alpha, "beta": law.beta},
        "total_variation": tv,
        "chi_square_pvalue": pvalue,
    }
    _write(json.dumps(report, indent=2) + "\n", args.out or spec.output.path)
    print(
        f"replicas={replicas} mean={counts.mean():.6g} exact_mean={law.mean():.6g} "
        f"tv={tv:.4g} p={'n/a' if pvalue is None else format(pvalue, '.4g')}",
        file=sys.stderr,
    )
    return EXIT_OK


def _kind_and_n(args, spec):
    kind = args.kind or spec.model.kind
    n = args.n if args.n is not None else spec.model.n
    if kind == "catenary" and n is None:
        raise InputError("catenary fits need --n")
    return kind, n


def cmd_fit(args) -> int:
    spec, digest = load_spec(args.model)
    kind, n = _kind_and_n(args, spec)
    times, ys = read_observations(args.data)
    try:
        problem = fitting.FitProblem(times, ys, kind, n=n, kinetics=spec.kinetics_obj(), starts=args.starts)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    result = fitting.fit(problem, np.random.default_rng(args.seed))
    report = {"spec_sha256": digest, "seed": args.seed, **result.to_dict()}
    _write(json.dumps(report, indent=2) + "\n", args.out)
    print(
        f"{kind}{'' if n is None else f'({n})'} rss={result.rss:.6g} "
        f"evaluations={result.evaluations} runtime={result.runtime:.3g}s converged={result.converged}",
        file=sys.stderr,
    )
    return EXIT_OK if result.converged else EXIT_NOCONVERGE


def _parse_chains(text: str) -> list[int]:
    if text is None or not text.strip():
        return []
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InputError(f"--chains must be a comma-separated list of integers, got {text!r}") from None
    if any(c < 2 for c in out):
        raise InputError("chain sizes must be at least 2")
    return out


def cmd_compare(args) -> int:
    spec, digest = load_spec(args.model)
    chains = _parse_chains(args.chains)
    times, ys = read_observations(args.data)
    rows = fitting.benchmark_compare(
        times, ys, chains, np.random.default_rng(args.seed), spec.kinetics_obj(), starts=args.starts
    )
    _write(_header(digest, args.seed) + fitting.benchmark_csv(rows), args.out)
    by_rss = min(rows, key=lambda r: r.rss)
    by_time = min(rows, key=lambda r: r.runtime)
    print(f"best rss: {by_rss.model} ({by_rss.rss:.6g}); fastest: {by_time.model} ({by_time.runtime:.3g}s)", file=sys.stderr)
    return EXIT_OK if all(r.converged for r in rows) else EXIT_NOCONVERGE


def cmd_generate(args) -> int:
    spec, digest = load_spec(args.model)
    kind, n = _kind_and_n(args, spec)
    times = _grid(args.t_from, args.t_to, args.step)
    if args.noise_sd < 0:
        raise InputError("--noise-sd must be nonnegative")
    ys = fitting.generate_synthetic(
        spec.params(), kind, times, args.noise_sd, np.random.default_rng(args.seed), n, spec.kinetics_obj()
    )
    text = _header(digest, args.seed) + "t,y\n" + "".join(f"{_fmt(t)},{_fmt(y)}\n" for t, y in zip(times, ys))
    _write(text, args.out)
    return EXIT_OK


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maturix", description="Maturation chain toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", required=True, help="model spec file (.toml or .json)")
    common.add_argument("--out", help="output file (default: stdout)")
    common.add_argument("--seed", type=int, default=None, help="master random seed")
    common.add_argument("--tol", type=float, default=None, help="numerical tolerance")

    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument("--from", dest="t_from", type=float, default=0.0)
    grid.add_argument("--to", dest="t_to", type=float, required=True)
    grid.add_argument("--step", type=float, default=1.0)

    p = sub.add_parser("evaluate", parents=[common, grid], help="mean-count curve as CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", parents=[common], help="Monte-Carlo law of the count")
    p.add_argument("--at", type=float, default=None, help="observation time")
    p.add_argument("--replicas", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    fit_common = argparse.ArgumentParser(add_help=False)
    fit_common.add_argument("--data", required=True, help="observations CSV with columns t,y")
    fit_common.add_argument("--starts", type=int, default=8, help="latin-hypercube starts")

    p = sub.add_parser("fit", parents=[common, fit_common], help="least-squares fit")
    p.add_argument("--kind", choices=["continuous", "catenary"], default=None)
    p.add_argument("--n", type=int, default=None, help="chain length for catenary fits")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", parents=[common, fit_common], help="chain vs continuous benchmark")
    p.add_argument("--chains", default="5,10,30,100", help="comma-separated chain sizes")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("generate", parents=[common, grid], help="synthetic observations")
    p.add_argument("--kind", choices=["continuous", "catenary"], default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--noise-sd", type=float, default=0.0)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is None and args.command in ("fit", "compare", "generate"):
        args.seed = 0
    try:
        return args.func(args)
    except (SpecError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ArithmeticError, MajorantError, ValueError, RuntimeError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
