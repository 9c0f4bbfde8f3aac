"""Command-line interface: validate, solve, ergodic, verify, simulate.

Exit codes: 0 pass, 1 semantic or assumption failure, 2 I/O or parse error,
3 numerical non-convergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from . import harness
from .errors import AssumptionError, DomainError, NumericalError, ParseError, ScenarioError, SchemaError
from .scenario import builtin_scenario, check_dissipativity, compute_constants, load_scenario
from .solver import ergodic_continuation, ergodic_residual, solve_chain, write_fields_csv

EXIT_OK, EXIT_FAIL, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


@dataclass
class RunManifest:
    command: str
    scenario: str
    scenario_hash: str
    flags: dict
    seed: int | None
    artifacts: list = field(default_factory=list)
    wall_times: dict = field(default_factory=dict)
    tool_version: str = field(default_factory=_version)
    python: str = field(default_factory=platform.python_version)
    numpy: str = np.__version__
    result: dict = field(default_factory=dict)

    def add(self, path):
        self.artifacts.append(str(path))
        return path

    def write(self, out):
        path = Path(out) / "manifest.json"
        self.artifacts.append(str(path))
        path.write_text(json.dumps(harness._plain(asdict(self)), indent=2, sort_keys=True) + "\n")
        return path


def _scenario(arg):
    """A path to a JSON file, or the name of a bundled scenario."""
    p = Path(arg)
    if p.suffix == ".json" or p.exists():
        return load_scenario(p)
    return builtin_scenario(arg)


def _threads(arg):
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("FDB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ParseError(f"FDB_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _outdir(path):
    if path is None:
        raise ParseError("--out is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, header, rows):
    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return f"{float(v):.17g}"
        return v

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])
    return path


def _flags(args):
    return {k: v for k, v in vars(args).items() if k not in ("func",)}


def _manifest(args, spec):
    return RunManifest(args.command, args.scenario, spec.digest(), _flags(args), getattr(args, "seed", None))


# ---------------------------------------------------------------------------
# subcommands

def cmd_validate(args):
    spec = _scenario(args.scenario)
    ledger = compute_constants(spec)
    diss = check_dissipativity(spec)
    failed = []
    if not diss.passed:
        failed.append("check_dissipativity")
    if not ledger.cphi_cg:
        failed.append("cphi_below_cg")
    if not ledger.ergodic_kappa_g:
        failed.append("ergodic_kappa_g")
    report = {"scenario": spec.name, "hash": spec.digest(), "ledger": ledger.to_dict(),
              "dissipativity": diss.to_dict(), "failed": failed}
    print(json.dumps(harness._plain(report), indent=2, sort_keys=True))
    for name in failed:
        print(f"FAIL {name}", file=sys.stderr)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_solve(args):
    out = _outdir(args.out)
    spec = _scenario(args.scenario)
    man = _manifest(args, spec)
    rho = spec.rho if args.rho is None else args.rho
    t0 = time.perf_counter()
    sol = solve_chain(spec, rho, tol=args.tol, newton=args.newton, **_grid_kw(spec, args))
    man.wall_times["solve"] = time.perf_counter() - t0
    man.add(write_fields_csv(sol, out / "fields.csv"))
    rows = [(b.name, b.n, b.observed, b.bound, b.eps, "skipped" if b.passed is None else b.passed)
            for b in sol.bounds]
    man.add(_write_csv(out / "bounds.csv", ["check", "n", "observed", "bound", "eps", "pass"], rows))
    man.result = {"rho": rho, "bounds_passed": sol.bounds_passed,
                  "residuals": [d.residual for d in sol.diagnostics]}
    man.write(out)
    return EXIT_OK if sol.bounds_passed else EXIT_FAIL


def _grid_kw(spec, args):
    if getattr(args, "grid_points", None):
        from .grid import Grid
        return {"grid": Grid.from_spec(spec, args.grid_points)}
    return {}


def cmd_ergodic(args):
    out = _outdir(args.out)
    spec = _scenario(args.scenario)
    man = _manifest(args, spec)
    t0 = time.perf_counter()
    erg = ergodic_continuation(spec, rho0=args.rho0, override=args.override, newton=args.newton,
                               **_grid_kw(spec, args))
    man.wall_times["ergodic"] = time.perf_counter() - t0
    res = ergodic_residual(spec, erg)
    man.add(write_fields_csv(erg, out / "ergodic_fields.csv"))
    rows = [(r, v, dr) for r, v, dr in zip(erg.ladder, erg.varrho_trace, erg.drift_trace)]
    man.add(_write_csv(out / "ladder.csv", ["rho", "varrho", "drift"], rows))
    man.result = {"varrho": erg.varrho, "converged": erg.converged, "certified_regimes": list(erg.certified_regimes),
                  "residual_sup": res.sup, "notes": erg.notes}
    man.write(out)
    return EXIT_OK if erg.converged else EXIT_NUMERIC


def _verify_bounds(spec, args, man, out):
    sol = solve_chain(spec, spec.rho)
    if not sol.ledger.cphi_cg:
        man.result = {"suite": "bounds", "status": "skipped: assumption"}
        print("bounds: skipped: assumption")
        return EXIT_OK
    rows = [(b.name, b.n, b.observed, b.bound, b.eps, "skipped" if b.passed is None else b.passed)
            for b in sol.bounds]
    man.add(_write_csv(out / "bounds.csv", ["check", "n", "observed", "bound", "eps", "pass"], rows))
    for r in rows:
        print(f"{r[0]:12s} n={r[1]} observed={r[2]:.6g} bound={r[3]:.6g} {r[5]}")
    man.result = {"suite": "bounds", "passed": sol.bounds_passed}
    return EXIT_OK if sol.bounds_passed else EXIT_FAIL


def _verify_martingale(spec, args, man, out):
    sol = solve_chain(spec, spec.rho)
    rows, ok = [], True
    for strat in args.strategies:
        for n in sorted({0, spec.m}):
            rep = harness.martingale_test(spec, sol, strat, n=n, checkpoints=args.checkpoints, paths=args.paths,
                                          seed=args.seed, dt=args.dt, deterministic="exact",
                                          threads=args.threads)
            ok &= rep.passed
            for r in rep.rows():
                rows.append((rep.strategy, n, rep.kind, r["checkpoint"], r["mean"], r["se"], r["reference"],
                             r["gap"], r["pass"], rep.deterministic))
    header = ["strategy", "n", "kind", "checkpoint", "mean", "se", "reference", "gap", "pass", "deterministic"]
    man.add(_write_csv(out / "martingale.csv", header, rows))
    for r in rows:
        print(f"{r[0]:12s} n={r[1]} {r[2]:15s} t={r[3]:<5g} gap={r[7]:+.3e} se={r[5]:.3e} "
              f"{'PASS' if r[8] else 'FAIL'}")
    man.result = {"suite": "martingale", "passed": bool(ok)}
    return EXIT_OK if ok else EXIT_FAIL


def _verify_decomposition(spec, args, man, out):
    sol = solve_chain(spec, spec.rho)
    rows, ok = [], True
    for n in sorted({0, spec.m}):
        rep = harness.decomposition_identity_test(spec, sol, n, s=args.checkpoints[-1], paths=args.paths,
                                                  seed=args.seed, dt=args.dt, threads=args.threads)
        ok &= rep.passed
        rows.append((n, rep.t, rep.s, rep.lhs, rep.rhs, rep.se, rep.rel_gap, rep.rel_se, rep.passed))
        print(f"n={n} rel_gap={rep.rel_gap:+.3e} rel_se={rep.rel_se:.3e} {'PASS' if rep.passed else 'FAIL'}")
    header = ["n", "t", "s", "lhs", "rhs", "se", "rel_gap", "rel_se", "pass"]
    man.add(_write_csv(out / "decomposition.csv", header, rows))
    man.result = {"suite": "decomposition", "passed": bool(ok)}
    return EXIT_OK if ok else EXIT_FAIL


def _verify_growth(spec, args, man, out):
    erg = ergodic_continuation(spec)
    rep = harness.growth_rate_estimate(spec, erg, horizons=args.horizons, paths=args.paths, seed=args.seed,
                                       dt=args.growth_dt, threads=args.threads)
    rows = list(zip(rep.horizons, rep.estimates, rep.ses, rep.counts, rep.gaps))
    man.add(_write_csv(out / "growth.csv", ["T", "estimate", "se", "paths", "gap"], rows))
    last = rows[-1]
    tol = max(3 * last[2], 5e-4)
    ok = bool(np.isfinite(last[1]) and abs(last[4]) <= tol)
    for r in rows:
        print(f"T={r[0]:<6g} rate={r[1]:+.6f} se={r[2]:.2e} gap={r[4]:+.2e}")
    print(f"varrho={erg.varrho:+.6f} {'PASS' if ok else 'FAIL'} (tolerance {tol:.2e})")
    man.result = {"suite": "growth", "varrho": erg.varrho, "passed": ok}
    return EXIT_OK if ok else EXIT_FAIL


SUITES = {"bounds": _verify_bounds, "martingale": _verify_martingale,
          "decomposition": _verify_decomposition, "growth": _verify_growth}


def cmd_verify(args):
    out = _outdir(args.out)
    spec = _scenario(args.scenario)
    args.threads = _threads(args.threads)
    man = _manifest(args, spec)
    t0 = time.perf_counter()
    code = SUITES[args.suite](spec, args, man, out)
    man.wall_times[args.suite] = time.perf_counter() - t0
    man.write(out)
    return code


def cmd_simulate(args):
    out = _outdir(args.out)
    spec = _scenario(args.scenario)
    args.threads = _threads(args.threads)
    man = _manifest(args, spec)
    t0 = time.perf_counter()
    sol = solve_chain(spec, spec.rho)
    steps = max(1, int(round(args.horizon / args.dt)))
    every = max(1, steps // max(1, args.records))
    record = sorted({k * args.horizon / steps for k in range(0, steps + 1, every)} | {args.horizon})
    b = harness.simulate_bundle(spec, sol, args.strategy, args.horizon, args.dt, args.paths, args.seed,
                                record_times=record, threads=args.threads)
    man.wall_times["simulate"] = time.perf_counter() - t0
    m, d = spec.m, spec.d
    header = (["path"] + [f"T{k + 1}" for k in range(m)] + [f"L{k + 1}" for k in range(m)]
              + ["regime_T", "X_T"] + [f"S{k + 1}_T" for k in range(m)] + [f"phi{k + 1}_T" for k in range(d)]
              + ["excluded"])
    rows = []
    for i in range(b.paths):
        rows.append([i, *b.default_times[i], *b.marks[i], int(b.regime[i, -1]), b.X[i, -1], *b.S[i, -1],
                     *b.phi[i, -1], bool(b.excluded[i])])
    man.add(_write_csv(out / "paths.csv", header, rows))
    stats = [(t, float(np.mean(b.X[:, j])), float(np.std(b.X[:, j], ddof=1) / np.sqrt(b.paths)),
              float(np.mean(b.regime[:, j]))) for j, t in enumerate(b.times)]
    man.add(_write_csv(out / "wealth.csv", ["t", "mean_X", "se_X", "mean_regime"], stats))
    man.result = {"wealth_jump_error": b.wealth_jump_error(), "price_jump_error": b.price_jump_error(),
                  "exclusion_fraction": b.exclusion_fraction}
    man.write(out)
    return EXIT_OK


# ---------------------------------------------------------------------------

def _floats(text):
    return [float(v) for v in text.split(",") if v]


def build_parser():
    p = argparse.ArgumentParser(prog="fdbsde", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=False, out=True, threads=False):
        sp.add_argument("--scenario", required=True, help="JSON file or bundled name (flat, curved, flat2)")
        if out:
            sp.add_argument("--out", help="output directory")
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        if threads:
            sp.add_argument("--threads", type=int, default=None, help="worker cap (default: FDB_THREADS or cpu count)")

    sp = sub.add_parser("validate", help="check a scenario and print its constants ledger")
    common(sp, out=False)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("solve", help="solve the discounted regime chain")
    common(sp)
    sp.add_argument("--rho", type=float, default=None)
    sp.add_argument("--tol", type=float, default=1e-7)
    sp.add_argument("--grid-points", type=int, default=None)
    sp.add_argument("--newton", action="store_true", help="Newton pseudo-time steps")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("ergodic", help="vanishing-discount continuation")
    common(sp)
    sp.add_argument("--rho0", type=float, default=None)
    sp.add_argument("--override", action="store_true", help="proceed when the monotonicity check fails")
    sp.add_argument("--grid-points", type=int, default=None)
    sp.add_argument("--newton", action=argparse.BooleanOptionalAction, default=True)
    sp.set_defaults(func=cmd_ergodic)

    sp = sub.add_parser("verify", help="run a verification suite")
    common(sp, seed=True, threads=True)
    sp.add_argument("--suite", required=True, choices=sorted(SUITES))
    sp.add_argument("--paths", type=int, default=10_000)
    sp.add_argument("--dt", type=float, default=1e-3)
    sp.add_argument("--checkpoints", type=_floats, default=[0.5, 1.0, 2.0])
    sp.add_argument("--strategies", type=lambda s: s.split(";"), default=["optimal", "zero", "scaled:1.5"],
                    help="';'-separated strategy names")
    sp.add_argument("--horizons", type=_floats, default=[10.0, 25.0, 50.0])
    sp.add_argument("--growth-dt", type=float, default=1e-2)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("simulate", help="simulate market, defaults and wealth")
    common(sp, seed=True, threads=True)
    sp.add_argument("--strategy", default="optimal")
    sp.add_argument("--paths", type=int, default=1000)
    sp.add_argument("--horizon", type=float, default=1.0)
    sp.add_argument("--dt", type=float, default=1e-3)
    sp.add_argument("--records", type=int, default=100, help="number of recorded times")
    sp.set_defaults(func=cmd_simulate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_IO if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ParseError, SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ScenarioError, AssumptionError, DomainError, harness.StatisticsError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
