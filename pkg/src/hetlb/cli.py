"""``hetlb`` command line: run solvers, simulations and reproduction suites from config files.

Exit codes: 0 success, 2 bad configuration, 3 solver non-convergence, 4 tolerance failure.
Errors are reported on stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from datetime import datetime
from pathlib import Path

import numpy as np

from . import analysis
from .core import ClusterSpec, SpecError, TailState, format_spec, metric_distance, parse_kv, parse_number, parse_values, rho, spec_from_mapping
from .equilibrium import (
    EquilibriumError,
    arrival_rate_profile,
    equilibrium_summary,
    solve_equilibrium,
    write_equilibrium_csv,
    write_summary_json,
)
from .meanfield import ProjectionError, integrate
from .simulator import SimConfig, SimConfigError, chaos_diagnostic, run_replications, summarize, write_replication_csv, write_stats_json

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_TOLERANCE = 0, 2, 3, 4

SPEC_KEYS = {"M", "gamma", "C", "d", "lambda", "mu"}

_LAMBDAS = "[0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]"
EXPERIMENTS: dict[str, dict[str, tuple[str, str | None]]] = {
    "fixed_point": {"scheme": ("str", "scheme1"), "tol": ("float", "1e-12"), "damping": ("float", "0.5"), "K": ("int", None)},
    "integrate": {
        "scheme": ("str", "scheme1"), "t_end": ("float", "200"), "dt": ("float", "0.02"), "stride": ("int", "100"),
        "K": ("int", "64"), "initial": ("str", "empty"),
    },
    "simulate": {
        "scheme": ("str", "scheme1"), "N": ("int", "100"), "routing": ("routing", "optimized"), "horizon": ("float", "2e4"),
        "warmup": ("float", None), "job_dist": ("str", "exponential"), "engine": ("str", "auto"),
        "replications": ("int", "10"), "seed": ("int", "0"),
    },
    "error_vs_n": {
        "scheme": ("str", "scheme1"), "lambdas": ("floats", _LAMBDAS), "Ns": ("ints", "[10, 20, 100]"),
        "horizon": ("float", "2e4"), "replications": ("int", "5"), "seed": ("int", "0"),
    },
    "scheme_comparison": {
        "lambdas": ("floats", "[0.2, 0.5, 0.9]"), "N": ("int", "100"), "routing": ("str", "optimized"),
        "horizon": ("float", "2e4"), "replications": ("int", "10"), "seed": ("int", "0"),
    },
    "insensitivity": {
        "scheme": ("str", "scheme1"), "lambdas": ("floats", "[0.2, 0.3, 0.5, 0.7, 0.8, 0.9]"), "N": ("int", "100"),
        "horizon": ("float", "2e4"), "replications": ("int", "10"), "seed": ("int", "0"),
    },
    "stability_sweep": {
        "lambdas": ("floats", "[0.5, 0.95, 1.05]"), "N": ("int", "100"), "horizon": ("float", "1e4"),
        "replications": ("int", "10"), "seed": ("int", "0"), "snap_dt": ("float", "5"),
    },
    "chaos": {
        "scheme": ("str", "scheme1"), "Ns": ("ints", "[20, 200]"), "horizon": ("float", "2e4"),
        "replications": ("int", "10"), "seed": ("int", "0"), "snap_dt": ("float", "1"),
    },
}

# reproduction-suite tolerances
ERROR_BANDS = {10: (0.05, 0.15), 20: (0.02, 0.08), 100: (0.0, 0.03)}
THEORY_TOL = 0.02
INSENSITIVITY_TOL = 0.01
CHAOS_LIMIT = 0.05


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **extra):
        super().__init__(message)
        self.code = code
        self.kind = kind
        self.extra = extra


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # report usage errors as JSON with the config exit code
        raise CliError(EXIT_CONFIG, "usage", message)


def _convert(key: str, kind: str, text: str, line: int | None):
    try:
        if kind == "str":
            return text.strip()
        if kind == "float":
            return parse_number(text)
        if kind == "int":
            x = parse_number(text)
            if x != int(x):
                raise ValueError("not an integer")
            return int(x)
        if kind == "floats":
            return parse_values(text)
        if kind == "ints":
            vals = parse_values(text)
            if any(v != int(v) for v in vals):
                raise ValueError("not integers")
            return [int(v) for v in vals]
        if kind == "routing":
            t = text.strip()
            return t if t in ("optimized", "proportional") else parse_values(t)
    except (ValueError, ZeroDivisionError) as exc:
        raise SpecError(f"cannot parse {key} = {text!r}: {exc}", field=key, line=line) from None
    raise AssertionError(kind)


def load_plan(spec_path: str | None, experiment: str, overrides: list[str]) -> tuple[ClusterSpec, dict]:
    """Split a config file plus ``--set`` overrides into a model spec and experiment parameters."""
    raw = parse_kv(Path(spec_path).read_text()) if spec_path else {}
    for item in overrides:
        if "=" not in item:
            raise SpecError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = (v.strip(), None)
    schema = EXPERIMENTS[experiment]
    spec_raw = {k: v for k, v in raw.items() if k in SPEC_KEYS}
    params = {}
    for key, (value, line) in raw.items():
        if key in SPEC_KEYS:
            continue
        if key not in schema:
            raise SpecError(f"unknown key {key!r} for experiment {experiment}", field=key, line=line)
        params[key] = _convert(key, schema[key][0], value, line)
    for key, (kind, default) in schema.items():
        if key not in params:
            params[key] = None if default is None else _convert(key, kind, default, None)
    return spec_from_mapping(spec_raw), params


def make_outdir(root: str | Path, experiment: str) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now().strftime("%Y%m%dT%H%M%S")
    out = root / f"{experiment}_{stamp}"
    n = 1
    while out.exists():
        out = root / f"{experiment}_{stamp}_{n}"
        n += 1
    out.mkdir()
    (root / "latest").write_text(out.name + "\n")
    return out


class Runner:
    def __init__(self, spec: ClusterSpec, params: dict, out: Path, quiet: bool):
        self.spec = spec
        self.p = params
        self.out = out
        self.quiet = quiet

    def say(self, msg: str) -> None:
        if not self.quiet:
            print(msg, flush=True)

    def finish(self, summary: dict, checks: list[dict]) -> int:
        summary["checks"] = checks
        summary["passed"] = all(c["passed"] for c in checks)
        analysis.write_json(self.out / "summary.json", summary)
        for c in checks:
            self.say(f"check {c['name']}: {'PASS' if c['passed'] else 'FAIL'} ({c['detail']})")
        if not summary["passed"]:
            bad = [c["name"] for c in checks if not c["passed"]]
            raise CliError(EXIT_TOLERANCE, "tolerance", f"failed checks: {', '.join(bad)}", outdir=str(self.out))
        return EXIT_OK

    # experiments

    def fixed_point(self) -> int:
        res = solve_equilibrium(self.spec, self.p["scheme"], tol=self.p["tol"], damping=self.p["damping"], K=self.p["K"])
        write_equilibrium_csv(self.out / "equilibrium.csv", res.P, arrival_rate_profile(res.P, self.spec, res.scheme))
        summary = equilibrium_summary(res, self.spec)
        write_summary_json(self.out / "summary.json", summary)
        self.say(
            f"fixed_point {res.scheme} lambda={self.spec.lam:g}: mean_sojourn={res.mean_sojourn:.6f} "
            f"P1={np.round(res.P.u[:, 1], 6).tolist()} method={res.method} iterations={res.iterations}"
        )
        return EXIT_OK

    def integrate(self) -> int:
        K = self.p["K"]
        init = self.p["initial"]
        if init == "empty":
            u0 = TailState.empty(self.spec.M, K)
        elif init == "geometric":
            u0 = TailState.geometric(rho(self.spec), self.spec.M, K)
        else:
            raise SpecError(f"initial must be 'empty' or 'geometric', got {init!r}", field="initial")
        traj = integrate(u0, self.spec, self.p["scheme"], t_end=self.p["t_end"], dt=self.p["dt"], stride=self.p["stride"])
        traj.to_csv(self.out / "trajectory.csv")
        eq = solve_equilibrium(self.spec, self.p["scheme"], K=K)
        dist = metric_distance(traj.final, eq.P)
        analysis.write_json(
            self.out / "summary.json",
            {"scheme": self.p["scheme"], "spec": self.spec.as_dict(), "t_end": self.p["t_end"], "dt": self.p["dt"],
             "samples": len(traj), "distance_to_equilibrium": dist, "max_projection": traj.max_projection},
        )
        self.say(f"integrate {self.p['scheme']} t_end={self.p['t_end']:g}: distance to equilibrium {dist:.3e}")
        return EXIT_OK

    def _routing(self, scheme: str, spec: ClusterSpec):
        if scheme not in ("state_independent", "hybrid_sqd"):
            return None
        r = self.p.get("routing", "optimized")
        if isinstance(r, list):
            return tuple(r)
        return analysis.baseline_probs(spec, r, scheme)

    def simulate(self) -> int:
        p = self.p
        cfg = SimConfig(
            self.spec, p["N"], scheme=p["scheme"], routing_probs=self._routing(p["scheme"], self.spec), horizon=p["horizon"],
            warmup=p["warmup"], seed=p["seed"], job_dist=p["job_dist"], engine=p["engine"],
        )
        reps = run_replications(cfg, p["replications"])
        stats = summarize(cfg, reps)
        write_stats_json(self.out / "stats.json", stats)
        write_replication_csv(self.out / "replications.csv", reps)
        ci = stats.ci95
        self.say(
            f"simulate {cfg.scheme} N={cfg.N} lambda={self.spec.lam:g} {cfg.job_dist}: mean_sojourn={stats.mean:.4f}"
            + ("" if math.isnan(ci) else f" +/- {ci:.4f}") + f" jobs={stats.jobs_counted}"
        )
        return EXIT_OK

    def error_vs_n(self) -> int:
        p = self.p
        res = analysis.error_vs_n(self.spec, p["scheme"], p["lambdas"], p["Ns"], p["horizon"], p["replications"], p["seed"])
        analysis.write_rows_csv(self.out / "rows.csv", res.rows)
        for (lam, N), e in sorted(res.errors.items(), key=lambda x: (x[0][1], x[0][0])):
            self.say(f"error_vs_n N={N} lambda={lam:g}: relative error {e:.4f}")
        checks = []
        for N in p["Ns"]:
            if N in ERROR_BANDS:
                lo, hi = ERROR_BANDS[N]
                m = res.mean_error(N)
                checks.append({"name": f"mean_error_N{N}", "passed": bool(lo <= m <= hi), "detail": f"{m:.4f} in [{lo}, {hi}]"})
        summary = {"experiment": "error_vs_n", "spec": self.spec.as_dict(), "params": p, "failures": res.failures,
                   "mean_error": {str(N): res.mean_error(N) for N in p["Ns"]}}
        return self.finish(summary, checks)

    def scheme_comparison(self) -> int:
        p = self.p
        table = analysis.scheme_comparison(self.spec, p["lambdas"], p["N"], p["routing"], p["horizon"], p["replications"], p["seed"])
        analysis.write_rows_csv(self.out / "rows.csv", table.rows)
        for r in table.rows:
            self.say(f"scheme_comparison lambda={r.lam:g} {r.scheme}: {r.mean_sojourn:.4f} +/- {r.ci95:.4f} {r.note}")
        checks = []
        top = max(p["lambdas"])
        try:
            s1, s2 = table.one(lam=top, scheme="scheme1"), table.one(lam=top, scheme="scheme2")
            checks.append({"name": f"scheme2_le_scheme1_at_{top:g}", "passed": s2.mean_sojourn <= s1.mean_sojourn + s1.ci95 + s2.ci95,
                           "detail": f"{s2.mean_sojourn:.4f} vs {s1.mean_sojourn:.4f}"})
            if p["routing"] == "proportional":
                h = table.one(lam=top, scheme="hybrid_sqd")
                for s in (s1, s2):
                    checks.append({"name": f"{s.scheme}_beats_hybrid_at_{top:g}",
                                   "passed": s.mean_sojourn + s.ci95 < h.mean_sojourn - h.ci95,
                                   "detail": f"{s.mean_sojourn:.4f} vs {h.mean_sojourn:.4f}"})
        except KeyError as exc:
            checks.append({"name": "rows_present", "passed": False, "detail": str(exc)})
        summary = {"experiment": "scheme_comparison", "spec": self.spec.as_dict(), "params": p, "failures": table.failures}
        return self.finish(summary, checks)

    def insensitivity(self) -> int:
        p = self.p
        table = analysis.insensitivity_table(self.spec, p["lambdas"], p["N"], p["scheme"], p["horizon"], p["replications"], p["seed"])
        analysis.write_rows_csv(self.out / "rows.csv", table.rows)
        checks = []
        for lam in p["lambdas"]:
            th = table.find(lam=lam, source="theory")
            sims = table.find(lam=lam, source="simulation")
            cells = " ".join(f"{r.job_dist}={r.mean_sojourn:.4f}" for r in sims)
            self.say(f"insensitivity lambda={lam:g}: theory={th[0].mean_sojourn:.4f} {cells}" if th else f"insensitivity lambda={lam:g}: {cells}")
            if not th or not sims:
                checks.append({"name": f"rows_{lam:g}", "passed": False, "detail": "missing rows"})
                continue
            t = th[0].mean_sojourn
            worst = max(abs(r.mean_sojourn - t) / t for r in sims)
            checks.append({"name": f"theory_{lam:g}", "passed": worst <= THEORY_TOL, "detail": f"max rel. deviation {worst:.4f}"})
            vals = [r.mean_sojourn for r in sims]
            spread = (max(vals) - min(vals)) / min(vals)
            checks.append({"name": f"spread_{lam:g}", "passed": spread <= INSENSITIVITY_TOL, "detail": f"spread {spread:.4f}"})
        summary = {"experiment": "insensitivity", "spec": self.spec.as_dict(), "params": p, "failures": table.failures}
        return self.finish(summary, checks)

    def stability_sweep(self) -> int:
        p = self.p
        rows = analysis.stability_sweep(self.spec, p["lambdas"], p["N"], p["horizon"], replications=p["replications"],
                                        snap_dt=p["snap_dt"], seed=p["seed"])
        analysis.write_rows_csv(self.out / "rows.csv", rows)
        checks = []
        cap = self.spec.capacity
        for r in rows:
            self.say(f"stability_sweep lambda={r.lam:g} {r.scheme}: slope {r.slope:.4g} +/- {r.ci95:.3g} -> {r.verdict}")
            want = "stationary" if r.lam < cap else "growing"
            checks.append({"name": f"{r.scheme}_{r.lam:g}", "passed": r.verdict == want, "detail": f"{r.verdict}, expected {want}"})
        return self.finish({"experiment": "stability_sweep", "spec": self.spec.as_dict(), "params": p}, checks)

    def chaos(self) -> int:
        p = self.p
        results = []
        for N in p["Ns"]:
            cfg = SimConfig(self.spec, N, scheme=p["scheme"], horizon=p["horizon"], seed=p["seed"])
            est = chaos_diagnostic(cfg, replications=p["replications"], snap_dt=p["snap_dt"])
            results.append(est)
            self.say(f"chaos N={N} {p['scheme']}: " + " ".join(f"{k}={v:+.4f}" for k, v in est.by_kind.items()) + f" magnitude={est.magnitude:.4f}")
        analysis.write_json(self.out / "correlations.json", [
            {"N": e.N, "by_kind": e.by_kind, "magnitude": e.magnitude, "pairs": e.pairs, "kinds": e.kinds,
             "correlations": e.correlations, "samples": e.samples} for e in results
        ])
        checks = []
        if len(results) >= 2:
            small, large = results[0], results[-1]
            checks.append({"name": f"below_{CHAOS_LIMIT}_at_N{large.N}", "passed": large.magnitude < CHAOS_LIMIT, "detail": f"{large.magnitude:.4f}"})
            checks.append({"name": "decreasing_in_N", "passed": large.magnitude < small.magnitude,
                           "detail": f"{small.magnitude:.4f} -> {large.magnitude:.4f}"})
        return self.finish({"experiment": "chaos", "spec": self.spec.as_dict(), "params": p}, checks)


def describe(spec: ClusterSpec) -> str:
    r = rho(spec)
    lines = [
        f"M = {spec.M}",
        f"gamma = {list(spec.gamma)}",
        f"C = {list(spec.C)}",
        f"d = {list(spec.d)}",
        f"lambda = {spec.lam:g}",
        f"mu = {spec.mu:g}",
        f"capacity = {spec.capacity:g}",
        f"rho = {r:.6g}",
        f"verdict = {'STABLE' if r < 1 else 'UNSTABLE'}",
        "Delta = " + ", ".join(f"{x:.6g}" for x in spec.delta),
    ]
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hetlb", description="Randomized dispatch in heterogeneous processor-sharing clusters.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    run = sub.add_parser("run", help="run an experiment and write artifacts")
    run.add_argument("experiment", nargs="?", choices=sorted(EXPERIMENTS), help="experiment id (or use --experiment)")
    run.add_argument("--experiment", dest="experiment_opt", choices=sorted(EXPERIMENTS))
    run.add_argument("--spec", help="flat key-value config file")
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    run.add_argument("--out", default="runs", help="output root (default: runs)")
    run.add_argument("--seed", type=int)
    run.add_argument("--replications", type=int)
    run.add_argument("--quiet", action="store_true")
    desc = sub.add_parser("describe", help="print model summary")
    desc.add_argument("spec_path", nargs="?")
    desc.add_argument("--spec", dest="spec_opt")
    desc.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return ap


def _main(argv) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "describe":
        path = args.spec_path or args.spec_opt
        if not path and not args.overrides:
            raise CliError(EXIT_CONFIG, "usage", "describe needs a spec file")
        raw = parse_kv(Path(path).read_text()) if path else {}
        for item in args.overrides:
            k, _, v = item.partition("=")
            raw[k.strip()] = (v.strip(), None)
        spec = spec_from_mapping({k: v for k, v in raw.items() if k in SPEC_KEYS})
        print(describe(spec))
        return EXIT_OK

    experiment = args.experiment_opt or args.experiment
    if experiment is None:
        raise CliError(EXIT_CONFIG, "usage", "no experiment given")
    if args.experiment and args.experiment_opt and args.experiment != args.experiment_opt:
        raise CliError(EXIT_CONFIG, "usage", "conflicting experiment ids")
    overrides = list(args.overrides)
    for key in ("seed", "replications"):
        value = getattr(args, key)
        if value is not None:
            if key not in EXPERIMENTS[experiment]:
                raise CliError(EXIT_CONFIG, "usage", f"--{key} does not apply to {experiment}")
            overrides.append(f"{key}={value}")
    spec, params = load_plan(args.spec, experiment, overrides)
    out = make_outdir(args.out, experiment)
    (out / "spec.txt").write_text(format_spec(spec))
    analysis.write_json(out / "plan.json", {"experiment": experiment, "spec": spec.as_dict(), "params": params})
    return getattr(Runner(spec, params, out, args.quiet), experiment)()


def main(argv=None) -> int:
    try:
        return _main(sys.argv[1:] if argv is None else argv)
    except CliError as exc:
        err = {"error": exc.kind, "message": str(exc), **exc.extra}
        code = exc.code
    except (SpecError, SimConfigError) as exc:
        err = {"error": "config", "message": str(exc), "field": getattr(exc, "field", None), "line": getattr(exc, "line", None)}
        code = EXIT_CONFIG
    except FileNotFoundError as exc:
        err = {"error": "config", "message": str(exc)}
        code = EXIT_CONFIG
    except (EquilibriumError, ProjectionError) as exc:
        err = {"error": "solver", "message": str(exc), "type": type(exc).__name__}
        code = EXIT_SOLVER
    print(json.dumps(err), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
