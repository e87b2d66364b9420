"""Command-line entry point: ``itots {analyze,synthesize,sweep,simulate,verify}``.

Exit status is 0 for a positive result, 2 for a well-formed negative one
(infeasible, not converged, a failing check, a blown-up path) and 1 for
errors such as unreadable or malformed configuration.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError
from .lmi import DEFAULT_EPS, SolveOptions
from .lyapcheck import (LyapunovEvaluator, PreconditionViolated, check_generator, check_gradient,
                        check_hessian, check_hessian_bound, check_path_independence,
                        check_positive, constant_certificate, sample_report)
from .sdesim import SimConfig, monte_carlo, scenario_csv
from .stability import (COROLLARY1, METHODS, THEOREM1, LineIntegralCertificate, ParamSlot,
                        SweepAxis, analyze, sweep)
from .synthesis import (SynthesisOptions, SynthesisProblem, SynthesisStatus, synthesize,
                        verify_closed_loop)
from .tsmodel import BetaBounds, TSModel, beta_bounds, validate

log = logging.getLogger("itots")

EXIT_OK, EXIT_ERROR, EXIT_NEGATIVE = 0, 1, 2


class UsageError(ValueError):
    pass


# -- shared plumbing ----------------------------------------------------------

class Run:
    """Parsed arguments plus the loaded configuration document."""

    def __init__(self, args):
        self.args = args
        self.doc = cfgmod.load(args.config)
        self.out = Path(args.out)
        self.overrides = {}
        for item in args.param:
            name, sep, val = item.partition("=")
            if not sep:
                raise UsageError(f"--param expects NAME=VALUE, got {item!r}")
            try:
                self.overrides[name.strip()] = float(val)
            except ValueError:
                raise UsageError(f"--param {name}: {val!r} is not a number") from None

    @property
    def eps(self) -> float:
        if self.args.eps is not None:
            return self.args.eps
        return self.doc.number("solver", "eps", default=DEFAULT_EPS)

    @property
    def opts(self) -> SolveOptions:
        base = SolveOptions()
        tol = self.args.tol_feas if self.args.tol_feas is not None else \
            self.doc.number("solver", "tol_feas", default=base.tol_feas)
        return SolveOptions(tol_feas=tol,
                            tol_gap=self.doc.number("solver", "tol_gap", default=base.tol_gap),
                            max_iter=self.doc.number("solver", "max_iter", default=base.max_iter,
                                                     kind=int))

    def seed(self, section: str, default: int = 0) -> int:
        if self.args.seed is not None:
            return self.args.seed
        return self.doc.number(section, "seed", default=default, kind=int)

    def model(self, require_full: bool = True) -> TSModel:
        model = cfgmod.build_model(self.doc, self.overrides)
        issues = validate(model, require_full=require_full)
        if issues:
            raise ConfigError("invalid model: " + "; ".join(issues), None, self.doc.source)
        return model

    def beta(self, model: TSModel, section: str) -> BetaBounds:
        override = getattr(self.args, "beta", None)
        raw = override if override is not None else self.doc.get(section, "beta", "auto")
        if str(raw).strip() == "auto":
            return beta_bounds(model)
        try:
            total = float(raw)
        except ValueError:
            raise UsageError(f"beta must be 'auto' or a number, got {raw!r}") from None
        if total < 0:
            raise UsageError("beta must be nonnegative")
        return BetaBounds.uniform(model.s, model.n, total / (model.s * model.n))

    def write(self, name: str, text: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        path.write_text(text, encoding="utf-8")
        log.info("wrote %s", path)
        return path


def _verdict(ok: bool) -> str:
    return "pass" if ok else "fail"


def lyap_summary(ev: LyapunovEvaluator, gains=None, samples: int = 10_000, seed: int = 0) -> dict:
    """Sampled Hessian-bound and generator checks used after every solve."""
    out = {}
    try:
        hb = check_hessian_bound(ev, samples=samples, seed=seed)
        out["hessian_bound"] = _verdict(hb["ok"])
        out["hessian_bound_max_gap"] = hb["max_violation"]
    except PreconditionViolated as exc:
        out["hessian_bound"] = f"precondition violated: {exc}"
    gen = check_generator(ev, gains=gains, samples=samples, seed=seed)
    out["generator"] = _verdict(gen["ok"])
    out["generator_max_normalized"] = gen["max_normalized"]
    out["samples"] = samples
    return out


def _invariant_entries(inv: dict) -> dict:
    """Minimum eigenvalues keyed ``P1 pd``, ``D-D1 psd``: keys must not contain '='."""
    return {k.replace(">=0", " psd").replace(">0", " pd"): float(v) for k, v in inv.items()}


def _params_used(run: Run) -> dict:
    params = cfgmod.model_params(run.doc, run.overrides)
    used = cfgmod.model_parameters_used(run.doc)
    return {k: float(v) for k, v in sorted(params.items()) if k in used}


# -- analyze --------------------------------------------------------------------

def cmd_analyze(run: Run) -> int:
    method = run.args.method or run.doc.get("analysis", "method", THEOREM1)
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    model = run.model(require_full=method == THEOREM1)
    beta = run.beta(model, "analysis")
    res = analyze(model, method, beta if method == THEOREM1 else None, run.eps, run.opts)
    report = {"method": method, "status": res.status.value,
              "feasible": "true" if res.feasible else "false", "eps": run.eps}
    if method == THEOREM1:
        report["beta"] = beta.total
    report.update(_params_used(run))
    sections = {"analysis": report}
    if res.invariants:
        sections["invariants"] = _invariant_entries(res.invariants)
    if res.feasible:
        run.write("certificate.txt", cfgmod.write_document(
            cfgmod.certificate_sections(res.certificate, method)))
        ev = _evaluator(model, method, res.certificate)
        seed = run.seed("analysis")
        sections["verification"] = lyap_summary(ev, seed=seed)
        run.write("samples.csv", sample_report(ev, samples=100, seed=seed))
    run.write("report.txt", cfgmod.write_document(sections))
    print(f"{method}: {res.status.value} ({'feasible' if res.feasible else 'no certificate'})")
    return EXIT_OK if res.feasible else EXIT_NEGATIVE


def _evaluator(model: TSModel, method: str, cert) -> LyapunovEvaluator:
    if method == COROLLARY1:
        return LyapunovEvaluator(model, constant_certificate(model, cert.P), beta=0.0)
    return LyapunovEvaluator(model, cert)


# -- synthesize -------------------------------------------------------------------

def cmd_synthesize(run: Run) -> int:
    model = run.model()
    if model.p == 0:
        raise UsageError("synthesis needs input matrices (p > 0)")
    beta = run.beta(model, "synthesis")
    n_max = run.args.n_max if run.args.n_max is not None else \
        run.doc.number("synthesis", "n_max", default=50, kind=int)
    ccl_tol = run.args.ccl_tol if run.args.ccl_tol is not None else \
        run.doc.number("synthesis", "ccl_tol", default=1e-4)
    if n_max < 0 or ccl_tol <= 0:
        raise UsageError("n_max must be >= 0 and ccl_tol > 0")
    opts = SynthesisOptions(ccl_tol=ccl_tol, n_max=n_max, eps=run.eps, solver=run.opts)

    def progress(row):
        log.info("iteration %d: objective %.6g, error %.3g", row.iteration, row.objective, row.error)

    result = synthesize(SynthesisProblem(model, beta, opts), callback=progress)
    run.write("trace.csv", result.trace_csv())
    report = {"status": result.status.value, "iterations": len(result.trace) - 1,
              "beta": beta.total, "ccl_tol": ccl_tol, "n_max": n_max}
    if result.trace:
        report["final_error"] = result.trace[-1].error
    if result.message:
        report["message"] = result.message
    sections = {"synthesis": report}
    code = EXIT_NEGATIVE
    if result.status in (SynthesisStatus.SOLVER_FAILURE, SynthesisStatus.NUMERICAL_FAILURE):
        code = EXIT_ERROR
    if result.converged:
        run.write("gains.txt", cfgmod.write_document(
            cfgmod.gains_sections(result.gains, result.status.value)))
        run.write("synthesis.txt", cfgmod.write_document({"matrices": dict(result.matrices)}))
        ver = verify_closed_loop(model, result.gains, beta, run.eps, run.opts)
        sections["closed_loop"] = {"status": ver.status.value,
                                   "feasible": "true" if ver.feasible else "false",
                                   **_invariant_entries(ver.invariants)}
        code = EXIT_NEGATIVE
        if ver.feasible:
            doc = cfgmod.certificate_sections(ver.certificate, "theorem2")
            doc.update(cfgmod.gains_sections(result.gains))
            run.write("certificate.txt", cfgmod.write_document(doc))
            ev = LyapunovEvaluator(model, ver.certificate)
            summary = lyap_summary(ev, gains=result.gains, seed=run.seed("synthesis"))
            sections["verification"] = summary
            if summary["generator"] == "pass" and summary["hessian_bound"] == "pass":
                code = EXIT_OK
    run.write("report.txt", cfgmod.write_document(sections))
    print(f"synthesis: {result.status.value} after {report['iterations']} iteration(s)")
    if result.converged:
        for j, K in enumerate(result.gains, start=1):
            print(f"K{j} = {cfgmod.fmt_matrix(K)}")
    return code


# -- sweep ----------------------------------------------------------------------

def sweep_slots(doc: cfgmod.Document, names) -> list:
    """Locate each sweep parameter as a whole entry of one model matrix."""
    import ast

    found = {name: [] for name in names}
    for key, e in doc.section("model").items():
        parts = key.split()
        if parts[0] not in ("A", "B", "C") or len(parts) != 2:
            continue
        tree = ast.parse(e.value.strip(), mode="eval").body
        rows = tree.elts if isinstance(tree, ast.List) else []
        for r, row in enumerate(rows, start=1):
            for c, node in enumerate(getattr(row, "elts", []), start=1):
                if isinstance(node, ast.Name) and node.id in found:
                    found[node.id].append(ParamSlot(node.id, parts[0], int(parts[1]), r, c))
                elif any(isinstance(sub, ast.Name) and sub.id in found for sub in ast.walk(node)):
                    raise ConfigError(f"sweep parameter must be a whole matrix entry in {key}",
                                      e.line, doc.source)
    slots = []
    for name in names:
        if len(found[name]) != 1:
            raise ConfigError(f"sweep parameter {name!r} must appear in exactly one matrix "
                              f"entry (found {len(found[name])})", None, doc.source)
        slots.append(found[name][0])
    return slots


def sweep_axes(doc: cfgmod.Document) -> list:
    axes = []
    for name, e in doc.section("sweep").items():
        if name in ("beta", "workers"):
            continue
        try:
            start, stop, step = (float(v) for v in e.value.split())
        except ValueError:
            raise doc.error(f"sweep axis {name}: expected 'start stop step'", e) from None
        if step <= 0 or stop < start:
            raise doc.error(f"sweep axis {name}: need step > 0 and stop >= start", e)
        axes.append(SweepAxis(name, start, stop, step))
    if len(axes) != 2:
        raise doc.error(f"[sweep] must define exactly two parameter axes, found {len(axes)}")
    return axes


def cmd_sweep(run: Run) -> int:
    doc = run.doc
    axes = sweep_axes(doc)
    slots = sweep_slots(doc, [a.name for a in axes])
    # any in-range value works for the template; cells overwrite the slots
    template = cfgmod.build_model(doc, {a.name: a.start for a in axes} | run.overrides)
    issues = validate(template)
    if issues:
        raise ConfigError("invalid model: " + "; ".join(issues), None, doc.source)
    beta = run.beta(template, "sweep")
    workers = run.args.workers or doc.number("sweep", "workers", default=os.cpu_count() or 1,
                                             kind=int)
    result = sweep(template, slots, axes, beta, run.eps, run.opts, workers=workers)
    try:
        run.write("region.csv", result.to_csv())
    except OSError as exc:
        print(f"error: cannot write region.csv: {exc}", file=sys.stderr)
        return EXIT_ERROR
    counts = result.counts()
    print(" ".join(f"{k}={v}" for k, v in counts.items()) +
          f" inclusion_violations={len(result.inclusion_violations())}")
    return EXIT_OK


# -- simulate -------------------------------------------------------------------

def sim_config(run: Run, gains) -> tuple:
    doc = run.doc
    T = run.args.horizon or doc.number("simulate", "T", default=15.0)
    N = doc.number("simulate", "N", default=256, kind=int)
    R = doc.number("simulate", "R", default=2, kind=int)
    if run.args.paths:
        counts = run.args.paths
    else:
        raw = doc.get("simulate", "paths", "50")
        try:
            counts = [int(v) for v in raw.split()]
        except ValueError:
            raise UsageError(f"[simulate] paths: expected integers, got {raw!r}") from None
    if run.args.x0:
        starts = cfgmod.parse_matrix(run.args.x0)
    elif "x0" in doc.section("simulate"):
        starts = cfgmod.matrix_entry(doc, "simulate", "x0")
    else:
        from .sdesim import REFERENCE_INITIAL_STATES
        starts = np.array(REFERENCE_INITIAL_STATES)
    seed = run.seed("simulate")
    try:
        configs = [SimConfig(T=T, N=N, R=R, initial_states=starts.tolist(), paths=m, seed=seed,
                             gains=gains) for m in counts]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return configs, starts


def cmd_simulate(run: Run) -> int:
    model = run.model()
    gains = None
    if not run.args.open_loop and model.p > 0:
        path = run.args.gains or run.doc.get("simulate", "gains")
        if path is None:
            raise UsageError("closed-loop simulation needs a gains file (--gains) "
                             "or --open-loop")
        gpath = Path(path) if run.args.gains else run.doc.resolve_path(path)
        if not gpath.exists():
            raise UsageError(f"gains file not found: {gpath}")
        gains = cfgmod.read_gains(cfgmod.load(gpath), model)
    configs, starts = sim_config(run, gains)
    if starts.shape[1] != model.n:
        raise UsageError(f"initial states have {starts.shape[1]} components, model has n={model.n}")
    lines = ["paths,start,blowups,mean_final_norm,median_final_norm"]
    blown = 0
    for cfg in configs:
        ensembles = [monte_carlo(model, cfg, x0) for x0 in starts]
        run.write(f"ensemble_M{cfg.paths}.csv", scenario_csv(ensembles))
        for s, ens in enumerate(ensembles):
            summ = ens.summary()
            blown += summ["blowups"]
            lines.append(f"{cfg.paths},{s},{summ['blowups']},{summ['mean_final_norm']:.12e},"
                         f"{summ['median_final_norm']:.12e}")
    run.write("summary.csv", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_NEGATIVE if blown else EXIT_OK


# -- verify ----------------------------------------------------------------------

def cmd_verify(run: Run) -> int:
    model = run.model()
    path = run.args.certificate or run.doc.get("verify", "certificate")
    if path is None:
        raise UsageError("verify needs a certificate file (--certificate)")
    cpath = Path(path) if run.args.certificate else run.doc.resolve_path(path)
    if not cpath.exists():
        raise UsageError(f"certificate file not found: {cpath}")
    cdoc = cfgmod.load(cpath)
    method, cert = cfgmod.read_certificate(cdoc, model)
    gains = cfgmod.read_gains(cdoc, model) if cdoc.has("gains") else None
    ev = _evaluator(model, method, cert)
    seed = run.seed("verify")
    samples = run.args.samples
    results = {"method": method}
    failures = []

    def record(name, ok, **metrics):
        results[name] = _verdict(ok)
        for k, v in metrics.items():
            results[f"{name}_{k}"] = v
        if not ok:
            failures.append(name)

    r = check_path_independence(ev, seed=seed)
    record("path_independence", r["ok"], max_rel=r["max_rel"])
    r = check_gradient(ev, seed=seed)
    record("gradient", r["ok"], max_rel=r["max_rel"])
    r = check_hessian(ev, seed=seed)
    record("hessian", r["ok"], max_rel=r["max_rel"])
    if method == COROLLARY1:
        X = np.random.default_rng(seed).uniform(-model.box, model.box, size=(100, model.n))
        err = max(abs(ev.V(x) - x @ cert.P @ x) for x in X)
        record("quadratic", err <= 1e-10, max_abs=float(err))
    try:
        r = check_hessian_bound(ev, samples=samples, seed=seed)
        record("hessian_bound", r["ok"], max_gap=r["max_violation"])
    except PreconditionViolated as exc:
        results["hessian_bound"] = f"precondition violated: {exc}"
        failures.append("hessian_bound")
    r = check_generator(ev, gains=gains, samples=samples, seed=seed)
    record("generator", r["ok"], max_normalized=r["max_normalized"])
    r = check_positive(ev, seed=seed)
    record("positive", r["ok"], min_V=r["min_V"])
    results["first_failure"] = failures[0] if failures else "none"
    run.write("verify.txt", cfgmod.write_document({"verify": results}))
    if failures:
        print(f"verify: FAIL (first failing suite: {failures[0]}: {results[failures[0]]})")
        return EXIT_NEGATIVE
    print("verify: all suites pass")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True,
                        help="configuration file, or a bundled name: example1, example2")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--eps", type=float, help="strict-inequality margin (default 1e-6)")
    common.add_argument("--tol-feas", type=float, help="feasibility tolerance of the recheck")
    common.add_argument("--param", action="append", default=[], metavar="NAME=VALUE",
                        help="set a model parameter (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="itots", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", parents=[common], help="open-loop stability test")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--beta", help="'auto' or the total derivative bound")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("synthesize", parents=[common], help="state-feedback gain synthesis")
    p.add_argument("--beta")
    p.add_argument("--n-max", type=int)
    p.add_argument("--ccl-tol", type=float)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("sweep", parents=[common], help="two-parameter stability region")
    p.add_argument("--beta")
    p.add_argument("--workers", type=int, help="worker processes (default: CPU count)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("simulate", parents=[common], help="Euler-Maruyama Monte Carlo")
    p.add_argument("--gains", help="gains file written by synthesize")
    p.add_argument("--open-loop", action="store_true", help="simulate without feedback")
    p.add_argument("--paths", type=int, nargs="+", help="ensemble sizes, e.g. 2 10 30 50")
    p.add_argument("--x0", help="initial states as a bracketed row list")
    p.add_argument("--horizon", type=float, help="final time T (overrides the config)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", parents=[common], help="numerical certificate checks")
    p.add_argument("--certificate", help="certificate file written by analyze or synthesize")
    p.add_argument("--samples", type=int, default=10_000)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(Run(args))
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
