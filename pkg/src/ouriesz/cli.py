"""Command-line entry point for the ``ouriesz`` toolkit.

Campaign subcommands (``verify``, ``weaktype``, ``counterexample``) write CSV
files plus ``manifest.json`` into ``--out`` and exit with status 0 iff their
pass criteria hold.  Evaluation subcommands (``kernel-eval``,
``semigroup-eval``, ``riesz-kernel``, ``riesz-apply``) write one CSV table to
``--out`` (a file) or to stdout.

Polynomials are JSON files ``{"n": N, "terms": [[[e1, ..., eN], coeff], ...]}``.

Models are given as ``standard:N``, ``random:N:SEED`` or the path of a JSON
file ``{"Q": [[...]], "B": [[...]], "tolerances": {...}}``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from .errors import OUError
from .gauss_core import Tolerances, build_model, random_model, standard_model
from .harness.counterexample import counterexample_run
from .harness.estimates import CATALOG, Sampler, catalog_ids, estimate_probe
from .harness.io import emit_csv, format_float, write_manifest
from .harness.weaktype import LambdaGrid, MonteCarlo, PolarGrid, weak_type_profile
from .mehler import eval_dalpha_log, expand_dalpha, log_mehler
from .riesz import RieszKernelConfig, apply_riesz, riesz_kernel_parts
from .semigroup import Poly, TestFunction, apply_semigroup, generator_apply

__all__ = ["main", "load_model"]


def load_model(spec: str):
    if spec.startswith("standard"):
        _, _, n = spec.partition(":")
        return standard_model(int(n or 1))
    if spec.startswith("random:"):
        parts = spec.split(":")
        if len(parts) != 3:
            raise ValueError("random models are written random:N:SEED")
        return random_model(np.random.default_rng(int(parts[2])), int(parts[1]))
    with open(spec, encoding="utf-8") as fh:
        doc = json.load(fh)
    tol = Tolerances(**doc["tolerances"]) if "tolerances" in doc else None
    model = build_model(np.asarray(doc["Q"], dtype=float), np.asarray(doc["B"], dtype=float), tol)
    if "n" in doc and int(doc["n"]) != model.n:
        raise ValueError(f"model file declares n={doc['n']} but Q is {model.n}x{model.n}")
    return model


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def load_poly(path: str) -> Poly:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return Poly.from_terms(int(doc["n"]), [(tuple(k), float(c)) for k, c in doc["terms"]])


def _write_table(header, rows, out) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_float(v) if isinstance(v, float) else v for v in row])
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())


def _lkv_row(name, v):
    return (name, int(v.sign), float(v.logmag), float(v.value()))


def _outdir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _cmd_verify(args) -> int:
    model = load_model(args.model)
    ids = catalog_ids() if args.suite == "all" else [args.suite]
    sampler = Sampler(A=args.A)
    out = _outdir(args.out)
    reports = []
    for eid in ids:
        rep = estimate_probe(model, eid, sampler, n_samples=args.samples, seed=args.seed)
        reports.append(rep)
        if not args.quiet:
            status = "pass" if rep.passed else "FAIL"
            print(f"{status} {eid:44s} [{rep.fitted_lower:.4g}, {rep.fitted_upper:.4g}] "
                  f"violations={rep.violations}")
    path = os.path.join(out, "estimates.csv")
    emit_csv(reports, path)
    write_manifest(os.path.join(out, "manifest.json"), "verify",
                   {"model": args.model, "suite": args.suite, "seed": args.seed, "samples": args.samples,
                    "A": args.A}, [path])
    return 0 if all(r.passed for r in reports) else 1


def _cmd_weaktype(args) -> int:
    model = load_model(args.model)
    alpha = _ints(args.alpha)
    etas = _floats(args.etas)
    if args.mode == "polar":
        integ = PolarGrid(n_s=args.n_s, n_theta=args.n_theta)
    else:
        integ = MonteCarlo(n_points=args.points)
    prof = weak_type_profile(model, alpha, etas, LambdaGrid(), integ, seed=args.seed)
    out = _outdir(args.out)
    path = os.path.join(out, "weaktype.csv")
    emit_csv(prof, path)
    write_manifest(os.path.join(out, "manifest.json"), "weaktype",
                   {"model": args.model, "alpha": alpha, "etas": etas, "mode": args.mode, "seed": args.seed,
                    "integration": vars(integ)}, [path])
    order = sum(alpha)
    target = max(order - 2, 0)
    ok = abs(prof.fit_slope - target) <= args.band and all(q >= 0 for q in prof.quasinorm)
    if not args.quiet:
        for eta, q in zip(prof.eta_grid, prof.quasinorm):
            print(f"eta={eta:g} quasinorm={q:.6g}")
        print(f"fit_slope={prof.fit_slope:.4f} (target {target} +- {args.band}) {'pass' if ok else 'FAIL'}")
    return 0 if ok else 1


def _cmd_counterexample(args) -> int:
    model = load_model(args.model)
    alpha = _ints(args.alpha)
    rep = counterexample_run(model, alpha, _floats(args.etas), seed=args.seed)
    out = _outdir(args.out)
    path = os.path.join(out, "counterexample.csv")
    emit_csv(rep, path)
    write_manifest(os.path.join(out, "manifest.json"), "counterexample",
                   {"model": args.model, "alpha": alpha, "etas": args.etas, "seed": args.seed}, [path])
    if not args.quiet:
        for r in rep.rows:
            print(f"eta={r.eta:g} floor={r.floor:.6g} box={r.box_measure_scaled:.6g} "
                  f"dominance={r.dominance_ratio:.4g}")
        print(f"t0={rep.t0:g} {'pass' if rep.passed else 'FAIL'}")
    return 0 if rep.passed else 1


def _cmd_kernel_eval(args) -> int:
    model = load_model(args.model)
    x, u = np.array(_floats(args.x)), np.array(_floats(args.u))
    rows = [_lkv_row("K_t", log_mehler(model, args.t, x, u))]
    if args.alpha:
        ledger = expand_dalpha(_ints(args.alpha), model.n)
        rows.append(_lkv_row("DalphaK_t", eval_dalpha_log(model, ledger, args.t, x, u)))
    _write_table(("quantity", "sign", "logmag", "value"), rows, args.out)
    return 0


def _cmd_semigroup_eval(args) -> int:
    model = load_model(args.model)
    f = TestFunction.polynomial(load_poly(args.poly))
    x = np.array(_floats(args.x))
    hv = apply_semigroup(model, args.t, f, x)
    row = (args.t, args.x, float(hv.value), float(hv.exact), float(generator_apply(model, f, x)),
           float(f.mean(model)))
    _write_table(("t", "x", "Htf_quadrature", "Htf_exact", "Lf", "mean_gamma_inf"), [row], args.out)
    return 0


def _cmd_riesz_kernel(args) -> int:
    model = load_model(args.model)
    cfg = RieszKernelConfig(split_time=args.split)
    x, u = np.array(_floats(args.x)), np.array(_floats(args.u))
    small, large = riesz_kernel_parts(model, _ints(args.alpha), x, u, cfg)
    whole = small + large
    rows = [_lkv_row("whole", whole), _lkv_row("small_t", small), _lkv_row("large_t", large)]
    _write_table(("part", "sign", "logmag", "value"), rows, args.out)
    return 0


def _cmd_riesz_apply(args) -> int:
    model = load_model(args.model)
    f = TestFunction.polynomial(load_poly(args.poly))
    alpha = _ints(args.alpha)
    rows = []
    for text in args.x_grid.split(";"):
        x = np.array(_floats(text))
        v = apply_riesz(model, alpha, f, x)
        rows.append((text, float(v.value), "spectral" if v.spectral is not None else "kernel"))
    _write_table(("x", "value", "route"), rows, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ouriesz", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--model", default="standard:1", help="standard:N, random:N:SEED or a JSON file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--quiet", action="store_true")

    v = sub.add_parser("verify", help="run estimate-catalog probes")
    common(v)
    v.add_argument("--suite", default="all", choices=["all"] + sorted(CATALOG), metavar="all|ID")
    v.add_argument("--samples", type=int, default=1000)
    v.add_argument("--A", type=float, default=1.0, help="local-region parameter")
    v.set_defaults(func=_cmd_verify)

    w = sub.add_parser("weaktype", help="weak-type (1,1) quasinorm profile along the drift")
    common(w)
    w.add_argument("--alpha", required=True, help="comma-separated multiindex")
    w.add_argument("--etas", default="4,5,6,7,8,9,10,11,12")
    w.add_argument("--mode", choices=["polar", "mc"], default="polar")
    w.add_argument("--n-s", dest="n_s", type=int, default=PolarGrid.n_s)
    w.add_argument("--n-theta", dest="n_theta", type=int, default=PolarGrid.n_theta)
    w.add_argument("--points", type=int, default=MonteCarlo.n_points)
    w.add_argument("--band", type=float, default=0.3)
    w.set_defaults(func=_cmd_weaktype)

    c = sub.add_parser("counterexample", help="drifting-Dirac construction for |alpha| > 2")
    common(c)
    c.add_argument("--alpha", required=True)
    c.add_argument("--etas", default="6,8,10")
    c.set_defaults(func=_cmd_counterexample)

    def evaluator(name, help_text, func):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--model", default="standard:1", help="standard:N, random:N:SEED or a JSON file")
        sp.add_argument("--out", default=None, help="CSV file (default: stdout)")
        sp.set_defaults(func=func)
        return sp

    k = evaluator("kernel-eval", "Mehler kernel and D^alpha K_t at one (t, x, u)", _cmd_kernel_eval)
    k.add_argument("--t", type=float, required=True)
    k.add_argument("--x", required=True, help="comma-separated point")
    k.add_argument("--u", required=True)
    k.add_argument("--alpha", default="")

    g = evaluator("semigroup-eval", "H_t f(x), L f(x) and the invariant mean of a polynomial",
                  _cmd_semigroup_eval)
    g.add_argument("--t", type=float, required=True)
    g.add_argument("--x", required=True)
    g.add_argument("--poly", required=True, help="polynomial JSON file")

    r = evaluator("riesz-kernel", "Riesz kernel R_alpha(x, u) and its time-split parts", _cmd_riesz_kernel)
    r.add_argument("--alpha", required=True)
    r.add_argument("--x", required=True)
    r.add_argument("--u", required=True)
    r.add_argument("--split", type=float, default=1.0)

    a = evaluator("riesz-apply", "R^(alpha) f on a grid of points (polynomial f)", _cmd_riesz_apply)
    a.add_argument("--alpha", required=True)
    a.add_argument("--poly", required=True)
    a.add_argument("--x-grid", dest="x_grid", required=True, help="points separated by ';', coordinates by ','")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OUError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
