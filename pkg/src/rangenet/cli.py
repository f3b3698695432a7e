"""Command-line driver: ``rangenet {decompose,sketchy,randsvd,compare,gen,oracle}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import baselines, metrics, solver, synth
from .matcore import ORACLE_CAP, SvdFactors, jacobi_svd
from .stream import CenteredSource, compute_mean_pass, materialize, open_source, write_binary

log = logging.getLogger("rangenet")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2


@dataclass
class RunConfig:
    input: str
    format: str = "auto"
    rank: int = 10
    batch_rows: int = 64
    lr: float = 1e-2
    beta1: float = 0.99
    beta2: float = 0.999
    lambda_orth: float = 1.0
    lambda_diag: float = 1.0
    max_passes_s1: int = 5
    max_passes_s2: int = 20
    steps_per_pass: int = 2000
    tail_tol: float = 1e-9
    orth_tol: float = 1e-6
    diag_tol: float = 1e-8
    seed: int = 42
    precision: str = "f64"
    center: bool = False
    order: str = "sequential"
    output: str = "out"

    def validate(self):
        if self.rank < 1:
            raise ValueError("--rank must be >= 1")
        for name in ("tail_tol", "orth_tol", "diag_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"--{name.replace('_', '-')} must be > 0")

    def stage1(self, seed=None) -> solver.Stage1Config:
        return solver.Stage1Config(
            lr=self.lr, beta1=self.beta1, beta2=self.beta2, lambda_orth=self.lambda_orth,
            max_passes=self.max_passes_s1, steps_per_pass=self.steps_per_pass or None,
            loss_tol=self.tail_tol, orth_tol=self.orth_tol,
            seed=self.seed if seed is None else seed, precision=self.precision)

    def stage2(self, seed=None) -> solver.Stage2Config:
        return solver.Stage2Config(
            lambda_diag=self.lambda_diag, max_passes=self.max_passes_s2,
            orth_tol=self.diag_tol, diag_tol=self.diag_tol,
            seed=self.seed if seed is None else seed, precision=self.precision)


def _centered(src):
    return CenteredSource(src, compute_mean_pass(src))


def _open(cfg: RunConfig):
    return open_source(cfg.input, cfg.format, batch_rows=cfg.batch_rows, order=cfg.order,
                       seed=cfg.seed)


def write_factors(outdir, f: SvdFactors) -> None:
    os.makedirs(outdir, exist_ok=True)
    write_binary(os.path.join(outdir, "U.bin"), f.u)
    write_binary(os.path.join(outdir, "V.bin"), f.v)
    with open(os.path.join(outdir, "S.csv"), "w") as fh:
        for s in f.sigma:
            fh.write(f"{float(s)!r}\n")


def write_report(outdir, report: dict) -> None:
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _clean(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, float) and not np.isfinite(v):
            v = None
        out[k] = v
    return out


def run_decompose(cfg: RunConfig):
    with _open(cfg) as src:
        m, n = src.shape
        res = solver.decompose(src, cfg.rank, cfg.stage1(), cfg.stage2(), center=cfg.center)
    rep1, rep2 = res.stage1, res.stage2
    report = {
        "command": "decompose",
        "input": cfg.input,
        "shape": [m, n],
        "rank": cfg.rank,
        "converged": res.converged,
        "passes_used": rep1.passes_used + rep2.passes_used,
        "data_passes": rep1.data_passes + rep2.data_passes + 1 + int(cfg.center),
        "final_tail_energy": rep1.final_tail_energy,
        "final_orth_residual": rep1.final_orth_residual,
        "stage1": _clean(rep1.summary()),
        "stage2": _clean(rep2.summary()),
        "parameter_memory": cfg.rank * (n + cfg.rank),
        "sigma": res.factors.sigma.tolist(),
        "centered": cfg.center,
        "wall_time": res.wall_time,
        "config": asdict(cfg),
    }
    return res.factors, report


def cmd_decompose(cfg: RunConfig) -> int:
    factors, report = run_decompose(cfg)
    write_factors(cfg.output, factors)
    write_report(cfg.output, report)
    if not report["converged"]:
        log.warning("did not converge within the pass budget; factors are best effort")
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def run_sketchy(cfg: RunConfig, seed=None):
    t0 = time.perf_counter()
    with _open(cfg) as src:
        m, n = src.shape
        factors, state = baselines.sketchy_run(src, cfg.rank, seed=cfg.seed if seed is None else seed)
    est = metrics.memory_estimates(m, n, cfg.rank)
    report = {
        "command": "sketchy",
        "input": cfg.input,
        "shape": [m, n],
        "rank": cfg.rank,
        "k": state.k,
        "s": state.s,
        "sketchy_peak": est.sketchy_peak,
        "state_scalars": state.scalar_count(),
        "parameter_memory": est.rangenet_params,
        "sigma": factors.sigma.tolist(),
        "data_passes": 1,
        "wall_time": time.perf_counter() - t0,
    }
    return factors, report


def cmd_sketchy(cfg: RunConfig) -> int:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", baselines.SketchSizeWarning)
        factors, report = run_sketchy(cfg)
    report["warnings"] = [str(w.message) for w in caught]
    for w in caught:
        log.warning("%s", w.message)
    write_factors(cfg.output, factors)
    write_report(cfg.output, report)
    return EXIT_OK


def cmd_randsvd(cfg: RunConfig, oversample: int, power_iters: int) -> int:
    t0 = time.perf_counter()
    with _open(cfg) as src:
        m, n = src.shape
        factors = baselines.randsvd(src, cfg.rank, oversample, power_iters, cfg.seed)
    report = {
        "command": "randsvd",
        "input": cfg.input,
        "shape": [m, n],
        "rank": cfg.rank,
        "oversample": oversample,
        "power_iters": power_iters,
        "sigma": factors.sigma.tolist(),
        "wall_time": time.perf_counter() - t0,
    }
    write_factors(cfg.output, factors)
    write_report(cfg.output, report)
    return EXIT_OK


def _run_method(cfg: RunConfig, method: str, seed: int):
    """Returns ``(factors, converged, wall_time)`` for one seeded run."""
    t0 = time.perf_counter()
    converged = True
    if method == "rangenet":
        with _open(cfg) as src:
            res = solver.decompose(src, cfg.rank, cfg.stage1(seed), cfg.stage2(seed),
                                   center=cfg.center)
        factors, converged = res.factors, res.converged
    elif method == "sketchy":
        with _open(cfg) as src:
            if cfg.center:
                src = _centered(src)
            factors, _ = baselines.sketchy_run(src, cfg.rank, seed=seed)
    elif method.startswith("randsvd-q"):
        q = int(method[len("randsvd-q"):])
        with _open(cfg) as src:
            if cfg.center:
                src = _centered(src)
            factors = baselines.randsvd(src, cfg.rank, 10, q, seed)
    else:
        raise ValueError(f"unknown method {method!r}")
    return factors, converged, time.perf_counter() - t0


METRIC_FIELDS = ("frob_err", "spectral_err", "chi2", "tail_energy", "relative_tail_energy",
                 "scree_max")


def cmd_compare(cfg: RunConfig, methods: list[str], runs: int) -> int:
    with _open(cfg) as src:
        x = materialize(src)
    if cfg.center:
        x = x - x.mean(axis=0)
    m, n = x.shape
    notes = []
    oracle = None
    if min(m, n) <= ORACLE_CAP:
        oracle = jacobi_svd(x)
    else:
        notes.append("oracle cap exceeded: metrics needing X_r were skipped")

    jobs = [(meth, i, cfg.seed + i) for meth in methods for i in range(runs)]
    for meth in methods:
        if meth not in ("rangenet", "sketchy") and not meth.startswith("randsvd-q"):
            raise ValueError(f"unknown method {meth!r}")
    threads = int(os.environ.get("RANGENET_THREADS", "1") or 1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", baselines.SketchSizeWarning)
        with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
            results = list(pool.map(lambda j: _run_method(cfg, j[0], j[2]), jobs))

    rows = []
    for (meth, i, seed), (factors, converged, wall) in zip(jobs, results):
        row = {"method": meth, "run": i, "seed": seed, "converged": converged,
               "wall_time": round(wall, 6)}
        if oracle is not None:
            try:
                rep = metrics.evaluate(x, factors, cfg.rank, oracle)
                row.update(frob_err=rep.frob_err, spectral_err=rep.spectral_err, chi2=rep.chi2,
                           tail_energy=rep.tail_energy,
                           relative_tail_energy=rep.relative_tail_energy,
                           scree_max=max(rep.scree))
            except metrics.MetricError as exc:
                notes.append(f"{meth} run {i}: {exc}")
        rows.append(row)

    os.makedirs(cfg.output, exist_ok=True)
    cols = ["method", "run", "seed", "converged", *METRIC_FIELDS]
    with open(os.path.join(cfg.output, "comparison.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k) for k in cols})

    summary = {}
    for meth in methods:
        mine = [r for r in rows if r["method"] == meth]
        agg = {}
        for key in METRIC_FIELDS:
            vals = [r[key] for r in mine if r.get(key) is not None]
            if vals:
                agg[key] = {"min": float(np.min(vals)), "median": float(np.median(vals)),
                            "max": float(np.max(vals))}
        agg["converged_runs"] = sum(bool(r["converged"]) for r in mine)
        summary[meth] = agg
    out = {"command": "compare", "input": cfg.input, "shape": [m, n], "rank": cfg.rank,
           "runs": runs, "methods": summary, "per_run": rows, "notes": notes,
           "parameter_memory": cfg.rank * (n + cfg.rank)}
    with open(os.path.join(cfg.output, "metrics.json"), "w") as fh:
        json.dump(out, fh, indent=2, default=_json_default)
        fh.write("\n")
    return EXIT_OK if all(r["converged"] for r in rows) else EXIT_NOT_CONVERGED


def cmd_gen(args) -> int:
    kind = args.kind
    if kind == "linear-decay":
        x = synth.gen_linear_decay(args.m, args.n, args.f)
    elif kind == "spectrum":
        sig = [float(s) for s in args.sigmas.split(",")] if args.sigmas else []
        x = synth.gen_from_spectrum(synth.SpectrumSpec(args.m, args.n, sig, args.basis, args.seed))
    elif kind == "low-rank-noise":
        x = synth.gen_low_rank_plus_noise(args.m, args.n, args.f, args.noise_scale, args.seed)
    elif kind == "pca":
        x = synth.gen_pca_fixture(args.m, args.n, args.seed)
    else:  # pragma: no cover - argparse restricts choices
        raise ValueError(kind)
    if args.output.endswith(".csv"):
        np.savetxt(args.output, x, delimiter=",", fmt="%.17g")
    else:
        write_binary(args.output, x, args.dtype)
    return EXIT_OK


def cmd_oracle(cfg: RunConfig) -> int:
    with _open(cfg) as src:
        x = materialize(src)
    if cfg.center:
        x = x - x.mean(axis=0)
    f = jacobi_svd(x)
    r = min(cfg.rank, f.rank)
    f = f.truncate(r)
    write_factors(cfg.output, f)
    write_report(cfg.output, {"command": "oracle", "input": cfg.input, "shape": list(x.shape),
                              "rank": r, "sigma": f.sigma.tolist()})
    return EXIT_OK


def _add_run_flags(p: argparse.ArgumentParser, *, training: bool) -> None:
    d = RunConfig(input="")
    p.add_argument("--input", required=True)
    p.add_argument("--format", default=d.format, choices=["auto", "binary", "csv", "edges"])
    p.add_argument("--rank", type=int, default=d.rank)
    p.add_argument("--batch-rows", type=int, default=d.batch_rows)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--order", default=d.order, choices=["sequential", "shuffled"])
    p.add_argument("--center", action="store_true")
    p.add_argument("--output", default=d.output)
    if training:
        p.add_argument("--lr", type=float, default=d.lr)
        p.add_argument("--beta1", type=float, default=d.beta1)
        p.add_argument("--beta2", type=float, default=d.beta2)
        p.add_argument("--lambda-orth", type=float, default=d.lambda_orth)
        p.add_argument("--lambda-diag", type=float, default=d.lambda_diag)
        p.add_argument("--max-passes-s1", type=int, default=d.max_passes_s1)
        p.add_argument("--max-passes-s2", type=int, default=d.max_passes_s2)
        p.add_argument("--steps-per-pass", type=int, default=d.steps_per_pass,
                       help="optimiser steps per Stage-1 pass; 0 = one traversal")
        p.add_argument("--tail-tol", type=float, default=d.tail_tol)
        p.add_argument("--orth-tol", type=float, default=d.orth_tol)
        p.add_argument("--diag-tol", type=float, default=d.diag_tol)
        p.add_argument("--precision", default=d.precision, choices=["f64", "f32"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rangenet", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    _add_run_flags(sub.add_parser("decompose", help="two-stage streaming SVD"), training=True)
    _add_run_flags(sub.add_parser("sketchy", help="single-pass SketchySVD"), training=False)
    p = sub.add_parser("randsvd", help="randomized SVD")
    _add_run_flags(p, training=False)
    p.add_argument("--oversample", type=int, default=10)
    p.add_argument("--power-iters", type=int, default=0)
    p = sub.add_parser("compare", help="seeded multi-run comparison against the oracle")
    _add_run_flags(p, training=True)
    p.add_argument("--methods", default="rangenet,sketchy,randsvd-q0,randsvd-q5")
    p.add_argument("--runs", type=int, default=5)
    _add_run_flags(sub.add_parser("oracle", help="dense Jacobi SVD of a small input"),
                   training=False)

    g = sub.add_parser("gen", help="write a synthetic fixture")
    g.add_argument("--kind", required=True,
                   choices=["linear-decay", "spectrum", "low-rank-noise", "pca"])
    g.add_argument("--m", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--f", type=int, default=1)
    g.add_argument("--sigmas", default="")
    g.add_argument("--basis", default="random", choices=["random", "canonical"])
    g.add_argument("--noise-scale", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dtype", default="f64", choices=["f64", "f32"])
    g.add_argument("--output", required=True)
    return ap


def _config(args) -> RunConfig:
    fields = RunConfig.__dataclass_fields__
    cfg = RunConfig(**{k: v for k, v in vars(args).items() if k in fields})
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors; 2 is reserved for non-convergence here.
        return EXIT_OK if not exc.code else EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "gen":
            return cmd_gen(args)
        cfg = _config(args)
        if args.command == "decompose":
            return cmd_decompose(cfg)
        if args.command == "sketchy":
            return cmd_sketchy(cfg)
        if args.command == "randsvd":
            return cmd_randsvd(cfg, args.oversample, args.power_iters)
        if args.command == "compare":
            methods = [m.strip() for m in args.methods.split(",") if m.strip()]
            return cmd_compare(cfg, methods, args.runs)
        if args.command == "oracle":
            return cmd_oracle(cfg)
    except (OSError, ValueError, RuntimeError) as exc:
        log.error("%s", exc)
        return EXIT_ERROR
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
