"""Config-driven command line runner.

Each subcommand reads ``--config`` (TOML or JSON), writes its artifacts
to ``<outdir>/<subcommand>/<run-id>/`` together with ``manifest.json``,
and exits with 0 on success, 1 on a config error, 2 on a numerical
abort and 3 on an I/O error. ``ECFM_THREADS`` caps the worker count.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load
from .dynamics import IntegrationError
from .measures import GaussianMixture, ModeSet, TimeGrid

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
MANIFEST_SCHEMA = "ecfm-manifest-v1"


def workers(requested: int) -> int:
    cap = os.environ.get("ECFM_THREADS")
    if cap is None:
        return max(1, requested)
    try:
        return max(1, min(requested, int(cap)))
    except ValueError:
        raise ConfigError(f"ECFM_THREADS:1: not an integer: {cap!r}") from None


def _problem(cfg: ExperimentConfig):
    from .trainer import two_gaussian_problem
    p = cfg.problem
    return two_gaussian_problem(p.shift, p.std, p.horizon, p.n_times, p.n_centers, p.bandwidth)


def _modes(cfg: ExperimentConfig):
    sets = [ModeSet(m["kind"], dict(m.get("params", {})), m.get("label", f"mode{i}"))
            for i, m in enumerate(cfg.problem.modes)]
    floors = [float(m.get("floor", 0.0)) for m in cfg.problem.modes]
    targets = {s.label: float(m["target"]) for s, m in zip(sets, cfg.problem.modes) if "target" in m}
    return sets, floors, targets


def _trainer_config(cfg: ExperimentConfig, budget: float | None = None, robust=None, seed=None):
    from .trainer import TrainerConfig
    t = cfg.train
    grid = TimeGrid.uniform(cfg.problem.horizon, cfg.problem.n_times)
    sets, floors, _ = _modes(cfg)
    lam = t.budget if budget is None else budget
    return TrainerConfig(grid=grid, budgets=np.full(len(grid), lam), rho=t.rho, alpha0=t.alpha0,
                         zeta0=t.zeta0, lambda_bounds=(t.lambda_min, t.lambda_max),
                         batch=t.batch, robust=t.robust if robust is None else robust,
                         confidence=t.confidence, max_outer=t.max_outer,
                         seed=cfg.seed if seed is None else seed, substeps=t.substeps,
                         divergence=t.divergence, n_probes=t.n_probes,
                         mode_sets=tuple(sets), mode_floors=tuple(floors))


def _load_field(cfg: ExperimentConfig, path: str):
    from .fields import RbfField
    return RbfField.from_json(cfg.resolve(path).read_text())


# ---------------------------------------------------------------- commands


def cmd_train(cfg: ExperimentConfig) -> dict:
    from .experiments import series_from_eval
    from .trainer import evaluate, train
    prob = _problem(cfg)
    tc = _trainer_config(cfg)
    res = train(prob, tc)
    ev = evaluate(res.field, prob, tc, batch=cfg.train.eval_batch)
    series = series_from_eval(tc.grid, ev.rates, ev.std_errors, cfg.train.confidence)
    return {"history.ndjson": res.history.to_ndjson(), "field.json": res.field.to_json() + "\n",
            "rates.csv": series.to_csv(),
            "summary.json": _dump({"objective": ev.objective, "action": ev.action,
                                   "max_residual": float(np.max(ev.residuals)),
                                   "budget": cfg.train.budget})}


def cmd_collapse(cfg: ExperimentConfig) -> dict:
    from .collapse_lab import halving_sequence, run_collapse_sequence, summary_json
    c = cfg.collapse
    params = halving_sequence(c.n_members, c.eps0, c.tau0, c.a, c.sigma, profile=c.profile)
    diags = run_collapse_sequence(params, n=c.n, seed=cfg.seed, k=c.k)
    out = {f"member{i}.csv": d.to_csv() for i, d in enumerate(diags, 1)}
    out["summary.json"] = summary_json(diags) + "\n"
    return out


def cmd_geodesic(cfg: ExperimentConfig) -> dict:
    from .transport_oracle import GridDensity, sb_marginal, sinkhorn
    g = cfg.geodesic
    a = GridDensity.from_mixture(GaussianMixture.gaussian([g.mean0], g.var0), g.lo, g.hi, g.cells)
    b = GridDensity.from_mixture(GaussianMixture.gaussian([g.mean1], g.var1), g.lo, g.hi, g.cells)
    pots = sinkhorn(a, b, g.eps, g.horizon, g.tol, g.max_iter)
    out, stats = {}, []
    for t in g.times:
        m = sb_marginal(pots, float(t))
        out[f"marginal_t{float(t):.4f}.csv"] = m.to_csv()
        stats.append({"t": float(t), "mean": m.mean(), "var": m.var()})
    out["summary.json"] = _dump({"iterations": pots.iterations, "residual": pots.residual,
                                 "marginals": stats})
    return out


def cmd_gamma(cfg: ExperimentConfig) -> dict:
    from .transport_oracle import gamma_sweep, gamma_table_csv
    g = cfg.gamma
    rows = gamma_sweep(_problem(cfg), g.lambdas, _trainer_config(cfg), g.seeds, g.eval_batch,
                       workers(g.workers))
    means = {}
    for lam in g.lambdas:
        sel = [r for r in rows if r.lam == lam]
        means[repr(float(lam))] = {"objective": float(np.mean([r.objective for r in sel])),
                                   "sup_w2": float(np.mean([r.sup_w2 for r in sel]))}
    return {"gamma.csv": gamma_table_csv(rows), "summary.json": _dump(means)}


def cmd_certify(cfg: ExperimentConfig) -> dict:
    """Certify a stored field, or run pilot, budget selection and robust training."""
    from .certify import assemble_report, mode_floor_certificate, select_budget
    from .experiments import series_from_eval
    from .trainer import INF, evaluate, train
    c = cfg.certify
    prob = _problem(cfg)
    sets, _, targets = _modes(cfg)
    lam = c.lambda_star
    if c.field:
        fld = _load_field(cfg, c.field)
        tc = _trainer_config(cfg, budget=lam if lam is not None else INF)
    else:
        pilot_cfg = _trainer_config(cfg, budget=INF, robust=False)
        pilot = train(prob, pilot_cfg)
        ev = evaluate(pilot.field, prob, pilot_cfg, batch=cfg.train.eval_batch)
        if lam is None:
            lam = select_budget(series_from_eval(pilot_cfg.grid, ev.rates, ev.std_errors, c.alpha),
                                c.alpha, c.delta_safe)
        tc = _trainer_config(cfg, budget=lam, robust=True, seed=cfg.seed + 1)
        fld = train(prob, tc).field
    ev = evaluate(fld, prob, tc, batch=cfg.train.eval_batch)
    series = series_from_eval(tc.grid, ev.rates, ev.std_errors, c.alpha)
    if lam is None:
        lam = select_budget(series, c.alpha, c.delta_safe)
    cores = mode_floor_certificate(ev.traj, sets, c.alpha) if sets else None
    report = assemble_report(series=series, lambda_star=lam, core_floors=cores,
                             core_targets=targets, delta_tot_max=c.delta_tot_max,
                             estimator={"eval_batch": cfg.train.eval_batch,
                                        "divergence": cfg.train.divergence},
                             seeds=[cfg.seed], alpha=c.alpha)
    return {"certificate.json": report.to_json() + "\n", "certificate.md": report.to_markdown(),
            "rates.csv": series.to_csv(), "field.json": fld.to_json() + "\n"}


def cmd_stability(cfg: ExperimentConfig) -> dict:
    from .certify import RETRAIN_AXES, stability_sweep
    from .trainer import train
    s = cfg.stability
    prob = _problem(cfg)
    tc = _trainer_config(cfg)
    sets, _, _ = _modes(cfg)
    if s.axis in RETRAIN_AXES:
        res = stability_sweep(s.axis, s.magnitudes, s.seeds, problem=prob, trainer_config=tc,
                              mode_sets=sets, n=s.n)
    else:
        base = _load_field(cfg, s.field) if s.field else train(prob, tc).field
        res = stability_sweep(s.axis, s.magnitudes, s.seeds, base=base, mu0=prob.mu0,
                              grid=tc.grid, mode_sets=sets, n=s.n, noise_seed=s.noise_seed)
    return {"stability.csv": res.to_csv(), "summary.json": _dump(res.summary())}


COMMANDS = {"train": cmd_train, "collapse": cmd_collapse, "geodesic": cmd_geodesic,
            "gamma": cmd_gamma, "certify": cmd_certify, "stability": cmd_stability}


def _dump(obj) -> str:
    def enc(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        if isinstance(v, dict):
            return {k: enc(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [enc(x) for x in v]
        return v
    return json.dumps(enc(obj), indent=2, sort_keys=True) + "\n"


def run(command: str, cfg: ExperimentConfig) -> Path:
    """Execute ``command`` and write its artifacts; returns the run directory."""
    start = time.perf_counter()
    files = COMMANDS[command](cfg)
    outdir = Path(cfg.resolve(cfg.outdir)) / command / cfg.run_id
    outdir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (outdir / name).write_text(text)
    manifest = {"schema": MANIFEST_SCHEMA, "subcommand": command, "version": __version__,
                "config_hash": cfg.digest(), "run_id": cfg.run_id, "seed": cfg.seed,
                "config": cfg.canonical(), "files": sorted(files),
                "wall_time_s": time.perf_counter() - start}
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return outdir


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecfm", description="Flow matching under entropy-rate budgets.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"train": "primal-dual training; writes history, field and rate series",
             "collapse": "collapse-sequence diagnostics; one CSV per member plus summary",
             "geodesic": "Sinkhorn bridge marginals on a 1D grid",
             "gamma": "budget sweep of objective and distance to the displacement interpolant",
             "certify": "budget selection, floors and certificate report",
             "stability": "perturbation sweep with an empirical linear fit"}
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", required=True, help="TOML or JSON experiment config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load(args.config)
        outdir = run(args.command, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # numerical aborts map to exit 2
        from .trainer import TrainingAborted
        from .transport_oracle import SinkhornError
        if isinstance(exc, (TrainingAborted, SinkhornError, IntegrationError)):
            print(f"numerical abort: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(exc, ValueError):
            print(f"config error: {args.config}:1: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        raise
    print(outdir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
