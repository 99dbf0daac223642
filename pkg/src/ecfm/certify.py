"""Budget selection, finite-sample floors, stability sweeps and reports.

A certificate bundles the selected entropy budget, the effective budget
of the trained model, Hoeffding floors on mode and core masses, optional
density proxies and empirically fitted stability slopes. The stability
constants are slopes measured on perturbation sweeps, labelled as
empirical, and carry no worst-case guarantee.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dynamics import TrajectoryRecord, integrate_ode
from .entropy_control import EntropyRateSeries, lambda_eff, lcb
from .fields import AnalyticField, RbfField, SumField, VelocityField
from .measures import (ModeSet, ParticleEnsemble, TimeGrid, hoeffding_radius, mode_mass,
                       sample, w2)

REPORT_SCHEMA = "ecfm-certificate-v1"
NOT_MEASURED = "not-measured"
AXES = ("endpoint-shift", "drift-shift", "field-noise", "init-shift")
RETRAIN_AXES = ("endpoint-shift", "drift-shift")
CAVEAT = ("Confidence radii use the empirical standard error as the sub-Gaussian "
          "scale of each entropy-rate estimate; this is a plug-in, not a verified proxy. "
          "Stability slopes are empirical fits, not worst-case constants.")


def select_budget(series: EntropyRateSeries, alpha: float | None = None,
                  delta_safe: float = 0.1) -> float:
    """lambda* = lambda_eff^LCB + delta_safe."""
    if delta_safe < 0:
        raise ValueError("delta_safe must be nonnegative")
    return lambda_eff(series, alpha)[1] + delta_safe


def grid_adequacy(fine: EntropyRateSeries, coarse: TimeGrid, eps_h: float) -> tuple[float, bool]:
    """Estimate the rate's Lipschitz constant and test max dt <= eps_H / L_H.

    L_H is the largest absolute finite-difference slope of the fine series.
    """
    if not eps_h > 0:
        raise ValueError("eps_H must be positive")
    t, r = fine.grid.times, fine.values
    slopes = np.abs(np.diff(r) / np.diff(t))
    L = float(slopes.max()) if slopes.size else 0.0
    if L == 0:
        return 0.0, True
    return L, bool(coarse.max_step <= eps_h / L)


@dataclass(frozen=True)
class FloorCertificate:
    """Empirical masses, radius and floors for sets x grid times."""

    labels: tuple
    masses: np.ndarray
    radius: float
    alpha: float

    @property
    def floors(self) -> np.ndarray:
        return self.masses - self.radius

    @property
    def min_floors(self) -> np.ndarray:
        """Per-set minimum of the floors over grid times."""
        return self.floors.min(axis=1)

    @property
    def global_min(self) -> float:
        return float(self.floors.min())


def mode_floor_certificate(traj: TrajectoryRecord, sets: Sequence[ModeSet],
                           alpha: float = 0.05) -> FloorCertificate:
    """Floors holding simultaneously over all sets and grid times at level alpha."""
    if not sets:
        raise ValueError("need at least one set")
    for e in traj.ensembles:
        if not e.uniform:
            raise ValueError("floors need equally weighted ensembles")
    B = min(e.size for e in traj.ensembles)
    masses = np.array([[mode_mass(e, A).mass for e in traj.ensembles] for A in sets])
    rad = hoeffding_radius(B, alpha, len(sets), len(traj.ensembles))
    return FloorCertificate(tuple(A.label for A in sets), masses, rad, alpha)


def density_floor_proxy(ens: ParticleEnsemble, probes: Sequence[tuple], alpha: float = 0.05
                        ) -> np.ndarray:
    """Lower proxies (occupancy - radius) / |ball| for each (center, r) probe."""
    out = []
    d = ens.dim
    rad = hoeffding_radius(ens.size, alpha, max(len(probes), 1), 1)
    for center, r in probes:
        if not r > 0:
            raise ValueError("probe radius must be positive")
        ball = ModeSet("ball", {"center": np.atleast_1d(center).tolist(), "radius": float(r)})
        vol = math.pi ** (d / 2) / math.gamma(d / 2 + 1) * r ** d
        out.append((mode_mass(ens, ball).mass - rad) / vol)
    return np.array(out)


def refinement_advice(series: EntropyRateSeries, lambda_star: float, delta_lambda: float,
                      tau_h: float, floors: FloorCertificate | None = None,
                      tau_m: float = 0.0) -> list[dict]:
    """Grid times worth refining: LCB near the budget boundary, noisy rate
    estimates, or floors below ``tau_m``. Advice only; nothing is re-gridded."""
    bounds = lcb(series)
    out = []
    for n, (e, b) in enumerate(zip(series.estimates, bounds)):
        reasons = []
        if abs(b + lambda_star) <= delta_lambda:
            reasons.append("near-boundary")
        if e.std_error > tau_h:
            reasons.append("high-variance")
        if floors is not None and np.any(floors.floors[:, n] < tau_m):
            reasons.append("low-floor")
        if reasons:
            out.append({"n": n, "t": e.time, "reasons": reasons})
    return out


# ---------------------------------------------------------------- stability


def fit_through_origin(x, y) -> tuple[float, float]:
    """Least-squares slope of y = C x and the centred R^2 of that fit."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    slope = float(x @ y / (x @ x))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum((y - slope * x) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    return slope, r2


@dataclass
class StabilityResult:
    axis: str
    magnitudes: np.ndarray
    seeds: tuple
    deviations: np.ndarray
    mass_deviations: np.ndarray | None
    slope: float
    r2: float
    mass_slope: float | None
    mass_r2: float | None

    def to_csv(self) -> str:
        lines = ["magnitude,seed,sup_w2,sup_mass"]
        for i, m in enumerate(self.magnitudes):
            for j, s in enumerate(self.seeds):
                md = "" if self.mass_deviations is None else repr(float(self.mass_deviations[i, j]))
                lines.append(f"{m!r},{s},{float(self.deviations[i, j])!r},{md}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {"axis": self.axis, "slope": self.slope, "r2": self.r2,
                "mass_slope": self.mass_slope, "mass_r2": self.mass_r2,
                "label": "empirical"}


def noise_field(template: RbfField, magnitude: float, seed: int, traj: TrajectoryRecord) -> RbfField:
    """Random RBF perturbation rescaled to L2(mu) norm ``magnitude`` along ``traj``."""
    rng = np.random.default_rng(seed)
    raw = RbfField(template.knots, template.centers, template.bandwidth,
                   np.zeros_like(template.A), np.zeros_like(template.b),
                   rng.standard_normal(template.W.shape))
    sq = np.array([np.mean(np.sum(raw.eval(e.points, t) ** 2, axis=1))
                   for e, t in zip(traj.ensembles, traj.grid.times)])
    norm = math.sqrt(float(traj.grid.trapezoid_weights() @ sq))
    return raw.with_theta(raw.theta * (magnitude / norm))


def _sup_w2(a: TrajectoryRecord, b: TrajectoryRecord) -> float:
    return max(w2(x, y) for x, y in zip(a.ensembles, b.ensembles))


def _sup_mass(a: TrajectoryRecord, b: TrajectoryRecord, sets) -> float:
    return max(abs(mode_mass(x, A).mass - mode_mass(y, A).mass)
               for A in sets for x, y in zip(a.ensembles, b.ensembles))


def stability_sweep(axis: str, magnitudes: Sequence[float], seeds: Sequence[int], *,
                    base: VelocityField | None = None, mu0=None, grid: TimeGrid | None = None,
                    problem=None, trainer_config=None, noise_template: RbfField | None = None,
                    mode_sets: Sequence[ModeSet] = (), n: int = 2000,
                    substeps: int = 8, noise_seed: int = 0) -> StabilityResult:
    """Deviation sup_t W2 between perturbed and unperturbed trajectories.

    ``field-noise`` and ``init-shift`` replay the fixed ``base`` field;
    ``endpoint-shift`` and ``drift-shift`` re-train on a perturbed
    ``problem`` with ``trainer_config``. Perturbed and unperturbed
    trajectories share their initial particles, shifted for init-shift.
    Seeds vary the particles; the field-noise direction is fixed by
    ``noise_seed`` and rescaled per seed along the reference trajectory.
    Magnitudes are the L2(mu) norm of the field noise, the mean shift of
    mu_0 or mu_T, or the L2-in-time norm of a constant drift shift.
    """
    if axis not in AXES:
        raise ValueError(f"unknown perturbation axis {axis!r}")
    mags = np.asarray(magnitudes, dtype=float)
    if axis in RETRAIN_AXES:
        if problem is None or trainer_config is None:
            raise ValueError(f"{axis} needs a problem and a trainer config")
        mu0, grid = problem.mu0, trainer_config.grid
    elif base is None or mu0 is None or grid is None:
        raise ValueError(f"{axis} needs a base field, mu0 and a grid")
    dev = np.zeros((mags.size, len(seeds)))
    mdev = np.zeros_like(dev) if mode_sets else None
    for j, s in enumerate(seeds):
        ens0 = sample(mu0, n, 50_000 + s)
        if axis in RETRAIN_AXES:
            from .trainer import train
            cfg = replace(trainer_config, seed=s)
            base_field = train(problem, cfg).field
        else:
            base_field = base
        ref = integrate_ode(base_field, ens0, grid, substeps)
        for i, m in enumerate(mags):
            if axis == "field-noise":
                tmpl = noise_template if noise_template is not None else base_field
                xi = noise_field(tmpl, m, noise_seed, ref)
                traj = integrate_ode(SumField(base_field, xi), ens0, grid, substeps)
            elif axis == "init-shift":
                traj = integrate_ode(base_field, ens0.with_points(ens0.points + m), grid, substeps)
            else:
                traj = integrate_ode(_retrain(problem, cfg, axis, m), ens0, grid, substeps)
            dev[i, j] = _sup_w2(ref, traj)
            if mode_sets:
                mdev[i, j] = _sup_mass(ref, traj, mode_sets)
    xs = np.repeat(mags, len(seeds))
    slope, r2 = fit_through_origin(xs, dev.ravel())
    mslope = mr2 = None
    if mode_sets:
        mslope, mr2 = fit_through_origin(xs, mdev.ravel())
    return StabilityResult(axis, mags, tuple(seeds), dev, mdev, slope, r2, mslope, mr2)


def _retrain(problem, cfg, axis: str, m: float) -> RbfField:
    from .trainer import Problem, train

    if axis == "endpoint-shift":
        muT = problem.muT.shifted(m)
        teacher = AnalyticField.interpolant(problem.mu0, muT, problem.field.horizon)
        pert = Problem(problem.mu0, teacher, problem.field, muT, problem.u_star)
    else:
        T = problem.field.horizon
        shift = AnalyticField.affine(np.zeros((problem.mu0.dim,) * 2),
                                     np.full(problem.mu0.dim, m / math.sqrt(T * problem.mu0.dim)), T)
        pert = Problem(problem.mu0, SumField(problem.teacher, shift), problem.field,
                       problem.muT, problem.u_star)
    return train(pert, cfg).field


# ---------------------------------------------------------------- report


@dataclass
class CertificateReport:
    """Certification tuple; ``None`` entries are reported as not measured."""

    model: str = "ecfm"
    n_steps: int | None = None
    alpha: float = 0.05
    lambda_star: float | None = None
    lambda_eff_lcb: float | None = None
    lambda_eff_max: float | None = None
    mode_floors: dict | None = None
    core_floors: dict | None = None
    density_floors: list | None = None
    stability_w: float | None = None
    stability_m: float | None = None
    delta_tot_max: float | None = None
    core_targets: dict = field(default_factory=dict)
    estimator: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)
    advice: list = field(default_factory=list)
    verdict: str = "incomplete"
    caveat: str = CAVEAT

    @property
    def min_core_floor(self) -> float | None:
        if not self.core_floors:
            return None
        return float(min(self.core_floors.values()))

    def deployment_floors(self, delta_tot_max: float | None = None) -> dict | None:
        """Core floors minus C_M * Delta_tot^max, or None when not measurable."""
        dm = self.delta_tot_max if delta_tot_max is None else delta_tot_max
        if self.core_floors is None or self.stability_m is None or dm is None:
            return None
        return {k: v - self.stability_m * dm for k, v in self.core_floors.items()}

    def to_dict(self) -> dict:
        def nm(v):
            return NOT_MEASURED if v is None else v
        dep = self.deployment_floors()
        return {
            "schema": REPORT_SCHEMA,
            "model": self.model,
            "N": nm(self.n_steps),
            "alpha": self.alpha,
            "lambda_star": nm(self.lambda_star),
            "lambda_eff_lcb": nm(self.lambda_eff_lcb),
            "lambda_eff_max": nm(self.lambda_eff_max),
            "mode_floors": nm(self.mode_floors),
            "core_floors": nm(self.core_floors),
            "min_core_floor": nm(self.min_core_floor),
            "density_floors": nm(self.density_floors),
            "stability": {"C_W": nm(self.stability_w), "C_M": nm(self.stability_m),
                          "label": "empirical"},
            "delta_tot_max": nm(self.delta_tot_max),
            "deployment_floors": nm(dep),
            "core_targets": self.core_targets,
            "estimator": self.estimator,
            "seeds": self.seeds,
            "refinement_advice": self.advice,
            "verdict": self.verdict,
            "caveat": self.caveat,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CertificateReport":
        d = json.loads(text)
        if d.get("schema") != REPORT_SCHEMA:
            raise ValueError("unknown report schema")

        def val(v):
            return None if v == NOT_MEASURED else v
        return cls(model=d["model"], n_steps=val(d["N"]), alpha=d["alpha"],
                   lambda_star=val(d["lambda_star"]), lambda_eff_lcb=val(d["lambda_eff_lcb"]),
                   lambda_eff_max=val(d["lambda_eff_max"]), mode_floors=val(d["mode_floors"]),
                   core_floors=val(d["core_floors"]), density_floors=val(d["density_floors"]),
                   stability_w=val(d["stability"]["C_W"]), stability_m=val(d["stability"]["C_M"]),
                   delta_tot_max=val(d["delta_tot_max"]), core_targets=d["core_targets"],
                   estimator=d["estimator"], seeds=d["seeds"], advice=d["refinement_advice"],
                   verdict=d["verdict"], caveat=d["caveat"])

    def to_markdown(self) -> str:
        def f(v):
            if v is None:
                return NOT_MEASURED
            return f"{v:.4g}" if isinstance(v, (int, float)) else str(v)
        dep = self.deployment_floors()
        robust = None if dep is None else min(dep.values())
        head = ("| Model | lambda* | lambda_eff^LCB | min_k m_k^cert | Feasible? | C_W (empirical) "
                "| Robust floor at Delta_tot^max |")
        row = (f"| {self.model} | {f(self.lambda_star)} | {f(self.lambda_eff_lcb)} | "
               f"{f(self.min_core_floor)} | {self.verdict} | {f(self.stability_w)} | {f(robust)} |")
        return "\n".join([head, "|" + "---|" * 7, row]) + "\n"


def assemble_report(*, series: EntropyRateSeries | None = None, lambda_star: float | None = None,
                    core_floors: FloorCertificate | None = None,
                    mode_floors: FloorCertificate | None = None,
                    core_targets: dict | None = None, density_floors=None,
                    stability_w: StabilityResult | float | None = None,
                    stability_m: StabilityResult | float | None = None,
                    delta_tot_max: float | None = None, estimator: dict | None = None,
                    seeds: Sequence[int] = (), model: str = "ecfm", alpha: float = 0.05,
                    advice: list | None = None) -> CertificateReport:
    """Collect measured components and decide the verdict.

    The verdict is ``feasible`` iff lambda_eff^LCB <= lambda* and every
    core floor reaches its target; ``incomplete`` when the budget, the
    series, or (with targets configured) the core floors are missing.
    """
    def slope(v, mass=False):
        if isinstance(v, StabilityResult):
            return v.mass_slope if mass else v.slope
        return v

    rep = CertificateReport(model=model, alpha=alpha, lambda_star=lambda_star,
                            core_targets=dict(core_targets or {}),
                            density_floors=None if density_floors is None else list(map(float, density_floors)),
                            stability_w=slope(stability_w), stability_m=slope(stability_m, True),
                            delta_tot_max=delta_tot_max, estimator=dict(estimator or {}),
                            seeds=list(seeds), advice=list(advice or []))
    if series is not None:
        rep.n_steps = len(series.estimates) - 1
        rep.lambda_eff_max, rep.lambda_eff_lcb = lambda_eff(series, alpha)
    if mode_floors is not None:
        rep.mode_floors = dict(zip(mode_floors.labels, map(float, mode_floors.min_floors)))
    if core_floors is not None:
        rep.core_floors = dict(zip(core_floors.labels, map(float, core_floors.min_floors)))
    missing = rep.lambda_star is None or rep.lambda_eff_lcb is None
    if rep.core_targets and rep.core_floors is None:
        missing = True
    if missing:
        rep.verdict = "incomplete"
        return rep
    ok = rep.lambda_eff_lcb <= rep.lambda_star
    for label, beta in rep.core_targets.items():
        ok = ok and rep.core_floors.get(label, -math.inf) >= beta
    rep.verdict = "feasible" if ok else "infeasible"
    return rep
