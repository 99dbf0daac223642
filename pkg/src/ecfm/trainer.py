"""Primal-dual training of RBF velocity fields under entropy-rate budgets.

Each outer iteration re-simulates particles under the current parameters
and then treats them as fixed. With samples frozen, the regression loss
is quadratic in the parameters and every per-time entropy rate is
linear, so the augmented Lagrangian and its gradient are exact.

Constraints, with the entropy convention H = -int rho log rho:

* rate budgets ``g_n = -rate_n - lambda_n <= 0`` (robust mode replaces
  the rate by its lower confidence bound);
* an entropy-closure equality ``sum_n w_n rate_n = H(mu_T) - H(mu_0)``,
  active whenever some budget is finite, which keeps the trained flow
  consistent with the target endpoint's entropy;
* optional mode floors ``beta_k - m_k(t_n) <= 0``. These are indicator
  averages of frozen samples, so they enter the value and the dual
  updates but carry no parameter gradient.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dynamics import IntegrationError, TrajectoryRecord, fm_risk, integrate_ode
from .entropy_control import lcb_multiplier
from .fields import AnalyticField, RbfField, VelocityField
from .measures import (GaussianMixture, ModeSet, TimeGrid, entropy_exact_mixture,
                       mode_mass, sample)

logger = logging.getLogger(__name__)

INF = math.inf


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss or state; carries the history so far."""

    def __init__(self, message: str, history: "TrainHistory"):
        super().__init__(message)
        self.history = history


@dataclass
class Problem:
    """Transport problem: endpoint laws, regression teacher and reference drift.

    ``field`` is the untrained RBF template whose knots must coincide with
    the trainer grid. ``u_star`` only enters reported kinetic actions.
    """

    mu0: GaussianMixture
    teacher: VelocityField
    field: RbfField
    muT: GaussianMixture | None = None
    u_star: VelocityField | None = None

    def __post_init__(self):
        if self.u_star is None:
            self.u_star = AnalyticField.zero(self.mu0.dim, self.field.horizon)


def two_gaussian_problem(shift: float = 2.0, std: float = 1.0, horizon: float = 1.0,
                         n_times: int = 11, n_centers: int = 9,
                         bandwidth: float = 1.5) -> Problem:
    """1D transport N(-shift, std^2) -> N(shift, std^2) with the straight-line
    interpolant as teacher and RBF centres spread over the swept range."""
    mu0 = GaussianMixture.gaussian([-shift], std ** 2)
    muT = GaussianMixture.gaussian([shift], std ** 2)
    grid = TimeGrid.uniform(horizon, n_times)
    reach = shift + 4 * std
    centers = np.linspace(-reach, reach, n_centers)[:, None]
    template = RbfField.zeros(grid.times, centers, bandwidth)
    return Problem(mu0, AnalyticField.interpolant(mu0, muT, horizon), template, muT)


def default_alpha(k: int, alpha0: float) -> float:
    return alpha0 / (1 + k / 50)


def default_beta(k: int, beta0: float) -> float:
    return beta0 / (1 + k / 200)


def default_zeta(k: int, zeta0: float) -> float:
    return zeta0 / (1 + k / 1000)


@dataclass
class TrainerConfig:
    """Settings for :func:`train`.

    ``budgets`` holds one lambda per grid time; ``math.inf`` disables the
    constraint at that time. When ``beta0`` is None the dual step is set
    every iteration to the reciprocal of the largest eigenvalue of the
    dual curvature D H^{-1} D^T (H the regression Gauss-Newton matrix, D
    the constraint gradients), which keeps projected dual ascent stable.
    ``ridge`` damps the primal Gauss-Newton step relative to its mean
    diagonal.
    """

    grid: TimeGrid
    budgets: np.ndarray
    rho: float = 10.0
    alpha0: float = 1.0
    beta0: float | None = None
    zeta0: float = 0.0
    margins: np.ndarray | None = None
    lambda_bounds: tuple = (0.0, INF)
    batch: int = 1000
    robust: bool = False
    confidence: float = 0.05
    max_outer: int = 60
    seed: int = 0
    substeps: int = 8
    closure: bool = True
    fresh_batch: bool = True
    preconditioner: str = "gauss-newton"
    ridge: float = 1e-3
    divergence: str = "exact"
    n_probes: int = 16
    mode_sets: tuple = ()
    mode_floors: tuple = ()

    def __post_init__(self):
        n = len(self.grid)
        b = np.asarray(self.budgets, dtype=float)
        self.budgets = np.full(n, float(b)) if b.ndim == 0 else b
        if self.budgets.shape != (n,) or np.any(self.budgets < 0):
            raise ValueError("need one nonnegative budget per grid time")
        if not self.rho > 0:
            raise ValueError("penalty rho must be positive")
        if not self.alpha0 > 0 or (self.beta0 is not None and not self.beta0 > 0):
            raise ValueError("step sizes must be positive")
        if self.lambda_bounds[0] > self.lambda_bounds[1]:
            raise ValueError("lambda_min exceeds lambda_max")
        if self.preconditioner not in ("gauss-newton", "none"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")
        if self.divergence not in ("exact", "hutchinson"):
            raise ValueError(f"unknown divergence mode {self.divergence!r}")
        if len(self.mode_sets) != len(self.mode_floors):
            raise ValueError("one floor per mode set")
        if self.margins is None:
            self.margins = np.zeros(n)

    @property
    def constrained(self) -> bool:
        return bool(np.any(np.isfinite(self.budgets)))


@dataclass
class DualState:
    eta: np.ndarray
    nu: np.ndarray
    psi: float = 0.0

    def __post_init__(self):
        if np.any(self.eta < 0) or np.any(self.nu < 0):
            raise ValueError("inequality multipliers must be nonnegative")


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def to_ndjson(self) -> str:
        return "".join(json.dumps(_jsonable(r), sort_keys=True) + "\n" for r in self.records)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


@dataclass
class TrainResult:
    field: RbfField
    history: TrainHistory
    dual: DualState
    budgets: np.ndarray


# ---------------------------------------------------------------- definitions


def residual(rate: float, lam: float, robust: bool = False, std_error: float = 0.0,
             n_times: int = 1, confidence: float = 0.05) -> float:
    """``-rate - lam``, or ``-LCB - lam`` in robust mode; <= 0 is feasible."""
    if math.isinf(lam):
        return -INF
    if robust:
        rate = rate - std_error * lcb_multiplier(n_times, confidence)
    return -rate - lam


def dual_step(eta, residuals, beta: float) -> np.ndarray:
    """Projected ascent ``[eta + beta g]_+``; infinite slack maps to zero."""
    if not beta > 0:
        raise ValueError("dual step must be positive")
    g = np.asarray(residuals, dtype=float)
    with np.errstate(invalid="ignore"):
        out = np.asarray(eta, dtype=float) + beta * g
    return np.where(np.isfinite(out), np.maximum(out, 0.0), 0.0)


def schedule_lambda(lambdas, rates, margins, zeta: float, bounds) -> np.ndarray:
    """Projected budget update ``lambda + zeta (rate + gamma)``."""
    lo, hi = bounds
    if lo > hi:
        raise ValueError("lambda_min exceeds lambda_max")
    lam = np.asarray(lambdas, dtype=float)
    upd = lam + zeta * (np.asarray(rates) + np.asarray(margins))
    return np.where(np.isfinite(lam), np.clip(upd, lo, hi), lam)


def mode_residual(mass: float, floor: float) -> float:
    """``floor - mass``; <= 0 means the mode keeps at least ``floor`` mass."""
    return floor - mass


def penalty_terms(residuals, eta, rho: float) -> float:
    """``sum eta g + rho/2 (g)_+^2`` over finite residuals."""
    g = np.asarray(residuals, dtype=float)
    ok = np.isfinite(g)
    g, e = g[ok], np.asarray(eta, dtype=float)[ok]
    return float(np.sum(e * g) + 0.5 * rho * np.sum(np.maximum(g, 0.0) ** 2))


# ---------------------------------------------------------------- frozen-sample model


@dataclass
class FrozenBatch:
    """Per-time design tensors of a simulated batch, independent of theta."""

    F: list
    G: list
    Y: list
    traj: TrajectoryRecord


def _simulate(fld: RbfField, problem: Problem, config: TrainerConfig, seed: int) -> TrajectoryRecord:
    ens0 = sample(problem.mu0, config.batch, seed)
    return integrate_ode(fld, ens0, config.grid, config.substeps)


def freeze(fld: RbfField, problem: Problem, config: TrainerConfig, traj: TrajectoryRecord,
           seed: int = 0) -> FrozenBatch:
    F, G, Y = [], [], []
    rng = np.random.default_rng(seed)
    for ens, t in zip(traj.ensembles, config.grid.times):
        Fn, Gn = fld.knot_features(ens.points)
        if config.divergence == "hutchinson":
            Gn = np.mean([fld.knot_hutchinson_features(
                ens.points, rng.choice([-1.0, 1.0], size=ens.points.shape))
                for _ in range(config.n_probes)], axis=0)
        F.append(Fn)
        G.append(Gn)
        Y.append(problem.teacher.eval(ens.points, t))
    return FrozenBatch(F, G, Y, traj)


@dataclass
class ALModel:
    """Augmented Lagrangian of one frozen batch as a function of theta."""

    batch: FrozenBatch
    config: TrainerConfig
    target_dH: float | None
    p: int
    n_knots: int

    def _blocks(self, theta):
        return np.asarray(theta, dtype=float).reshape(self.n_knots, self.p)

    def rates(self, theta):
        """Per-time rates, their standard errors and divergence gradients."""
        th = self._blocks(theta)
        vals, ses, dvals, dses = [], [], [], []
        for n, Gn in enumerate(self.batch.G):
            div = Gn @ th[n]
            B = div.size
            mean = div.mean()
            s = div.std(ddof=1)
            vals.append(mean)
            ses.append(s / math.sqrt(B))
            dvals.append(Gn.mean(axis=0))
            if s > 0:
                dses.append(((div - mean) @ Gn) / ((B - 1) * s * math.sqrt(B)))
            else:
                dses.append(np.zeros(self.p))
        return np.array(vals), np.array(ses), dvals, dses

    def fit(self, theta):
        th = self._blocks(theta)
        w = self.config.grid.trapezoid_weights()
        val = 0.0
        grad = np.zeros_like(th)
        for n, (Fn, Yn) in enumerate(zip(self.batch.F, self.batch.Y)):
            r = np.einsum("bdp,p->bd", Fn, th[n]) - Yn
            B = r.shape[0]
            val += 0.5 * w[n] * np.sum(r ** 2) / B
            grad[n] = w[n] * np.einsum("bdp,bd->p", Fn, r) / B
        return val, grad.ravel()

    def constraint_terms(self, theta, lambdas):
        """Residuals g_n with gradients, and the closure residual with gradient."""
        cfg = self.config
        vals, ses, dvals, dses = self.rates(theta)
        z = lcb_multiplier(len(vals), cfg.confidence)
        g = np.full(len(vals), -INF)
        dg = np.zeros((len(vals), self.n_knots * self.p))
        for n in range(len(vals)):
            if not math.isfinite(lambdas[n]):
                continue
            rate, drate = vals[n], dvals[n]
            if cfg.robust:
                rate, drate = rate - z * ses[n], drate - z * dses[n]
            g[n] = -rate - lambdas[n]
            dg[n, n * self.p:(n + 1) * self.p] = -drate
        c, dc = None, None
        if self.target_dH is not None:
            w = cfg.grid.trapezoid_weights()
            c = float(w @ vals - self.target_dH)
            dc = np.concatenate([w[n] * dvals[n] for n in range(len(vals))])
        return vals, ses, g, dg, c, dc

    def value_and_grad(self, theta, dual: DualState, lambdas, mode_h=None):
        rho = self.config.rho
        val, grad = self.fit(theta)
        _, _, g, dg, c, dc = self.constraint_terms(theta, lambdas)
        ok = np.isfinite(g)
        val += penalty_terms(g, dual.eta, rho)
        grad = grad + (dual.eta[ok] + rho * np.maximum(g[ok], 0.0)) @ dg[ok]
        if c is not None:
            val += dual.psi * c + 0.5 * rho * c ** 2
            grad = grad + (dual.psi + rho * c) * dc
        if mode_h is not None and mode_h.size:
            val += penalty_terms(mode_h.ravel(), dual.nu.ravel(), rho)
        return val, grad

    def fit_curvature(self):
        """Damped Gauss-Newton matrix of the regression loss alone."""
        w = self.config.grid.trapezoid_weights()
        H = np.zeros((self.n_knots * self.p,) * 2)
        for n, Fn in enumerate(self.batch.F):
            sl = slice(n * self.p, (n + 1) * self.p)
            H[sl, sl] = w[n] * np.einsum("bdp,bdq->pq", Fn, Fn) / Fn.shape[0]
        H[np.diag_indices_from(H)] += self.config.ridge * (1 + np.trace(H) / H.shape[0])
        return H

    def curvature(self, theta, lambdas):
        """Gauss-Newton matrix of the augmented Lagrangian at theta."""
        rho = self.config.rho
        P = self.fit_curvature()
        _, _, g, dg, c, dc = self.constraint_terms(theta, lambdas)
        for n in np.flatnonzero(np.isfinite(g) & (g > 0)):
            P += rho * np.outer(dg[n], dg[n])
        if c is not None:
            P += rho * np.outer(dc, dc)
        return P

    def dual_curvature(self, theta, lambdas) -> float:
        """Largest eigenvalue of D H^{-1} D^T over all constraint rows."""
        _, _, g, dg, c, dc = self.constraint_terms(theta, lambdas)
        rows = [dg[n] for n in np.flatnonzero(np.isfinite(g))]
        if c is not None:
            rows.append(dc)
        if not rows:
            return 0.0
        D = np.array(rows)
        M = D @ np.linalg.solve(self.fit_curvature(), D.T)
        return float(np.linalg.eigvalsh(M)[-1])


def augmented_lagrangian(theta, dual: DualState, lambdas, model: ALModel):
    """Value and exact frozen-sample gradient of the augmented Lagrangian."""
    return model.value_and_grad(theta, dual, lambdas)


def _entropy_gap(problem: Problem) -> float | None:
    if problem.muT is None:
        return None
    h0, _ = entropy_exact_mixture(problem.mu0, seed=0)
    h1, _ = entropy_exact_mixture(problem.muT, seed=1)
    return h1 - h0


def _mode_masses(traj: TrajectoryRecord, mode_sets: Sequence[ModeSet]) -> np.ndarray:
    return np.array([[mode_mass(e, A).mass for e in traj.ensembles] for A in mode_sets]
                    ).reshape(len(mode_sets), len(traj.ensembles))


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def train(problem: Problem, config: TrainerConfig, init: RbfField | None = None) -> TrainResult:
    """Run the primal-dual loop and return the final field with its history."""
    fld = problem.field if init is None else init
    if not np.allclose(fld.knots, config.grid.times, rtol=0, atol=1e-12):
        raise ValueError("field knots must coincide with the trainer grid")
    n_t = len(config.grid)
    lambdas = config.budgets.copy()
    target = _entropy_gap(problem) if (config.closure and config.constrained) else None
    floors = np.asarray(config.mode_floors, dtype=float)
    dual = DualState(np.zeros(n_t), np.zeros((len(config.mode_sets), n_t)))
    history = TrainHistory()
    theta = fld.theta.copy()
    step_scale = None

    for k in range(config.max_outer):
        alpha = default_alpha(k, config.alpha0)
        try:
            traj = _simulate(fld, problem, config, _seed(config.seed, k, 0))
        except IntegrationError as exc:
            raise TrainingAborted(str(exc), history) from exc
        batch = freeze(fld, problem, config, traj, _seed(config.seed, k, 2))
        model = ALModel(batch, config, target, fld.knot_size, n_t)
        mode_h = floors[:, None] - _mode_masses(traj, config.mode_sets) if config.mode_sets else None
        loss_al, grad = model.value_and_grad(theta, dual, lambdas, mode_h)
        loss_fit, _ = model.fit(theta)
        if not (math.isfinite(loss_al) and np.all(np.isfinite(grad))):
            raise TrainingAborted(f"non-finite augmented Lagrangian at iteration {k}", history)

        if config.preconditioner == "gauss-newton":
            step = np.linalg.solve(model.curvature(theta, lambdas), grad)
        else:
            if step_scale is None:
                step_scale = 1.0 / np.linalg.eigvalsh(model.curvature(theta, lambdas))[-1]
            step = step_scale * grad
        theta = theta - alpha * step
        fld = fld.with_theta(theta)

        if config.fresh_batch:
            try:
                traj = _simulate(fld, problem, config, _seed(config.seed, k, 1))
            except IntegrationError as exc:
                raise TrainingAborted(str(exc), history) from exc
            batch = freeze(fld, problem, config, traj, _seed(config.seed, k, 3))
            model = ALModel(batch, config, target, fld.knot_size, n_t)
        if config.beta0 is None:
            curv = model.dual_curvature(theta, lambdas)
            beta = default_beta(k, 1.0 / curv if curv > 0 else config.rho)
        else:
            beta = default_beta(k, config.beta0)
        rates, ses, g, _, c, _ = model.constraint_terms(theta, lambdas)
        dual.eta = dual_step(dual.eta, g, beta)
        if c is not None:
            dual.psi = dual.psi + beta * c
        if config.mode_sets:
            mode_h = floors[:, None] - _mode_masses(traj, config.mode_sets)
            dual.nu = dual_step(dual.nu, mode_h, beta)
        if config.zeta0 > 0:
            lambdas = schedule_lambda(lambdas, rates, config.margins,
                                      default_zeta(k, config.zeta0), config.lambda_bounds)
        feasible = bool(np.all(g[np.isfinite(g)] <= 0))
        history.append({
            "k": k, "loss_fit": loss_fit, "loss_al": loss_al, "alpha": alpha, "beta": beta,
            "rates": rates, "std_errors": ses, "residuals": g, "eta": dual.eta.copy(),
            "lambdas": lambdas.copy(), "closure": c, "psi": dual.psi,
            "mode_residuals": None if mode_h is None else mode_h,
            "nu": dual.nu.copy() if config.mode_sets else None, "feasible": feasible,
        })
    return TrainResult(fld, history, dual, lambdas)


# ---------------------------------------------------------------- evaluation


@dataclass
class Evaluation:
    traj: TrajectoryRecord
    rates: np.ndarray
    std_errors: np.ndarray
    residuals: np.ndarray
    objective: float
    action: float


def evaluate(fld: RbfField, problem: Problem, config: TrainerConfig, lambdas=None,
             seed: int = 12345, batch: int | None = None) -> Evaluation:
    """Re-simulate a trained field on a fresh batch and report its diagnostics.

    ``objective`` is the regression loss against the teacher, the quantity
    the trainer minimises; ``action`` is 0.5 int E|v - u*|^2.
    """
    cfg = replace(config, batch=batch or config.batch)
    lambdas = cfg.budgets if lambdas is None else np.asarray(lambdas, dtype=float)
    traj = _simulate(fld, problem, cfg, seed)
    frozen = freeze(fld, problem, cfg, traj, seed)
    model = ALModel(frozen, cfg, None, fld.knot_size, len(cfg.grid))
    rates, ses, g, _, _, _ = model.constraint_terms(fld.theta, lambdas)
    objective, _ = model.fit(fld.theta)
    action = fm_risk(fld, problem.u_star, traj)
    return Evaluation(traj, rates, ses, g, float(objective), float(action))
