"""Reference solvers for entropic and classical transport in 1D.

The static Schrodinger problem is solved by Sinkhorn scaling against a
reflected Brownian kernel on a bounded grid; dynamic marginals follow by
heat-propagating the two potentials. Gaussian displacement interpolants
and the control-energy identity give closed-form checks for trained flows.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import sqrtm
from scipy.special import logsumexp, ndtr, ndtri

from .dynamics import TrajectoryRecord
from .fields import VelocityField
from .measures import GaussianMixture, ParticleEnsemble

N_IMAGES = 3
MIN_CELLS = 16


class SinkhornError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class GridDensity:
    """Cell masses on ``m`` equal cells of [lo, hi]."""

    lo: float
    hi: float
    masses: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=float)
        if m.ndim != 1 or m.size < MIN_CELLS:
            raise ValueError(f"need at least {MIN_CELLS} cells")
        if not self.hi > self.lo:
            raise ValueError("empty interval")
        if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-12:
            raise ValueError("cell masses must be nonnegative and sum to 1")
        object.__setattr__(self, "masses", m)

    @property
    def m(self) -> int:
        return self.masses.size

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.m

    @property
    def centers(self) -> np.ndarray:
        return self.lo + self.width * (np.arange(self.m) + 0.5)

    @classmethod
    def from_mixture(cls, mixture: GaussianMixture, lo: float, hi: float, m: int,
                     coverage: float = 1e-8) -> "GridDensity":
        """Exact cell masses of a 1D mixture, renormalised over the grid.

        Raises if more than ``coverage`` of the mass falls outside [lo, hi].
        """
        if mixture.dim != 1:
            raise ValueError("grid densities are one-dimensional")
        edges = np.linspace(lo, hi, m + 1)
        sd = np.sqrt(mixture.covs[:, 0, 0])
        z = (edges[:, None] - mixture.means[None, :, 0]) / sd[None, :]
        # lower tails from the cdf, upper tails from the survival function,
        # so far-tail cells keep their tiny but nonzero mass
        comp = np.where(z[1:] <= 0, ndtr(z[1:]) - ndtr(z[:-1]), ndtr(-z[:-1]) - ndtr(-z[1:]))
        masses = comp @ mixture.weights
        inside = masses.sum()
        if 1 - inside > coverage:
            raise ValueError(f"grid misses {1 - inside:.2e} of the mass")
        return cls(lo, hi, masses / inside)

    def mean(self) -> float:
        return float(self.masses @ self.centers)

    def var(self) -> float:
        return float(self.masses @ (self.centers - self.mean()) ** 2)

    def coarsen(self) -> "GridDensity":
        """Merge neighbouring cells pairwise."""
        if self.m % 2:
            raise ValueError("odd cell count")
        return GridDensity(self.lo, self.hi, self.masses.reshape(-1, 2).sum(axis=1))

    def l1(self, other: "GridDensity") -> float:
        if other.m != self.m or other.lo != self.lo or other.hi != self.hi:
            raise ValueError("grid mismatch")
        return float(np.abs(self.masses - other.masses).sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["center", "mass"])
        for c, p in zip(self.centers, self.masses):
            w.writerow([repr(float(c)), repr(float(p))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "GridDensity":
        rows = list(csv.DictReader(io.StringIO(text)))
        c = np.array([float(r["center"]) for r in rows])
        p = np.array([float(r["mass"]) for r in rows])
        h = c[1] - c[0]
        return cls(float(c[0] - h / 2), float(c[-1] + h / 2), p / p.sum())


def log_heat_kernel(lo: float, hi: float, m: int, variance: float) -> np.ndarray:
    """Log of the reflected Gaussian transition matrix on cell centres.

    Entry (i, j) is log(dx * p(x_i, x_j)) with p the heat kernel of the
    given variance reflected at both ends. Zero variance gives the identity.
    """
    dx = (hi - lo) / m
    x = lo + dx * (np.arange(m) + 0.5)
    if variance == 0:
        out = np.full((m, m), -np.inf)
        np.fill_diagonal(out, 0.0)
        return out
    L = hi - lo
    terms = []
    for k in range(-N_IMAGES, N_IMAGES + 1):
        for img in (x + 2 * k * L, 2 * lo - x + 2 * k * L):
            terms.append(-(x[:, None] - img[None, :]) ** 2 / (2 * variance))
    logk = logsumexp(np.stack(terms), axis=0)
    return logk + math.log(dx) - 0.5 * math.log(2 * math.pi * variance)


@dataclass
class SchrodingerPotentials:
    """Log-scalings u = log f and v = log g of the static Schrodinger plan."""

    mu0: GridDensity
    muT: GridDensity
    log_f: np.ndarray
    log_g: np.ndarray
    eps: float
    horizon: float
    residual: float
    iterations: int
    residual_history: list = field(default_factory=list)

    @property
    def f(self) -> np.ndarray:
        return np.exp(self.log_f)

    @property
    def g(self) -> np.ndarray:
        return np.exp(self.log_g)

    def log_kernel(self, t: float) -> np.ndarray:
        return log_heat_kernel(self.mu0.lo, self.mu0.hi, self.mu0.m, 2 * self.eps * t)

    def plan(self) -> np.ndarray:
        logk = self.log_kernel(self.horizon)
        return np.exp(self.log_f[:, None] + logk + self.log_g[None, :])


def sinkhorn(mu0: GridDensity, muT: GridDensity, eps: float, horizon: float = 1.0,
             tol: float = 1e-10, max_iter: int = 5000, log_domain: bool | None = None
             ) -> SchrodingerPotentials:
    """Alternating scaling until both marginal L1 residuals drop below ``tol``.

    The kernel is the reflected Brownian transition density with variance
    2 eps T. Log-domain iterations are used when eps T < 0.05 span^2, which
    in practice covers every grid where the plain kernel underflows.
    """
    if not eps > 0 or not horizon > 0:
        raise ValueError("eps and horizon must be positive")
    if (mu0.lo, mu0.hi, mu0.m) != (muT.lo, muT.hi, muT.m):
        raise ValueError("endpoints must share a grid")
    span = mu0.hi - mu0.lo
    if log_domain is None:
        log_domain = eps * horizon < 0.05 * span ** 2
    logk = log_heat_kernel(mu0.lo, mu0.hi, mu0.m, 2 * eps * horizon)
    with np.errstate(divide="ignore"):
        la, lb = np.log(mu0.masses), np.log(muT.masses)
    u = np.zeros(mu0.m)
    v = np.zeros(mu0.m)
    K = None if log_domain else np.exp(logk)
    history = []
    res = math.inf
    for it in range(1, max_iter + 1):
        if log_domain:
            u = la - logsumexp(logk + v[None, :], axis=1)
            v = lb - logsumexp(logk + u[:, None], axis=0)
            row = np.exp(u + logsumexp(logk + v[None, :], axis=1))
        else:
            f = mu0.masses / (K @ np.exp(v))
            g = muT.masses / (K.T @ f)
            with np.errstate(divide="ignore"):
                u, v = np.log(f), np.log(g)
            row = f * (K @ g)
        # the column marginal is exact right after the v-update
        res = float(np.abs(row - mu0.masses).sum())
        history.append(res)
        if res < tol:
            return SchrodingerPotentials(mu0, muT, u, v, eps, horizon, res, it, history)
    raise SinkhornError(f"sinkhorn did not reach tol={tol} in {max_iter} iterations "
                        f"(residual {res:.3e})", res, max_iter)


def sb_marginal(pots: SchrodingerPotentials, t: float) -> GridDensity:
    """Dynamic Schrodinger marginal at time ``t`` on the solver grid."""
    T = pots.horizon
    if not -1e-12 <= t <= T + 1e-12:
        raise ValueError("time outside [0, T]")
    t = min(max(t, 0.0), T)
    log_alpha = logsumexp(pots.log_f[:, None] + pots.log_kernel(t), axis=0)
    log_beta = logsumexp(pots.log_kernel(T - t) + pots.log_g[None, :], axis=1)
    logp = log_alpha + log_beta
    p = np.exp(logp - logp.max())
    return GridDensity(pots.mu0.lo, pots.mu0.hi, p / p.sum())


def entropic_gaussian_marginal(m0: float, s0: float, m1: float, s1: float,
                               eps: float, horizon: float, t: float) -> tuple[float, float]:
    """Mean and variance at time t of the Schrodinger bridge between two 1D
    Gaussians under a Brownian reference of diffusivity eps."""
    gamma = 4 * eps * horizon
    cov = 0.5 * (math.sqrt(gamma ** 2 / 4 + 4 * s0 ** 2 * s1 ** 2) - gamma / 2)
    s = t / horizon
    mean = (1 - s) * m0 + s * m1
    var = ((1 - s) ** 2 * s0 ** 2 + s ** 2 * s1 ** 2 + 2 * s * (1 - s) * cov
           + 2 * eps * horizon * s * (1 - s))
    return mean, var


def bb_geodesic(mu0: GaussianMixture, muT: GaussianMixture, t: float) -> GaussianMixture:
    """Displacement interpolant between two Gaussians at ``t`` in [0, 1]."""
    if mu0.n_components != 1 or muT.n_components != 1:
        raise ValueError("closed-form geodesics need single-Gaussian endpoints")
    if not -1e-12 <= t <= 1 + 1e-12:
        raise ValueError("t must lie in [0, 1]")
    m = (1 - t) * mu0.means[0] + t * muT.means[0]
    S0, S1 = mu0.covs[0], muT.covs[0]
    r0 = np.real(sqrtm(S0))
    ir0 = np.linalg.inv(r0)
    A = ir0 @ np.real(sqrtm(r0 @ S1 @ r0)) @ ir0
    M = (1 - t) * np.eye(mu0.dim) + t * A
    S = M @ S0 @ M.T
    return GaussianMixture.gaussian(m, 0.5 * (S + S.T))


def w2_gaussian(a: GaussianMixture, b: GaussianMixture) -> float:
    """Closed-form W2 between two Gaussians."""
    if a.n_components != 1 or b.n_components != 1:
        raise ValueError("closed form needs single Gaussians")
    S0, S1 = a.covs[0], b.covs[0]
    r0 = np.real(sqrtm(S0))
    cross = np.real(sqrtm(r0 @ S1 @ r0))
    d2 = np.sum((a.means[0] - b.means[0]) ** 2) + np.trace(S0 + S1 - 2 * cross)
    return math.sqrt(max(d2, 0.0))


def w2_to_gaussian(ens: ParticleEnsemble, mean: float, std: float) -> float:
    """W2 between a 1D uniform ensemble and N(mean, std^2) using mid-quantiles."""
    if ens.dim != 1 or not ens.uniform:
        raise ValueError("needs a uniform 1D ensemble")
    x = np.sort(ens.points[:, 0])
    q = mean + std * ndtri((np.arange(x.size) + 0.5) / x.size)
    return float(math.sqrt(np.mean((x - q) ** 2)))


def sup_w2_to_geodesic(traj: TrajectoryRecord, mu0: GaussianMixture,
                       muT: GaussianMixture) -> float:
    """Largest W2 over grid times between the trajectory and the BB interpolant."""
    T = traj.grid.horizon
    out = 0.0
    for ens, t in zip(traj.ensembles, traj.grid.times):
        ref = bb_geodesic(mu0, muT, t / T)
        out = max(out, w2_to_gaussian(ens, float(ref.means[0, 0]),
                                      float(math.sqrt(ref.covs[0, 0, 0]))))
    return out


def kl_control_energy(w_field: VelocityField, traj: TrajectoryRecord, eps: float) -> float:
    """(1 / 4 eps) int E|w|^2 dt by trapezoid quadrature over the trajectory."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    vals = np.array([np.sum(e.weights * np.sum(w_field.eval(e.points, t) ** 2, axis=1))
                     for e, t in zip(traj.ensembles, traj.grid.times)])
    return float(traj.grid.trapezoid_weights() @ vals) / (4 * eps)


@dataclass(frozen=True)
class IdentityCheck:
    """Both sides of the control-energy identity and their per-path spread."""

    lhs: float
    rhs: float
    residual: float
    std_error: float
    terms: dict


def ecfm_kl_identity_check(v: VelocityField, u_star: VelocityField, traj: TrajectoryRecord,
                           laws: Sequence[GaussianMixture], eps: float) -> IdentityCheck:
    """Compare 0.5 int E|v - u*|^2 with

        2 eps KL + eps int dH/dt + eps int E[score . u*] - (eps^2 / 2) int I,

    where KL = (1 / 4 eps) int E|v - u* + eps score|^2, dH/dt = E[div v] and
    I is the Fisher information, all from exact scores of ``laws``.
    The standard error is taken over per-particle path integrals.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if len(laws) != len(traj.ensembles):
        raise ValueError("need one exact law per grid time")
    wq = traj.grid.trapezoid_weights()
    names = ("action", "kl", "entropy", "cross", "fisher")
    per = {k: [] for k in names}
    for ens, t, law in zip(traj.ensembles, traj.grid.times, laws):
        x = ens.points
        dv = v.eval(x, t) - u_star.eval(x, t)
        s = law.score(x)
        per["action"].append(0.5 * np.sum(dv ** 2, axis=1))
        per["kl"].append(np.sum((dv + eps * s) ** 2, axis=1) / (4 * eps))
        per["entropy"].append(v.divergence(x, t))
        per["cross"].append(np.sum(s * u_star.eval(x, t), axis=1))
        per["fisher"].append(np.sum(s ** 2, axis=1))
    paths = {k: wq @ np.array(per[k]) for k in names}
    lhs_i = paths["action"]
    rhs_i = (2 * eps * paths["kl"] + eps * paths["entropy"] + eps * paths["cross"]
             - 0.5 * eps ** 2 * paths["fisher"])
    diff = lhs_i - rhs_i
    terms = {k: float(np.mean(p)) for k, p in paths.items()}
    return IdentityCheck(float(lhs_i.mean()), float(rhs_i.mean()), float(abs(diff.mean())),
                         float(diff.std(ddof=1) / math.sqrt(diff.size)), terms)


@dataclass(frozen=True)
class GammaRow:
    lam: float
    seed: int
    objective: float
    action: float
    sup_w2: float


def gamma_sweep(problem, lambdas: Sequence[float], config, seeds: Sequence[int] = (0,),
                eval_batch: int = 4000, workers: int = 1) -> list[GammaRow]:
    """Train at each budget and seed; record objective and distance to the
    displacement interpolant. A training abort propagates with the rows
    collected so far attached as ``partial``."""
    from .trainer import TrainingAborted

    cells = [(lam, s) for lam in lambdas for s in seeds]
    rows = []
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_gamma_cell, problem, config, lam, s, eval_batch)
                       for lam, s in cells]
            for fut in futures:
                try:
                    rows.append(fut.result())
                except TrainingAborted as exc:
                    exc.partial = rows
                    raise
        return rows
    for lam, s in cells:
        try:
            rows.append(_gamma_cell(problem, config, lam, s, eval_batch))
        except TrainingAborted as exc:
            exc.partial = rows
            raise
    return rows


def _gamma_cell(problem, config, lam, seed, eval_batch) -> GammaRow:
    from dataclasses import replace

    from .trainer import evaluate, train

    cfg = replace(config, budgets=np.full(len(config.grid), float(lam)), seed=seed)
    result = train(problem, cfg)
    ev = evaluate(result.field, problem, cfg, seed=10_000 + seed, batch=eval_batch)
    return GammaRow(float(lam), int(seed), float(ev.objective), float(ev.action),
                    sup_w2_to_geodesic(ev.traj, problem.mu0, problem.muT))


def gamma_table_csv(rows: Sequence[GammaRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lambda", "seed", "objective", "action", "sup_w2"])
    for r in rows:
        w.writerow([repr(r.lam), r.seed, repr(r.objective), repr(r.action), repr(r.sup_w2)])
    return buf.getvalue()
