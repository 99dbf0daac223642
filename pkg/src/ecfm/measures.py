"""Probability measures, particle ensembles and sample-based functionals.

Gaussian mixtures serve as analytic endpoint laws and as exact
intermediate laws for affine flows. Particle ensembles are what every
estimator in the package consumes.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln, logsumexp

logger = logging.getLogger(__name__)

MIXTURE_SCHEMA = "ecfm-mixture-v1"
ENSEMBLE_SCHEMA = "ecfm-ensemble-v1"

# Exact assignment is cubic in n; above this size callers must subsample.
HUNGARIAN_MAX_N = 2000


def _as_points(x, dim=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if dim in (None, 1) else x[None, :]
    if x.ndim != 2:
        raise ValueError(f"points must be (n, d), got shape {x.shape}")
    if dim is not None and x.shape[1] != dim:
        raise ValueError(f"points have dimension {x.shape[1]}, expected {dim}")
    return x


@dataclass(frozen=True)
class GaussianMixture:
    """Finite mixture of Gaussians in R^d.

    Parameters
    ----------
    weights : array_like, shape (K,)
        Nonnegative and summing to one.
    means : array_like, shape (K, d)
    covs : array_like, shape (K, d, d)
        Symmetric positive definite.
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        m = np.asarray(self.means, dtype=float)
        if m.ndim == 1:
            m = m[:, None]
        c = np.asarray(self.covs, dtype=float)
        if c.ndim == 1:
            c = c[:, None, None]
        k, d = m.shape
        if w.shape != (k,) or c.shape != (k, d, d):
            raise ValueError("inconsistent mixture shapes")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if not np.allclose(c, np.swapaxes(c, 1, 2), atol=1e-12):
            raise ValueError("covariances must be symmetric")
        if np.any(np.linalg.eigvalsh(c) <= 0):
            raise ValueError("covariances must be positive definite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covs", c)

    @classmethod
    def gaussian(cls, mean, cov) -> "GaussianMixture":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0:
            cov = cov * np.eye(mean.size)
        return cls(np.ones(1), mean[None, :], cov[None, :, :])

    @classmethod
    def two_mode(cls, a: float, sigma: float) -> "GaussianMixture":
        """Symmetric 1D mixture 0.5 N(-a, sigma^2) + 0.5 N(a, sigma^2)."""
        return cls(np.array([0.5, 0.5]), np.array([[-a], [a]]),
                   np.full((2, 1, 1), sigma ** 2))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def shifted(self, delta) -> "GaussianMixture":
        delta = np.broadcast_to(np.asarray(delta, dtype=float), (self.dim,))
        return GaussianMixture(self.weights, self.means + delta, self.covs)

    def _component_terms(self, x):
        """Per-component log N_k(x) and precision-weighted residuals."""
        x = _as_points(x, self.dim)
        prec = np.linalg.inv(self.covs)
        _, logdet = np.linalg.slogdet(self.covs)
        diff = x[:, None, :] - self.means[None, :, :]
        pd = np.einsum("kij,nkj->nki", prec, diff)
        maha = np.einsum("nki,nki->nk", diff, pd)
        logn = -0.5 * (maha + logdet[None, :] + self.dim * math.log(2 * math.pi))
        return logn, pd, prec

    def logpdf(self, x) -> np.ndarray:
        logn, _, _ = self._component_terms(x)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logsumexp(logn + logw[None, :], axis=1)

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.logpdf(x))

    def responsibilities(self, x) -> np.ndarray:
        logn, _, _ = self._component_terms(x)
        with np.errstate(divide="ignore"):
            a = logn + np.log(self.weights)[None, :]
        return np.exp(a - logsumexp(a, axis=1, keepdims=True))

    def score(self, x) -> np.ndarray:
        """Gradient of the log density, shape (n, d)."""
        logn, pd, _ = self._component_terms(x)
        with np.errstate(divide="ignore"):
            a = logn + np.log(self.weights)[None, :]
        r = np.exp(a - logsumexp(a, axis=1, keepdims=True))
        return -np.einsum("nk,nki->ni", r, pd)

    def score_jacobian(self, x) -> np.ndarray:
        """Hessian of the log density, shape (n, d, d)."""
        logn, pd, prec = self._component_terms(x)
        with np.errstate(divide="ignore"):
            a = logn + np.log(self.weights)[None, :]
        r = np.exp(a - logsumexp(a, axis=1, keepdims=True))
        g = -pd
        gbar = np.einsum("nk,nki->ni", r, g)
        hess = -np.einsum("nk,kij->nij", r, prec)
        hess += np.einsum("nk,nki,nkj->nij", r, g, g)
        hess -= np.einsum("ni,nj->nij", gbar, gbar)
        return hess

    def sample_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        chol = np.linalg.cholesky(self.covs)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", chol[comp], z)

    def to_dict(self) -> dict:
        return {
            "schema": MIXTURE_SCHEMA,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianMixture":
        if data.get("schema", MIXTURE_SCHEMA) != MIXTURE_SCHEMA:
            raise ValueError(f"unknown mixture schema {data.get('schema')!r}")
        return cls(np.array(data["weights"], dtype=float),
                   np.array(data["means"], dtype=float),
                   np.array(data["covs"], dtype=float))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GaussianMixture":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ParticleEnsemble:
    """Weighted point cloud at a fixed time.

    Parameters
    ----------
    points : ndarray, shape (B, d)
    weights : ndarray, shape (B,), optional
        Nonnegative, summing to one. Uniform when omitted.
    time : float
    seed : int or None
        Seed the ensemble was drawn with, kept for provenance.
    """

    points: np.ndarray
    weights: np.ndarray | None = None
    time: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        p = _as_points(self.points)
        if p.shape[0] == 0:
            raise ValueError("ensemble must be nonempty")
        if not np.all(np.isfinite(p)):
            raise ValueError("ensemble points must be finite")
        w = self.weights
        if w is None:
            w = np.full(p.shape[0], 1.0 / p.shape[0])
        else:
            w = np.asarray(w, dtype=float)
            if w.shape != (p.shape[0],) or np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
                raise ValueError("ensemble weights must be nonnegative, sum to 1")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "time", float(self.time))

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def with_points(self, points, time=None) -> "ParticleEnsemble":
        return ParticleEnsemble(points, self.weights,
                                self.time if time is None else time, self.seed)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["weight"] + [f"x{j}" for j in range(self.dim)])
        for wi, row in zip(self.weights, self.points):
            w.writerow([repr(float(wi))] + [repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, time: float = 0.0, seed=None) -> "ParticleEnsemble":
        rows = list(csv.reader(io.StringIO(text)))
        data = np.array([[float(v) for v in r] for r in rows[1:]])
        return cls(data[:, 1:], data[:, 0], time, seed)


@dataclass(frozen=True)
class TimeGrid:
    """Increasing grid 0 = t_0 < ... < t_N = T."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("time grid needs at least two points")
        if t[0] != 0.0:
            raise ValueError("time grid must start at 0")
        if np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be strictly increasing")
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, horizon: float, n_points: int) -> "TimeGrid":
        t = np.linspace(0.0, horizon, n_points)
        t[-1] = horizon
        return cls(t)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def max_step(self) -> float:
        return float(np.max(np.diff(self.times)))

    def trapezoid_weights(self) -> np.ndarray:
        dt = np.diff(self.times)
        w = np.zeros(self.times.size)
        w[:-1] += dt / 2
        w[1:] += dt / 2
        return w

    def __len__(self):
        return self.times.size


@dataclass(frozen=True)
class ModeSet:
    """Measurable region used for mode-mass accounting.

    kind is one of ``half-space`` (params: normal, offset; x.normal > offset),
    ``interval`` (params: lo, hi; 1D, lo < x < hi) or ``ball``
    (params: center, radius).
    """

    kind: str
    params: dict = field(default_factory=dict)
    label: str = ""

    KINDS = ("half-space", "interval", "ball")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown mode-set kind {self.kind!r}")

    def contains(self, x) -> np.ndarray:
        x = _as_points(x)
        p = self.params
        if self.kind == "half-space":
            nrm = np.atleast_1d(np.asarray(p["normal"], dtype=float))
            return x @ nrm > float(p.get("offset", 0.0))
        if self.kind == "interval":
            if x.shape[1] != 1:
                raise ValueError("interval mode sets are one-dimensional")
            return (x[:, 0] > p["lo"]) & (x[:, 0] < p["hi"])
        c = np.atleast_1d(np.asarray(p["center"], dtype=float))
        return np.linalg.norm(x - c, axis=1) < float(p["radius"])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params, "label": self.label}

    @classmethod
    def from_dict(cls, data: dict) -> "ModeSet":
        return cls(data["kind"], dict(data.get("params", {})), data.get("label", ""))


def sample(mixture: GaussianMixture, n: int, seed: int, time: float = 0.0) -> ParticleEnsemble:
    """Draw ``n`` iid points; identical (seed, n) give identical ensembles."""
    rng = np.random.default_rng(seed)
    return ParticleEnsemble(mixture.sample_points(n, rng), None, time, seed)


def _dedupe(points: np.ndarray, seed) -> np.ndarray:
    _, counts = np.unique(points, axis=0, return_counts=True)
    if np.all(counts == 1):
        return points
    scale = max(float(np.std(points)), 1e-300)
    logger.warning("duplicate points in entropy estimate; jittering by %.1e", 1e-10 * scale)
    rng = np.random.default_rng(0 if seed is None else seed)
    return points + 1e-10 * scale * rng.standard_normal(points.shape)


def knn_entropy_terms(points, k: int = 5, seed=None) -> np.ndarray:
    """Per-point terms of the Kozachenko-Leonenko estimator.

    Their mean is the entropy estimate; their sample standard deviation
    divided by sqrt(n) is used as its standard error.
    """
    x = _as_points(points)
    n, d = x.shape
    if n <= k:
        raise ValueError(f"need more than k={k} points, got {n}")
    x = _dedupe(x, seed)
    dist, _ = cKDTree(x).query(x, k=k + 1)
    r = dist[:, -1]
    log_vd = 0.5 * d * math.log(math.pi) - gammaln(0.5 * d + 1)
    return digamma(n) - digamma(k) + log_vd + d * np.log(r)


def differential_entropy(ens: ParticleEnsemble, k: int = 5) -> float:
    """k-nearest-neighbour estimate of -E[log rho]; uniform weights required."""
    if not ens.uniform:
        raise ValueError("k-NN entropy needs an equally weighted ensemble")
    return float(np.mean(knn_entropy_terms(ens.points, k, ens.seed)))


def entropy_exact_mixture(mixture: GaussianMixture, n_mc: int = 100_000,
                          seed: int = 0) -> tuple[float, float]:
    """Monte Carlo entropy of a mixture with its standard error.

    A single Gaussian is returned in closed form with zero error.
    """
    if mixture.n_components == 1:
        _, logdet = np.linalg.slogdet(mixture.covs[0])
        return 0.5 * (mixture.dim * (1 + math.log(2 * math.pi)) + logdet), 0.0
    x = mixture.sample_points(n_mc, np.random.default_rng(seed))
    lp = -mixture.logpdf(x)
    return float(lp.mean()), float(lp.std(ddof=1) / math.sqrt(n_mc))


def fisher_information(mixture: GaussianMixture, n_mc: int = 100_000, seed: int = 0) -> float:
    """Monte Carlo estimate of E|grad log rho|^2."""
    x = mixture.sample_points(n_mc, np.random.default_rng(seed))
    return float(np.mean(np.sum(mixture.score(x) ** 2, axis=1)))


def _w2_1d(xa, wa, xb, wb) -> float:
    ia, ib = np.argsort(xa, kind="stable"), np.argsort(xb, kind="stable")
    xa, wa, xb, wb = xa[ia], wa[ia], xb[ib], wb[ib]
    ca, cb = np.cumsum(wa), np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    cuts = np.union1d(ca, cb)
    lo = np.concatenate([[0.0], cuts[:-1]])
    mass = cuts - lo
    keep = mass > 0
    mid = 0.5 * (lo + cuts)[keep]
    qa = xa[np.minimum(np.searchsorted(ca, mid), xa.size - 1)]
    qb = xb[np.minimum(np.searchsorted(cb, mid), xb.size - 1)]
    return float(math.sqrt(max(np.sum(mass[keep] * (qa - qb) ** 2), 0.0)))


def w2(a: ParticleEnsemble, b: ParticleEnsemble) -> float:
    """2-Wasserstein distance between two ensembles.

    1D uses the quantile coupling, which is exact for any weights. In
    higher dimension the exact assignment problem is solved, which needs
    equal sizes, uniform weights and at most ``HUNGARIAN_MAX_N`` points.
    """
    if a.dim != b.dim:
        raise ValueError("dimension mismatch")
    if a.dim == 1:
        return _w2_1d(a.points[:, 0], a.weights, b.points[:, 0], b.weights)
    if a.size != b.size or not (a.uniform and b.uniform):
        raise ValueError("multivariate W2 needs equal-size uniform ensembles")
    if a.size > HUNGARIAN_MAX_N:
        raise ValueError(f"ensemble too large for exact assignment (n > {HUNGARIAN_MAX_N})")
    cost = np.sum((a.points[:, None, :] - b.points[None, :, :]) ** 2, axis=2)
    r, c = linear_sum_assignment(cost)
    return float(math.sqrt(cost[r, c].mean()))


def hoeffding_radius(n: int, alpha: float, n_modes: int = 1, n_times: int = 1) -> float:
    """Half-width making a mass estimate from ``n`` samples simultaneously
    valid over ``n_modes`` sets and ``n_times`` grid times at level ``alpha``."""
    if n <= 0:
        raise ValueError("need at least one sample")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return math.sqrt(math.log(2 * n_modes * n_times / alpha) / (2 * n))


class ModeMass(NamedTuple):
    mass: float
    n: int

    def radius(self, alpha: float, n_modes: int = 1, n_times: int = 1) -> float:
        return hoeffding_radius(self.n, alpha, n_modes, n_times)


def mode_mass(ens: ParticleEnsemble, region: ModeSet) -> ModeMass:
    """Weighted fraction of the ensemble inside ``region``."""
    inside = region.contains(ens.points)
    return ModeMass(float(np.sum(ens.weights[inside])), ens.size)

