"""Time-dependent velocity fields with exact Jacobians.

Every field maps points of shape (n, d) at a scalar time to velocities of
shape (n, d). The trainable field is an RBF expansion with an affine part
whose parameters are interpolated linearly between time knots, so both
the velocity and its divergence are linear in the parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .measures import GaussianMixture, _as_points

FIELD_SCHEMA = "ecfm-rbf-field-v1"
_T_SLACK = 1e-12


class VelocityField:
    """Base class. Subclasses implement ``eval`` and ``jacobian``."""

    horizon: float = math.inf
    dim: int = 1

    def _check_time(self, t: float) -> float:
        t = float(t)
        if not (-_T_SLACK <= t <= self.horizon + _T_SLACK):
            raise ValueError(f"time {t} outside the field horizon [0, {self.horizon}]")
        return min(max(t, 0.0), self.horizon)

    def eval(self, x, t) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x, t) -> np.ndarray:
        raise NotImplementedError

    def divergence(self, x, t) -> np.ndarray:
        return np.trace(self.jacobian(x, t), axis1=1, axis2=2)

    def jvp(self, x, t, u) -> np.ndarray:
        return np.einsum("nij,nj->ni", self.jacobian(x, t), u)

    def __call__(self, x, t):
        return self.eval(x, t)


def eval(field: VelocityField, x, t) -> np.ndarray:  # noqa: A001
    return field.eval(x, t)


def divergence_exact(field: VelocityField, x, t) -> np.ndarray:
    return field.divergence(x, t)


def divergence_hutchinson(field: VelocityField, x, t, n_probes: int = 64,
                          seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Rademacher trace estimate of the divergence at each point.

    Returns the per-point estimate and its standard error over probes.
    """
    x = _as_points(x, field.dim)
    if n_probes < 2:
        raise ValueError("need at least two probes for a standard error")
    rng = np.random.default_rng(seed)
    samples = np.empty((n_probes, x.shape[0]))
    for r in range(n_probes):
        z = rng.choice([-1.0, 1.0], size=x.shape)
        samples[r] = np.sum(z * field.jvp(x, t, z), axis=1)
    return samples.mean(axis=0), samples.std(axis=0, ddof=1) / math.sqrt(n_probes)


def _hat_weights(knots: np.ndarray, t: float) -> tuple[int, float]:
    """Index j and weight on knot j (1 - weight on j + 1) for linear interpolation."""
    j = int(np.searchsorted(knots, t, side="right") - 1)
    j = min(max(j, 0), knots.size - 2)
    lam = (knots[j + 1] - t) / (knots[j + 1] - knots[j])
    return j, float(lam)


@dataclass
class RbfField(VelocityField):
    """Gaussian-RBF velocity field with an affine part.

    At knot j the field is ``A_j x + b_j + sum_m W_jm k_m(x)`` with
    ``k_m(x) = exp(-|x - c_m|^2 / (2 h^2))``. Between knots each parameter
    is interpolated linearly in t.

    Parameters
    ----------
    knots : ndarray, shape (K,)
        Increasing times, first 0 and last the horizon.
    centers : ndarray, shape (m, d)
    bandwidth : float
    A : ndarray, shape (K, d, d)
    b : ndarray, shape (K, d)
    W : ndarray, shape (K, m, d)
    """

    knots: np.ndarray
    centers: np.ndarray
    bandwidth: float
    A: np.ndarray
    b: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=float)
        self.centers = _as_points(self.centers)
        m, d = self.centers.shape
        k = self.knots.size
        self.A = np.asarray(self.A, dtype=float).reshape(k, d, d)
        self.b = np.asarray(self.b, dtype=float).reshape(k, d)
        self.W = np.asarray(self.W, dtype=float).reshape(k, m, d)
        if k < 2 or self.knots[0] != 0 or np.any(np.diff(self.knots) <= 0):
            raise ValueError("knots must be increasing from 0 with at least two entries")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        self.dim = d
        self.horizon = float(self.knots[-1])

    @classmethod
    def zeros(cls, knots, centers, bandwidth) -> "RbfField":
        centers = _as_points(centers)
        m, d = centers.shape
        k = len(knots)
        return cls(knots, centers, bandwidth, np.zeros((k, d, d)),
                   np.zeros((k, d)), np.zeros((k, m, d)))

    @property
    def n_centers(self) -> int:
        return self.centers.shape[0]

    @property
    def knot_size(self) -> int:
        d, m = self.dim, self.n_centers
        return d * d + d + m * d

    @property
    def theta(self) -> np.ndarray:
        """Flat parameters, one block of ``knot_size`` per knot."""
        k = self.knots.size
        return np.concatenate([self.A.reshape(k, -1), self.b,
                               self.W.reshape(k, -1)], axis=1).ravel()

    def with_theta(self, theta) -> "RbfField":
        d, m, k = self.dim, self.n_centers, self.knots.size
        th = np.asarray(theta, dtype=float).reshape(k, self.knot_size)
        return RbfField(self.knots, self.centers, self.bandwidth,
                        th[:, :d * d], th[:, d * d:d * d + d], th[:, d * d + d:])

    def kernel(self, x) -> np.ndarray:
        x = _as_points(x, self.dim)
        sq = np.sum((x[:, None, :] - self.centers[None, :, :]) ** 2, axis=2)
        return np.exp(-0.5 * sq / self.bandwidth ** 2)

    def knot_features(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Design tensors F (n, d, p) and G (n, p) at a single knot.

        The knot's velocity is ``F @ theta_j`` and its divergence ``G @ theta_j``.
        """
        x = _as_points(x, self.dim)
        n, d = x.shape
        m = self.n_centers
        k = self.kernel(x)
        F = np.zeros((n, d, self.knot_size))
        G = np.zeros((n, self.knot_size))
        for c in range(d):
            F[:, c, c * d:(c + 1) * d] = x
            F[:, c, d * d + c] = 1.0
            F[:, c, d * d + d + c::d] = k
            G[:, c * d + c] = 1.0
            dk = -(x[:, c:c + 1] - self.centers[None, :, c]) / self.bandwidth ** 2 * k
            G[:, d * d + d + c::d] = dk
        return F, G

    def knot_hutchinson_features(self, x, z) -> np.ndarray:
        """Design matrix (n, p) of the probe quadratic form z^T J z at a knot."""
        x = _as_points(x, self.dim)
        z = _as_points(z, self.dim)
        n, d = x.shape
        k = self.kernel(x)
        grad_k = -(x[:, None, :] - self.centers[None, :, :]) / self.bandwidth ** 2 * k[:, :, None]
        zk = np.einsum("nmj,nj->nm", grad_k, z)
        H = np.zeros((n, self.knot_size))
        H[:, :d * d] = (z[:, :, None] * z[:, None, :]).reshape(n, d * d)
        H[:, d * d + d:] = (zk[:, :, None] * z[:, None, :]).reshape(n, -1)
        return H

    def _params_at(self, t):
        t = self._check_time(t)
        j, lam = _hat_weights(self.knots, t)
        A = lam * self.A[j] + (1 - lam) * self.A[j + 1]
        b = lam * self.b[j] + (1 - lam) * self.b[j + 1]
        W = lam * self.W[j] + (1 - lam) * self.W[j + 1]
        return A, b, W

    def eval(self, x, t) -> np.ndarray:
        x = _as_points(x, self.dim)
        A, b, W = self._params_at(t)
        return x @ A.T + b + self.kernel(x) @ W

    def jacobian(self, x, t) -> np.ndarray:
        x = _as_points(x, self.dim)
        A, _, W = self._params_at(t)
        k = self.kernel(x)
        diff = (x[:, None, :] - self.centers[None, :, :]) / self.bandwidth ** 2
        # d/dx_j of sum_m W_mc k_m = -sum_m W_mc k_m diff_mj
        J = -np.einsum("mc,nm,nmj->ncj", W, k, diff)
        return J + A[None, :, :]

    def divergence(self, x, t) -> np.ndarray:
        x = _as_points(x, self.dim)
        A, _, W = self._params_at(t)
        k = self.kernel(x)
        diff = (x[:, None, :] - self.centers[None, :, :]) / self.bandwidth ** 2
        return np.trace(A) - np.einsum("mc,nm,nmc->n", W, k, diff)

    def to_dict(self) -> dict:
        return {
            "schema": FIELD_SCHEMA,
            "knots": self.knots.tolist(),
            "centers": self.centers.tolist(),
            "bandwidth": float(self.bandwidth),
            "A": self.A.tolist(),
            "b": self.b.tolist(),
            "W": self.W.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RbfField":
        if data.get("schema") != FIELD_SCHEMA:
            raise ValueError(f"unknown field schema {data.get('schema')!r}")
        return cls(np.array(data["knots"]), np.array(data["centers"]),
                   float(data["bandwidth"]), np.array(data["A"]),
                   np.array(data["b"]), np.array(data["W"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RbfField":
        return cls.from_dict(json.loads(text))


class AnalyticField(VelocityField):
    """Closed-form fields selected by tag.

    Tags: ``zero``, ``custom-affine`` (v = A x + b), ``linear-contraction``
    (v = -x / (tau - t), defined for t < tau), ``linear-interpolant`` (the
    marginal velocity of the independent-coupling straight-line
    interpolant between two Gaussian mixtures) and ``collapse-family``.
    """

    TAGS = ("zero", "custom-affine", "linear-contraction",
            "linear-interpolant", "collapse-family")

    def __init__(self, tag: str, dim: int = 1, horizon: float = 1.0, **params):
        if tag not in self.TAGS:
            raise ValueError(f"unknown analytic field tag {tag!r}")
        self.tag = tag
        self.dim = dim
        self.horizon = float(horizon)
        self.params = params
        if tag == "custom-affine":
            self._A = np.atleast_2d(np.asarray(params.get("A", np.zeros((dim, dim))), float))
            self._b = np.atleast_1d(np.asarray(params.get("b", np.zeros(dim)), float))
        elif tag == "linear-contraction":
            self._tau = float(params["tau"])
            if self.horizon >= self._tau:
                raise ValueError("linear contraction horizon must be below tau")
        elif tag == "linear-interpolant":
            self._setup_interpolant(params["mu0"], params["mu1"])

    @classmethod
    def zero(cls, dim=1, horizon=1.0):
        return cls("zero", dim, horizon)

    @classmethod
    def affine(cls, A, b=None, horizon=1.0):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        d = A.shape[0]
        return cls("custom-affine", d, horizon, A=A, b=np.zeros(d) if b is None else b)

    @classmethod
    def contraction(cls, tau, horizon=None):
        return cls("linear-contraction", 1, 0.5 * tau if horizon is None else horizon, tau=tau)

    @classmethod
    def interpolant(cls, mu0: GaussianMixture, mu1: GaussianMixture, horizon=1.0):
        return cls("linear-interpolant", mu0.dim, horizon, mu0=mu0, mu1=mu1)

    @classmethod
    def collapse(cls, params):
        """Velocity of the collapse map with ``CollapseParams`` ``params``."""
        return cls("collapse-family", 1, params.horizon, collapse=params)

    def _setup_interpolant(self, mu0, mu1):
        if mu0.dim != mu1.dim:
            raise ValueError("endpoint dimension mismatch")
        i, j = np.meshgrid(np.arange(mu0.n_components), np.arange(mu1.n_components),
                           indexing="ij")
        i, j = i.ravel(), j.ravel()
        self._pw = mu0.weights[i] * mu1.weights[j]
        self._m0, self._m1 = mu0.means[i], mu1.means[j]
        self._S0, self._S1 = mu0.covs[i], mu1.covs[j]

    def _interpolant_terms(self, x, t):
        s = t / self.horizon
        mu = (1 - s) * self._m0 + s * self._m1
        C = (1 - s) ** 2 * self._S0 + s ** 2 * self._S1
        cross = s * self._S1 - (1 - s) * self._S0
        prec = np.linalg.inv(C)
        M = np.einsum("kij,kjl->kil", cross, prec) / self.horizon
        dm = (self._m1 - self._m0) / self.horizon
        diff = x[:, None, :] - mu[None, :, :]
        pd = np.einsum("kij,nkj->nki", prec, diff)
        _, logdet = np.linalg.slogdet(C)
        a = -0.5 * (np.einsum("nki,nki->nk", diff, pd) + logdet[None, :]) + np.log(self._pw)
        a -= a.max(axis=1, keepdims=True)
        r = np.exp(a)
        r /= r.sum(axis=1, keepdims=True)
        cond = dm[None, :, :] + np.einsum("kij,nkj->nki", M, diff)
        return r, cond, M, -pd

    def eval(self, x, t) -> np.ndarray:
        x = _as_points(x, self.dim)
        t = self._check_time(t)
        if self.tag == "zero":
            return np.zeros_like(x)
        if self.tag == "custom-affine":
            return x @ self._A.T + self._b
        if self.tag == "linear-contraction":
            return -x / (self._tau - t)
        if self.tag == "linear-interpolant":
            r, cond, _, _ = self._interpolant_terms(x, t)
            return np.einsum("nk,nki->ni", r, cond)
        from .collapse_lab import collapse_velocity
        return collapse_velocity(self.params["collapse"], t, x)

    def jacobian(self, x, t) -> np.ndarray:
        x = _as_points(x, self.dim)
        t = self._check_time(t)
        n, d = x.shape
        if self.tag == "zero":
            return np.zeros((n, d, d))
        if self.tag == "custom-affine":
            return np.broadcast_to(self._A, (n, d, d)).copy()
        if self.tag == "linear-contraction":
            return np.full((n, 1, 1), -1.0 / (self._tau - t))
        if self.tag == "linear-interpolant":
            r, cond, M, g = self._interpolant_terms(x, t)
            gbar = np.einsum("nk,nki->ni", r, g)
            dr = r[:, :, None] * (g - gbar[:, None, :])
            return np.einsum("nk,kij->nij", r, M) + np.einsum("nki,nkj->nij", cond, dr)
        from .collapse_lab import collapse_divergence
        return collapse_divergence(self.params["collapse"], t, x)[:, None, None]


class ScoreField(VelocityField):
    """Exact score of a Gaussian-mixture law, static or time-indexed.

    Parameters
    ----------
    law : GaussianMixture or callable
        A fixed mixture, or a map from time to the mixture at that time.
    """

    def __init__(self, law: GaussianMixture | Callable[[float], GaussianMixture],
                 horizon: float = math.inf):
        self._law = law
        self.horizon = float(horizon)
        probe = law if isinstance(law, GaussianMixture) else law(0.0)
        self.dim = probe.dim

    def law_at(self, t) -> GaussianMixture:
        if isinstance(self._law, GaussianMixture):
            return self._law
        return self._law(self._check_time(t))

    def eval(self, x, t) -> np.ndarray:
        return self.law_at(t).score(x)

    def jacobian(self, x, t) -> np.ndarray:
        return self.law_at(t).score_jacobian(x)


class CurrentVelocity(VelocityField):
    """Deterministic velocity ``b - eps(t) * score`` carrying the same marginals
    as the diffusion with drift ``b`` and diffusivity ``eps``."""

    def __init__(self, drift: VelocityField, epsilon, score: VelocityField):
        self.drift = drift
        self.score = score
        self.epsilon = epsilon if callable(epsilon) else (lambda t, e=float(epsilon): e)
        self.dim = drift.dim
        self.horizon = min(drift.horizon, score.horizon)

    def eval(self, x, t) -> np.ndarray:
        return self.drift.eval(x, t) - self.epsilon(t) * self.score.eval(x, t)

    def jacobian(self, x, t) -> np.ndarray:
        return self.drift.jacobian(x, t) - self.epsilon(t) * self.score.jacobian(x, t)


class SumField(VelocityField):
    """Pointwise sum of fields, used for perturbation experiments."""

    def __init__(self, *fields: VelocityField):
        self.fields = fields
        self.dim = fields[0].dim
        self.horizon = min(f.horizon for f in fields)

    def eval(self, x, t):
        return sum(f.eval(x, t) for f in self.fields)

    def jacobian(self, x, t):
        return sum(f.jacobian(x, t) for f in self.fields)
