"""Entropy-rate estimators, confidence bounds and effective budgets.

Entropy is H = -int rho log rho throughout, so a contracting flow has a
negative rate and the budget constraint reads dH/dt >= -lambda.

The per-time standard error is used as the sub-Gaussian scale in the
confidence radius. That is a plug-in choice, not a proven proxy.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .dynamics import TrajectoryRecord
from .fields import VelocityField, divergence_hutchinson
from .measures import ParticleEnsemble, TimeGrid, knn_entropy_terms

METHODS = ("div-exact", "div-hutchinson", "fp-form", "finite-difference")
DEFAULT_ALPHA = 0.05
DEFAULT_PROBES = 64


@dataclass(frozen=True)
class EntropyRateEstimate:
    n: int
    time: float
    value: float
    std_error: float
    probes: int
    method: str

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown estimator {self.method!r}")
        if not math.isfinite(self.value) or not self.std_error >= 0:
            raise ValueError("estimate must be finite with nonnegative error")


@dataclass(frozen=True)
class EntropyRateSeries:
    grid: TimeGrid
    estimates: tuple
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if len(self.estimates) != len(self.grid):
            raise ValueError("need one estimate per grid time")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        object.__setattr__(self, "estimates", tuple(self.estimates))

    @property
    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.estimates])

    @property
    def std_errors(self) -> np.ndarray:
        return np.array([e.std_error for e in self.estimates])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "value", "std_error", "lcb", "method"])
        for e, b in zip(self.estimates, lcb(self, self.alpha)):
            w.writerow([repr(e.time), repr(e.value), repr(e.std_error), repr(float(b)), e.method])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, alpha: float = DEFAULT_ALPHA) -> "EntropyRateSeries":
        rows = list(csv.DictReader(io.StringIO(text)))
        grid = TimeGrid(np.array([float(r["t"]) for r in rows]))
        est = [EntropyRateEstimate(n, float(r["t"]), float(r["value"]),
                                   float(r["std_error"]), 0, r["method"])
               for n, r in enumerate(rows)]
        return cls(grid, est, alpha)


def _mean_se(vals: np.ndarray) -> tuple[float, float]:
    if vals.size < 2:
        return float(vals.mean()), 0.0
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size))


def _require_uniform(ens: ParticleEnsemble):
    if not ens.uniform:
        raise ValueError("entropy-rate estimators need an equally weighted ensemble")


def entropy_rate_div(field: VelocityField, ens: ParticleEnsemble, mode: str = "exact",
                     n_probes: int = DEFAULT_PROBES, seed: int = 0,
                     n: int = 0) -> EntropyRateEstimate:
    """Ensemble mean of div v, the entropy rate of a continuity-equation flow."""
    _require_uniform(ens)
    if mode == "exact":
        div = field.divergence(ens.points, ens.time)
        value, se = _mean_se(div)
        return EntropyRateEstimate(n, ens.time, value, se, 0, "div-exact")
    if mode == "hutchinson":
        per_point, _ = divergence_hutchinson(field, ens.points, ens.time, n_probes, seed)
        # the spread of per-point probe means carries both probe and sample noise
        value, se = _mean_se(per_point)
        return EntropyRateEstimate(n, ens.time, value, se, n_probes, "div-hutchinson")
    raise ValueError(f"unknown divergence mode {mode!r}")


def entropy_rate_fp(drift: VelocityField, epsilon: float, score: VelocityField,
                    ens: ParticleEnsemble, n: int = 0) -> EntropyRateEstimate:
    """Fokker-Planck form E[div b] + eps * E|score|^2."""
    _require_uniform(ens)
    if epsilon < 0:
        raise ValueError("diffusivity must be nonnegative")
    vals = drift.divergence(ens.points, ens.time)
    if epsilon > 0:
        vals = vals + epsilon * np.sum(score.eval(ens.points, ens.time) ** 2, axis=1)
    value, se = _mean_se(vals)
    return EntropyRateEstimate(n, ens.time, value, se, 0, "fp-form")


def entropy_rate_fd(traj: TrajectoryRecord, k: int = 5, scheme: str = "central",
                    alpha: float = DEFAULT_ALPHA) -> EntropyRateSeries:
    """Finite differences of k-NN entropies along a trajectory.

    ``central`` uses centred differences at interior times and one-sided
    ones at the ends; ``forward`` reports the interval average
    (H(t_{n+1}) - H(t_n)) / dt at t_n and repeats the last interval at t_N.
    Standard errors come from per-particle differences of the k-NN terms,
    which exploits the particle lineage shared across times.
    """
    if scheme not in ("central", "forward"):
        raise ValueError(f"unknown scheme {scheme!r}")
    for ens in traj.ensembles:
        _require_uniform(ens)
    terms = [knn_entropy_terms(e.points, k, e.seed) for e in traj.ensembles]
    t = traj.grid.times
    N = t.size - 1
    est = []
    for n in range(N + 1):
        if scheme == "central" and 0 < n < N:
            lo, hi = n - 1, n + 1
        elif n < N:
            lo, hi = n, n + 1
        else:
            lo, hi = N - 1, N
        value, se = _mean_se((terms[hi] - terms[lo]) / (t[hi] - t[lo]))
        est.append(EntropyRateEstimate(n, float(t[n]), value, se, 0, "finite-difference"))
    return EntropyRateSeries(traj.grid, est, alpha)


def div_series(field: VelocityField, traj: TrajectoryRecord, mode: str = "exact",
               n_probes: int = DEFAULT_PROBES, seed: int = 0,
               alpha: float = DEFAULT_ALPHA) -> EntropyRateSeries:
    """``entropy_rate_div`` at every time of a trajectory."""
    est = [entropy_rate_div(field, ens, mode, n_probes, seed + n, n)
           for n, ens in enumerate(traj.ensembles)]
    return EntropyRateSeries(traj.grid, est, alpha)


def lcb_multiplier(n_times: int, alpha: float) -> float:
    """sqrt(2 log(2 (N+1) / alpha)) for a grid of ``n_times`` = N + 1 points."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return math.sqrt(2 * math.log(2 * n_times / alpha))


def lcb(series: EntropyRateSeries, alpha: float | None = None) -> np.ndarray:
    """Bonferroni-corrected lower confidence bounds, one per grid time."""
    alpha = series.alpha if alpha is None else alpha
    z = lcb_multiplier(len(series.estimates), alpha)
    return series.values - z * series.std_errors


def lambda_eff(series: EntropyRateSeries, alpha: float | None = None) -> tuple[float, float]:
    """Plug-in effective budgets (max_n (-rate_n)_+, max_n (-LCB_n)_+)."""
    if not series.estimates:
        raise ValueError("empty series")
    lam_max = max(float(np.max(-series.values)), 0.0)
    lam_lcb = max(float(np.max(-lcb(series, alpha))), 0.0)
    return lam_max, lam_lcb
