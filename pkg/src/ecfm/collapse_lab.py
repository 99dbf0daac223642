"""Collapse-then-redisperse transport maps in 1D.

The map family is ``Phi_t(x) = s(t) x + d(t) sgn(x)``. The scale s contracts
from 1 to eps over a window of length tau, holds on a plateau, and expands
back symmetrically so that Phi_0 = Phi_T = identity. The offset
``d = delta (1 - s) / (1 - eps)`` moves the two half-lines to +-delta on
the plateau. Endpoint masses never move between half-lines, yet the mass
of each mode core drains out during the plateau.

Two contraction profiles are provided. ``geometric`` drives log s
linearly to log eps, so the entropy rate equals log(eps) / tau throughout
the window. ``linear`` uses s = 1 - t / tau until s reaches eps, giving the
Eulerian velocity -y / (tau - t) in the bulk of the window. In both the
derivative of the profile is ramped to zero by a raised cosine of
half-width ``mollifier * tau`` around the end of the contraction, so the
map is C^1 in time.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .dynamics import TrajectoryRecord, fm_risk
from .entropy_control import EntropyRateEstimate, EntropyRateSeries, lambda_eff
from .fields import AnalyticField, VelocityField
from .measures import (GaussianMixture, ModeSet, ParticleEnsemble, TimeGrid,
                       knn_entropy_terms, mode_mass)

PROFILES = ("geometric", "linear")


@dataclass(frozen=True)
class CollapseParams:
    """Parameters of one member of the collapse family.

    Parameters
    ----------
    eps : float
        Plateau scale, in (0, 1).
    delta : float
        Plateau offset, > 0.
    tau : float
        Contraction window length.
    a, sigma : float
        Mode separation and component standard deviation of the endpoints.
    horizon : float
    mollifier : float
        Ramp half-width as a fraction of tau.
    profile : str
        ``geometric`` or ``linear``.
    """

    eps: float
    delta: float
    tau: float
    a: float = 4.0
    sigma: float = 1.0
    horizon: float = 1.0
    mollifier: float = 0.01
    profile: str = "geometric"

    def __post_init__(self):
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        if not 0 < self.mollifier < 0.5:
            raise ValueError("mollifier fraction must lie in (0, 0.5)")
        if not 0 < self.contraction_end < self.horizon / 2:
            raise ValueError("contraction window must end before T/2")

    @property
    def half_width(self) -> float:
        return self.mollifier * self.tau

    @property
    def ramp_center(self) -> float:
        """Time at which the unmollified profile reaches scale eps."""
        return self.tau if self.profile == "geometric" else self.tau * (1 - self.eps)

    @property
    def contraction_end(self) -> float:
        return self.ramp_center + self.half_width

    @property
    def rate_coupling(self) -> float:
        """|log eps| / tau."""
        return abs(math.log(self.eps)) / self.tau

    @property
    def offset_ratio(self) -> float:
        return self.delta / self.eps

    def endpoints(self) -> GaussianMixture:
        return GaussianMixture.two_mode(self.a, self.sigma)

    def cores(self) -> tuple[ModeSet, ModeSet]:
        """Core intervals (+-a - sigma, +-a + sigma)."""
        r = self.sigma
        return (ModeSet("interval", {"lo": self.a - r, "hi": self.a + r}, "core+"),
                ModeSet("interval", {"lo": -self.a - r, "hi": -self.a + r}, "core-"))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("eps", "delta", "tau", "a", "sigma", "horizon", "mollifier", "profile")}


def _ramp(u: float, w: float) -> tuple[float, float]:
    """Raised-cosine cutoff phi and its integral I over [c - w, c + w].

    ``u`` is time relative to c - w. phi falls from 1 to 0 and I from 0 to w.
    """
    u = min(max(u, 0.0), 2 * w)
    phi = 0.5 * (1 + math.cos(math.pi * u / (2 * w)))
    integral = 0.5 * u + (w / math.pi) * math.sin(math.pi * u / (2 * w))
    return phi, integral


def _profile(p: CollapseParams, t: float) -> tuple[float, float]:
    """Contraction-phase profile value q(t) and derivative dq/dt.

    q is log s for the geometric profile and s for the linear one.
    """
    c, w = p.ramp_center, p.half_width
    slope = math.log(p.eps) / p.tau if p.profile == "geometric" else -1.0 / p.tau
    if t <= c - w:
        prog, phi = t, 1.0
    elif t >= c + w:
        prog, phi = c, 0.0
    else:
        phi, integral = _ramp(t - (c - w), w)
        prog = (c - w) + integral
    q0 = 0.0 if p.profile == "geometric" else 1.0
    return q0 + slope * prog, slope * phi


def scale(p: CollapseParams, t: float) -> tuple[float, float]:
    """s(t) and ds/dt, mirrored so the expansion retraces the contraction."""
    T = p.horizon
    if not -1e-12 <= t <= T + 1e-12:
        raise ValueError(f"time {t} outside [0, {T}]")
    t = min(max(t, 0.0), T)
    mirror = t > T / 2
    q, dq = _profile(p, T - t if mirror else t)
    if mirror:
        dq = -dq
    if p.profile == "geometric":
        s = math.exp(q)
        return s, s * dq
    return q, dq


def collapse_map(p: CollapseParams, t: float, x) -> np.ndarray:
    """Phi_t(x) = s x + d sgn(x)."""
    x = np.asarray(x, dtype=float)
    s, _ = scale(p, t)
    d = p.delta * (1 - s) / (1 - p.eps)
    return s * x + d * np.sign(x)


def _inverse(p: CollapseParams, t: float, y) -> tuple[np.ndarray, float, float]:
    y = np.asarray(y, dtype=float)
    s, ds = scale(p, t)
    d = p.delta * (1 - s) / (1 - p.eps)
    gap = (np.abs(y) < d) & (y != 0)
    if np.any(gap):
        raise ValueError(f"points in (-{d:.3g}, {d:.3g}) are outside the range of the map")
    x = np.sign(y) * (np.abs(y) - d) / s
    return x, s, ds


def collapse_velocity(p: CollapseParams, t: float, y) -> np.ndarray:
    """Eulerian velocity dPhi_t/dt evaluated at Phi_t^{-1}(y)."""
    x, s, ds = _inverse(p, t, y)
    dd = -p.delta * ds / (1 - p.eps)
    return ds * x + dd * np.sign(x)


def collapse_divergence(p: CollapseParams, t: float, y) -> np.ndarray:
    """d v / d y = s'/s, the same at every point of the range."""
    y = np.asarray(y, dtype=float)
    s, ds = scale(p, t)
    return np.full(y.shape[0] if y.ndim else 1, ds / s)


def collapse_field(p: CollapseParams) -> AnalyticField:
    return AnalyticField.collapse(p)


def collapse_grid(p: CollapseParams, n_window: int = 100, n_plateau: int = 20) -> TimeGrid:
    """Time grid dense inside both transition windows and sparse on the plateau."""
    T, e = p.horizon, p.contraction_end
    head = np.linspace(0.0, e, n_window + 1)
    mid = np.linspace(e, T - e, n_plateau + 1)[1:-1]
    tail = T - head[::-1]
    return TimeGrid(np.concatenate([head, mid, tail]))


def pushforward(p: CollapseParams, ens0: ParticleEnsemble, grid: TimeGrid) -> TrajectoryRecord:
    """Exact trajectory ``Phi_t`` applied to ``ens0`` at each grid time."""
    out = [ens0.with_points(collapse_map(p, t, ens0.points), time=t) for t in grid.times]
    return TrajectoryRecord(grid, out, "exact-map")


@dataclass
class CollapseDiagnostics:
    params: CollapseParams
    grid: TimeGrid
    entropy: np.ndarray
    entropy_se: np.ndarray
    rate: EntropyRateSeries
    half_masses: np.ndarray
    core_masses: np.ndarray
    fm_risk_excess: float
    lambda_max: float
    lambda_lcb: float
    w2_endpoint: float

    @property
    def min_core_mass(self) -> float:
        """Smallest core mass over plateau times, over both cores."""
        p = self.params
        on = (self.grid.times >= p.contraction_end) & (self.grid.times <= p.horizon - p.contraction_end)
        return float(self.core_masses[:, on].max(axis=0).min()) if np.any(on) else math.nan

    @property
    def plateau_core_mass(self) -> float:
        """Largest core mass seen anywhere on the plateau."""
        p = self.params
        on = (self.grid.times >= p.contraction_end) & (self.grid.times <= p.horizon - p.contraction_end)
        return float(self.core_masses[:, on].max())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "entropy", "rate", "M+", "M-", "m+", "m-"])
        for n, t in enumerate(self.grid.times):
            w.writerow([repr(float(t)), repr(float(self.entropy[n])),
                        repr(float(self.rate.values[n])),
                        repr(float(self.half_masses[0, n])), repr(float(self.half_masses[1, n])),
                        repr(float(self.core_masses[0, n])), repr(float(self.core_masses[1, n]))])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "rate_coupling": self.params.rate_coupling,
            "offset_ratio": self.params.offset_ratio,
            "lambda_max": self.lambda_max,
            "lambda_lcb": self.lambda_lcb,
            "fm_risk_excess": self.fm_risk_excess,
            "plateau_core_mass": self.plateau_core_mass,
            "w2_endpoint": self.w2_endpoint,
        }


def diagnose(p: CollapseParams, teacher: VelocityField | None, n: int, seed: int,
             k: int = 5, grid: TimeGrid | None = None, alpha: float = 0.05) -> CollapseDiagnostics:
    """Pushforward ensembles, entropies, rates, masses and risk for one member."""
    from .measures import sample, w2

    grid = collapse_grid(p) if grid is None else grid
    teacher = AnalyticField.zero(1, p.horizon) if teacher is None else teacher
    ens0 = sample(p.endpoints(), n, seed)
    traj = pushforward(p, ens0, grid)
    fld = collapse_field(p)
    terms = [knn_entropy_terms(e.points, k, seed) for e in traj.ensembles]
    entropy = np.array([tm.mean() for tm in terms])
    entropy_se = np.array([tm.std(ddof=1) / math.sqrt(tm.size) for tm in terms])
    est = []
    for i, (e, t) in enumerate(zip(traj.ensembles, grid.times)):
        div = fld.divergence(e.points, t)
        est.append(EntropyRateEstimate(i, float(t), float(div.mean()), 0.0, 0, "div-exact"))
    rate = EntropyRateSeries(grid, est, alpha)
    lam_max, lam_lcb = lambda_eff(rate)
    halves = (ModeSet("half-space", {"normal": [1.0], "offset": 0.0}, "M+"),
              ModeSet("half-space", {"normal": [-1.0], "offset": 0.0}, "M-"))
    half = np.array([[mode_mass(e, A).mass for e in traj.ensembles] for A in halves])
    core = np.array([[mode_mass(e, A).mass for e in traj.ensembles] for A in p.cores()])
    risk = fm_risk(fld, teacher, traj)
    return CollapseDiagnostics(p, grid, entropy, entropy_se, rate, half, core, risk,
                               lam_max, lam_lcb, w2(traj.ensembles[0], traj.ensembles[-1]))


def run_collapse_sequence(params_list, teacher: VelocityField | None = None, n: int = 20_000,
                          seed: int = 0, k: int = 5) -> list[CollapseDiagnostics]:
    """Diagnostics for each member; member i uses seed ``seed + i``."""
    return [diagnose(p, teacher, n, seed + i, k) for i, p in enumerate(params_list)]


def halving_sequence(n_members: int = 4, eps0: float = 0.04, tau0: float = 0.1,
                     a: float = 4.0, sigma: float = 1.0, horizon: float = 1.0,
                     profile: str = "geometric") -> list[CollapseParams]:
    """eps_n = eps0 2^-n, tau_n = tau0 2^-n, delta_n = eps_n^2 for n = 1..n_members."""
    out = []
    for i in range(1, n_members + 1):
        e = eps0 * 2.0 ** -i
        out.append(CollapseParams(e, e ** 2, tau0 * 2.0 ** -i, a, sigma, horizon, profile=profile))
    return out


def kinetic_lower_bound(p: CollapseParams, ens0: ParticleEnsemble) -> float:
    """Lower bound on 0.5 int E|v|^2 over any path from Phi_0 to Phi_tau and back.

    Moving the ensemble to its plateau position within a window of length
    e costs at least W2^2 / (2 e) by Cauchy-Schwarz, and so does the return.
    """
    from .measures import w2

    e = p.contraction_end
    plateau = ens0.with_points(collapse_map(p, e, ens0.points), time=e)
    return 2 * w2(ens0, plateau) ** 2 / (2 * e)


def summary_json(diags) -> str:
    return json.dumps([d.summary() for d in diags], indent=2, sort_keys=True)
