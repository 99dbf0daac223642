"""Particle integration of continuity and Fokker-Planck dynamics.

ODE trajectories use classical RK4 and diffusions use Euler-Maruyama,
both with a fixed number of substeps per grid interval. Exact Gaussian
laws of affine flows are provided as oracles.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .fields import CurrentVelocity, VelocityField
from .measures import GaussianMixture, ParticleEnsemble, TimeGrid

TRAJECTORY_SCHEMA = "ecfm-trajectory-v1"


class IntegrationError(RuntimeError):
    """Raised when a particle leaves the finite range during integration."""


@dataclass
class TrajectoryRecord:
    """Ensembles at every grid time plus integrator diagnostics."""

    grid: TimeGrid
    ensembles: list
    integrator: str
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.ensembles) != len(self.grid):
            raise ValueError("need one ensemble per grid time")

    def points(self, n: int) -> np.ndarray:
        return self.ensembles[n].points

    def export(self, directory: str) -> None:
        """Write one CSV per grid time and a JSON manifest."""
        os.makedirs(directory, exist_ok=True)
        files = []
        for n, ens in enumerate(self.ensembles):
            name = f"t{n:04d}.csv"
            with open(os.path.join(directory, name), "w") as fh:
                fh.write(ens.to_csv())
            files.append(name)
        manifest = {
            "schema": TRAJECTORY_SCHEMA,
            "times": self.grid.times.tolist(),
            "files": files,
            "integrator": self.integrator,
            "diagnostics": self.diagnostics,
        }
        with open(os.path.join(directory, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory: str) -> "TrajectoryRecord":
        with open(os.path.join(directory, "manifest.json")) as fh:
            manifest = json.load(fh)
        if manifest.get("schema") != TRAJECTORY_SCHEMA:
            raise ValueError("unknown trajectory schema")
        ens = []
        for name, t in zip(manifest["files"], manifest["times"]):
            with open(os.path.join(directory, name)) as fh:
                ens.append(ParticleEnsemble.from_csv(fh.read(), time=t))
        return cls(TimeGrid(np.array(manifest["times"])), ens,
                   manifest["integrator"], manifest.get("diagnostics", {}))


def _check_finite(x: np.ndarray, t: float):
    bad = ~np.all(np.isfinite(x), axis=1)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise IntegrationError(f"particle {i} became non-finite at t={t:.6g}")


def integrate_ode(field: VelocityField, ens0: ParticleEnsemble, grid: TimeGrid,
                  substeps: int = 10) -> TrajectoryRecord:
    """RK4 transport of ``ens0`` along ``field``, recorded at grid times."""
    if grid.horizon > field.horizon + 1e-12:
        raise ValueError("grid extends past the field horizon")
    x = ens0.points.copy()
    out = [ens0.with_points(x.copy(), time=grid.times[0])]
    max_disp = []
    for n in range(grid.n_steps):
        t0, t1 = grid.times[n], grid.times[n + 1]
        h = (t1 - t0) / substeps
        start = x.copy()
        for s in range(substeps):
            t = t0 + s * h
            k1 = field.eval(x, t)
            k2 = field.eval(x + 0.5 * h * k1, t + 0.5 * h)
            k3 = field.eval(x + 0.5 * h * k2, t + 0.5 * h)
            k4 = field.eval(x + h * k3, min(t + h, t1))
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            _check_finite(x, t + h)
        max_disp.append(float(np.max(np.linalg.norm(x - start, axis=1))))
        out.append(ens0.with_points(x.copy(), time=t1))
    return TrajectoryRecord(grid, out, f"rk4/{substeps}", {"max_displacement": max_disp})


def _as_schedule(epsilon) -> Callable[[float], float]:
    if callable(epsilon):
        return epsilon
    e = float(epsilon)
    return lambda t: e


def integrate_sde(drift: VelocityField, epsilon, ens0: ParticleEnsemble, grid: TimeGrid,
                  substeps: int = 10, seed: int = 0) -> TrajectoryRecord:
    """Euler-Maruyama for dX = b dt + sqrt(2 eps) dW."""
    eps = _as_schedule(epsilon)
    rng = np.random.default_rng(seed)
    x = ens0.points.copy()
    out = [ens0.with_points(x.copy(), time=grid.times[0])]
    for n in range(grid.n_steps):
        t0, t1 = grid.times[n], grid.times[n + 1]
        h = (t1 - t0) / substeps
        for s in range(substeps):
            t = t0 + s * h
            e = eps(t)
            if e < 0:
                raise ValueError("diffusivity must be nonnegative")
            noise = rng.standard_normal(x.shape)
            x = x + h * drift.eval(x, t) + math.sqrt(2 * e * h) * noise
            _check_finite(x, t + h)
        out.append(ens0.with_points(x.copy(), time=t1))
    return TrajectoryRecord(grid, out, f"euler-maruyama/{substeps}", {"seed": seed})


def current_velocity(drift: VelocityField, epsilon, score: VelocityField) -> CurrentVelocity:
    """Velocity ``b - eps * grad log rho`` transporting the diffusion's marginals."""
    return CurrentVelocity(drift, _as_schedule(epsilon), score)


def fm_risk(field: VelocityField, teacher: VelocityField, traj: TrajectoryRecord) -> float:
    """Trapezoid estimate of 0.5 * int E|v - u|^2 dt along ``traj``."""
    vals = np.array([
        0.5 * np.sum(ens.weights * np.sum((field.eval(ens.points, t) - teacher.eval(ens.points, t)) ** 2, axis=1))
        for ens, t in zip(traj.ensembles, traj.grid.times)
    ])
    return float(traj.grid.trapezoid_weights() @ vals)


def gaussian_path(mixture: GaussianMixture, A, b, epsilon: float,
                  times: Sequence[float]) -> list[GaussianMixture]:
    """Exact laws of dX = (A X + b) dt + sqrt(2 eps) dW started from ``mixture``.

    Every component stays Gaussian; its mean and covariance solve linear
    moment equations, integrated here to near machine precision.
    """
    d = mixture.dim
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.broadcast_to(np.asarray(b, dtype=float), (d,))
    times = np.asarray(times, dtype=float)

    def rhs(_, y):
        m = y[:d]
        S = y[d:].reshape(d, d)
        dS = A @ S + S @ A.T + 2 * epsilon * np.eye(d)
        return np.concatenate([A @ m + b, dS.ravel()])

    per_time = [[] for _ in times]
    for mean, cov in zip(mixture.means, mixture.covs):
        if times[-1] == 0:
            ys = np.tile(np.concatenate([mean, cov.ravel()])[:, None], (1, times.size))
        else:
            sol = solve_ivp(rhs, (0.0, times[-1]), np.concatenate([mean, cov.ravel()]),
                            t_eval=times, rtol=1e-12, atol=1e-14, method="DOP853")
            ys = sol.y
        for n in range(times.size):
            S = ys[d:, n].reshape(d, d)
            per_time[n].append((ys[:d, n], 0.5 * (S + S.T)))
    return [GaussianMixture(mixture.weights, np.array([c[0] for c in comps]),
                            np.array([c[1] for c in comps])) for comps in per_time]


def trajectory_csv(traj: TrajectoryRecord) -> str:
    """Long-format CSV (time index, time, particle, coordinates) of a trajectory."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d = traj.ensembles[0].dim
    w.writerow(["n", "t", "i"] + [f"x{j}" for j in range(d)])
    for n, ens in enumerate(traj.ensembles):
        for i, row in enumerate(ens.points):
            w.writerow([n, repr(float(traj.grid.times[n])), i] + [repr(float(v)) for v in row])
    return buf.getvalue()
