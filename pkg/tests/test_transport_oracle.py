import math

import numpy as np
import pytest

from ecfm.dynamics import gaussian_path, integrate_ode
from ecfm.fields import AnalyticField, CurrentVelocity, ScoreField
from ecfm.measures import GaussianMixture, TimeGrid, sample
from ecfm.trainer import INF, TrainerConfig, two_gaussian_problem
from ecfm.transport_oracle import (GridDensity, SinkhornError, bb_geodesic,
                                   ecfm_kl_identity_check, entropic_gaussian_marginal,
                                   gamma_sweep, gamma_table_csv, kl_control_energy,
                                   log_heat_kernel, sb_marginal, sinkhorn, sup_w2_to_geodesic,
                                   w2_gaussian, w2_to_gaussian)

LO, HI, M = -8.0, 8.0, 400


def grid_gaussian(mean, std, m=M):
    return GridDensity.from_mixture(GaussianMixture.gaussian([mean], std ** 2), LO, HI, m)


def test_grid_density_moments_and_round_trip():
    g = grid_gaussian(1.0, 0.5)
    assert g.mean() == pytest.approx(1.0, abs=1e-10)
    assert g.var() == pytest.approx(0.25 + g.width ** 2 / 12, rel=1e-4)
    back = GridDensity.from_csv(g.to_csv())
    np.testing.assert_allclose(back.masses, g.masses, rtol=1e-15)
    assert (back.lo, back.hi) == pytest.approx((LO, HI))
    assert g.coarsen().m == M // 2


def test_grid_density_rejects_bad_input():
    with pytest.raises(ValueError):
        GridDensity(0.0, 1.0, np.full(8, 1 / 8))
    with pytest.raises(ValueError):
        GridDensity.from_mixture(GaussianMixture.gaussian([0.0], 1.0), -1.0, 1.0, 32)
    with pytest.raises(ValueError):
        grid_gaussian(0.0, 1.0, 33).coarsen()


def test_heat_kernel_rows_are_stochastic():
    K = np.exp(log_heat_kernel(LO, HI, 200, 0.7))
    np.testing.assert_allclose(K.sum(axis=1), 1.0, atol=1e-3)
    np.testing.assert_allclose(K, K.T, atol=1e-15)
    np.testing.assert_array_equal(np.exp(log_heat_kernel(LO, HI, 20, 0.0)), np.eye(20))


@pytest.mark.parametrize("log_domain", [False, True])
def test_sinkhorn_recovers_marginals(log_domain):
    a, b = grid_gaussian(-1.0, 0.5), grid_gaussian(1.0, 0.5)
    pots = sinkhorn(a, b, 0.5, log_domain=log_domain)
    P = pots.plan()
    assert np.abs(P.sum(axis=1) - a.masses).sum() < 1e-9
    assert np.abs(P.sum(axis=0) - b.masses).sum() < 1e-9
    # mean displacement of the plan equals the mean shift
    c = a.centers
    assert float(np.sum(P * (c[None, :] - c[:, None]))) == pytest.approx(2.0, abs=1e-6)


def test_sinkhorn_residuals_reach_tolerance():
    pots = sinkhorn(grid_gaussian(-2.0, 0.6), grid_gaussian(1.5, 1.0), 0.2)
    h = np.array(pots.residual_history)
    assert h[-1] < 1e-10
    assert np.all(np.diff(h[1:]) <= 1e-12)


def test_sinkhorn_errors():
    a = grid_gaussian(-2.0, 0.5)
    with pytest.raises(SinkhornError) as info:
        sinkhorn(a, grid_gaussian(2.0, 0.5), 0.01, max_iter=3)
    assert info.value.iterations == 3
    with pytest.raises(ValueError):
        sinkhorn(a, a, 0.0)


def test_sb_marginal_matches_gaussian_bridge():
    eps, T = 0.5, 1.0
    pots = sinkhorn(grid_gaussian(-1.0, 0.5), grid_gaussian(1.0, 0.8), eps, T)
    assert sb_marginal(pots, 0.0).l1(pots.mu0) < 1e-8
    assert sb_marginal(pots, T).l1(pots.muT) < 1e-8
    for t in (0.25, 0.5, 0.75):
        mid = sb_marginal(pots, t)
        mean, var = entropic_gaussian_marginal(-1.0, 0.5, 1.0, 0.8, eps, T, t)
        assert mid.mean() == pytest.approx(mean, abs=1e-3)
        assert mid.var() == pytest.approx(var + mid.width ** 2 / 12, rel=2e-3)


def test_entropic_marginal_reduces_to_geodesic():
    mean, var = entropic_gaussian_marginal(0.0, 1.0, 2.0, 3.0, 1e-12, 1.0, 0.5)
    assert mean == pytest.approx(1.0)
    assert var == pytest.approx(4.0, rel=1e-9)


def test_bb_geodesic_examples():
    mu0 = GaussianMixture.gaussian([-2.0], 1.0)
    mu1 = GaussianMixture.gaussian([2.0], 4.0)
    mid = bb_geodesic(mu0, mu1, 0.5)
    assert mid.means[0, 0] == pytest.approx(0.0)
    assert mid.covs[0, 0, 0] == pytest.approx(2.25)
    assert w2_gaussian(mu0, mu1) == pytest.approx(math.sqrt(16 + 1))


def test_bb_geodesic_has_constant_speed():
    mu0 = GaussianMixture.gaussian([0.0, 1.0], [[2.0, 0.5], [0.5, 1.0]])
    mu1 = GaussianMixture.gaussian([3.0, -1.0], [[0.5, -0.2], [-0.2, 3.0]])
    total = w2_gaussian(mu0, mu1)
    for s, t in [(0.0, 0.3), (0.3, 0.7), (0.2, 1.0)]:
        d = w2_gaussian(bb_geodesic(mu0, mu1, s), bb_geodesic(mu0, mu1, t))
        assert d == pytest.approx((t - s) * total, rel=1e-6)
    with pytest.raises(ValueError):
        bb_geodesic(GaussianMixture.two_mode(1.0, 1.0), mu1, 0.5)


def test_w2_to_gaussian_and_sup():
    ens = sample(GaussianMixture.gaussian([-2.0], 1.0), 20_000, 0)
    assert w2_to_gaussian(ens, -2.0, 1.0) < 0.02
    mu0 = GaussianMixture.gaussian([-2.0], 1.0)
    mu1 = GaussianMixture.gaussian([2.0], 1.0)
    traj = integrate_ode(AnalyticField.affine([[0.0]], [4.0]), ens, TimeGrid.uniform(1.0, 6))
    assert sup_w2_to_geodesic(traj, mu0, mu1) < 0.02
    still = integrate_ode(AnalyticField.zero(), ens, TimeGrid.uniform(1.0, 6))
    assert sup_w2_to_geodesic(still, mu0, mu1) == pytest.approx(4.0, abs=0.02)


def test_kl_control_energy_cases():
    ens = sample(GaussianMixture.gaussian([0.0], 1.0), 100, 0)
    traj = integrate_ode(AnalyticField.zero(1, 2.0), ens, TimeGrid.uniform(2.0, 5))
    assert kl_control_energy(AnalyticField.zero(1, 2.0), traj, 0.5) == 0.0
    c, eps = 0.6, 0.3
    w = AnalyticField.affine([[0.0]], [c], 2.0)
    assert kl_control_energy(w, traj, eps) == pytest.approx(c ** 2 * 2.0 / (4 * eps))
    with pytest.raises(ValueError):
        kl_control_energy(w, traj, 0.0)


def test_identity_static_gibbs_case():
    eps = 0.4
    law = GaussianMixture.gaussian([0.0], 1.0)
    ens = sample(law, 2000, 1)
    grid = TimeGrid.uniform(1.0, 5)
    traj = integrate_ode(AnalyticField.zero(), ens, grid)
    chk = ecfm_kl_identity_check(AnalyticField.zero(), AnalyticField.zero(), traj, [law] * 5, eps)
    assert chk.lhs == 0.0
    assert chk.residual < 1e-12
    assert chk.terms["kl"] == pytest.approx(eps * chk.terms["fisher"] / 4, rel=1e-12)


def test_identity_heat_flow():
    eps = 0.5
    law0 = GaussianMixture.gaussian([0.0], 1.0)
    grid = TimeGrid.uniform(1.0, 11)
    laws = gaussian_path(law0, [[0.0]], [0.0], eps, grid.times)
    score = ScoreField(lambda u: GaussianMixture.gaussian([0.0], 1.0 + 2 * eps * u), 1.0)
    v = CurrentVelocity(AnalyticField.zero(), eps, score)
    traj = integrate_ode(v, sample(law0, 20_000, 2), grid, 4)
    chk = ecfm_kl_identity_check(v, AnalyticField.zero(), traj, laws, eps)
    assert chk.residual < 4 * chk.std_error + 1e-3
    assert chk.lhs > 0
    with pytest.raises(ValueError):
        ecfm_kl_identity_check(v, AnalyticField.zero(), traj, laws[:3], eps)


def test_gamma_sweep_small():
    prob = two_gaussian_problem(n_times=5, n_centers=5)
    cfg = TrainerConfig(grid=TimeGrid(prob.field.knots), budgets=np.full(5, INF),
                        max_outer=4, batch=100)
    rows = gamma_sweep(prob, [INF, 1.0], cfg, seeds=(0, 1), eval_batch=300)
    assert [(r.lam, r.seed) for r in rows] == [(INF, 0), (INF, 1), (1.0, 0), (1.0, 1)]
    lines = gamma_table_csv(rows).splitlines()
    assert lines[0] == "lambda,seed,objective,action,sup_w2"
    assert lines[1].startswith("inf,0,")
    assert all(math.isfinite(r.sup_w2) and r.action >= 0 for r in rows)
