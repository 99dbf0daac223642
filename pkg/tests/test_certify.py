import json
import math

import numpy as np
import pytest

from ecfm.certify import (NOT_MEASURED, CertificateReport, FloorCertificate, assemble_report,
                          density_floor_proxy, fit_through_origin, grid_adequacy,
                          mode_floor_certificate, noise_field, refinement_advice, select_budget,
                          stability_sweep)
from ecfm.dynamics import integrate_ode
from ecfm.entropy_control import EntropyRateEstimate, EntropyRateSeries, div_series
from ecfm.fields import AnalyticField
from ecfm.measures import GaussianMixture, ModeSet, ParticleEnsemble, TimeGrid, sample
from ecfm.trainer import two_gaussian_problem

RIGHT = ModeSet("half-space", {"normal": [1.0], "offset": 0.0}, "right")
LEFT = ModeSet("half-space", {"normal": [-1.0], "offset": 0.0}, "left")


def make_series(values, ses, alpha=0.05):
    grid = TimeGrid.uniform(1.0, len(values))
    est = tuple(EntropyRateEstimate(i, float(t), v, s, 0, "div-exact")
                for i, (t, v, s) in enumerate(zip(grid.times, values, ses)))
    return EntropyRateSeries(grid, est, alpha)


def example_series():
    return make_series([-0.5] + [1.0] * 9, [0.1] + [0.0] * 9)


def static_traj(n=2000, n_times=10, seed=0):
    ens = sample(GaussianMixture.two_mode(3.0, 1.0), n, seed)
    return integrate_ode(AnalyticField.zero(), ens, TimeGrid.uniform(1.0, n_times))


def test_select_budget_examples():
    assert select_budget(example_series()) == pytest.approx(0.9462, abs=1e-4)
    assert select_budget(example_series(), delta_safe=0.0) == pytest.approx(0.8462, abs=1e-4)
    assert select_budget(make_series([0.2, 0.5], [0.0, 0.0]), delta_safe=0.25) == 0.25
    with pytest.raises(ValueError):
        select_budget(example_series(), delta_safe=-0.1)


def test_grid_adequacy_constant_rate():
    traj = static_traj(10, 5)
    s = div_series(AnalyticField.affine([[-0.5]]), traj)
    assert grid_adequacy(s, TimeGrid.uniform(1.0, 2), 1e-3) == (0.0, True)


def test_grid_adequacy_contraction():
    # rate -1 / (1 - t) has slope 1 / (1 - t)^2, which reaches 25 at t = 0.8
    f = AnalyticField.contraction(1.0, 0.8)
    fine = TimeGrid(np.linspace(0.0, 0.8, 801))
    traj = integrate_ode(f, ParticleEnsemble(np.array([[1.0]])), fine, 1)
    L, ok = grid_adequacy(div_series(f, traj), TimeGrid.uniform(0.8, 81), 0.1)
    assert L == pytest.approx(25.0, rel=0.01)
    assert not ok
    coarse = TimeGrid.uniform(0.8, 9)
    assert grid_adequacy(div_series(f, traj), coarse, L * coarse.max_step)[1]
    assert not grid_adequacy(div_series(f, traj), coarse, 0.99 * L * coarse.max_step)[1]
    with pytest.raises(ValueError):
        grid_adequacy(div_series(f, traj), coarse, 0.0)


def test_mode_floor_example():
    traj = static_traj()
    cert = mode_floor_certificate(traj, [RIGHT, LEFT])
    assert cert.radius == pytest.approx(math.sqrt(math.log(800) / 4000))
    assert cert.radius == pytest.approx(0.0409, abs=1e-4)
    np.testing.assert_allclose(cert.floors, cert.masses - cert.radius)
    assert cert.min_floors[0] == pytest.approx(0.5 - 0.0409, abs=0.03)
    assert cert.global_min == cert.floors.min()
    assert cert.labels == ("right", "left")


def test_mode_floor_radius_shrinks_with_batch():
    radii = [mode_floor_certificate(static_traj(n), [RIGHT]).radius for n in (100, 400, 1600)]
    assert radii[0] > radii[1] > radii[2]
    assert radii[0] / radii[1] == pytest.approx(2.0)


def test_mode_floor_requires_uniform_weights():
    w = np.full(4, 0.25)
    w[0], w[1] = 0.4, 0.1
    traj = integrate_ode(AnalyticField.zero(), ParticleEnsemble(np.zeros((4, 1)), w),
                         TimeGrid.uniform(1.0, 2))
    with pytest.raises(ValueError):
        mode_floor_certificate(traj, [RIGHT])
    with pytest.raises(ValueError):
        mode_floor_certificate(static_traj(10), [])


def test_density_floor_proxy():
    ens = sample(GaussianMixture.gaussian([0.0], 1.0), 100_000, 0)
    near, far = density_floor_proxy(ens, [(0.0, 0.2), (50.0, 0.2)])
    assert near == pytest.approx(1 / math.sqrt(2 * math.pi), rel=0.15)
    assert near < 1 / math.sqrt(2 * math.pi)
    assert far <= 0
    with pytest.raises(ValueError):
        density_floor_proxy(ens, [(0.0, 0.0)])


def test_refinement_advice_reasons():
    s = make_series([-0.95, 0.0, -0.2], [0.0, 0.5, 0.0])
    floors = FloorCertificate(("a",), np.array([[0.5, 0.5, 0.01]]), 0.0, 0.05)
    out = refinement_advice(s, 1.0, 0.1, 0.3, floors, 0.05)
    assert [a["n"] for a in out] == [0, 1, 2]
    assert out[0]["reasons"] == ["near-boundary"]
    assert out[1]["reasons"] == ["high-variance"]
    assert out[2]["reasons"] == ["low-floor"]


def test_fit_through_origin():
    x = np.array([1.0, 2.0, 3.0])
    assert fit_through_origin(x, 2 * x) == (pytest.approx(2.0), pytest.approx(1.0))
    assert fit_through_origin(x, np.zeros(3)) == (0.0, 1.0)


@pytest.fixture(scope="module")
def base():
    prob = two_gaussian_problem(n_times=5, n_centers=5)
    rng = np.random.default_rng(1)
    return prob, prob.field.with_theta(0.1 * rng.normal(size=prob.field.theta.size))


def test_noise_field_has_requested_norm(base):
    prob, fld = base
    grid = TimeGrid(fld.knots)
    traj = integrate_ode(fld, sample(prob.mu0, 500, 0), grid)
    xi = noise_field(fld, 0.3, 7, traj)
    sq = [np.mean(np.sum(xi.eval(e.points, t) ** 2, axis=1)) for e, t in zip(traj.ensembles, grid.times)]
    assert math.sqrt(grid.trapezoid_weights() @ np.array(sq) / grid.horizon) == pytest.approx(0.3, rel=1e-9)


@pytest.mark.parametrize("axis", ["field-noise", "init-shift"])
def test_zero_perturbation_has_zero_deviation(base, axis):
    prob, fld = base
    res = stability_sweep(axis, [0.0, 0.1], (0, 1), base=fld, mu0=prob.mu0,
                          grid=TimeGrid(fld.knots), mode_sets=(RIGHT,), n=300)
    np.testing.assert_array_equal(res.deviations[0], 0.0)
    np.testing.assert_array_equal(res.mass_deviations[0], 0.0)
    assert np.all(res.deviations[1] > 0)
    assert res.to_csv().splitlines()[0] == "magnitude,seed,sup_w2,sup_mass"
    assert res.summary()["label"] == "empirical"


def test_init_shift_of_translation_is_exact():
    mu0 = GaussianMixture.gaussian([0.0], 1.0)
    res = stability_sweep("init-shift", [0.1, 0.2, 0.4], (0,), base=AnalyticField.affine([[0.0]], [1.0]),
                          mu0=mu0, grid=TimeGrid.uniform(1.0, 3), n=200)
    assert res.slope == pytest.approx(1.0)
    assert res.r2 == pytest.approx(1.0)


def test_stability_argument_errors(base):
    prob, fld = base
    with pytest.raises(ValueError):
        stability_sweep("wobble", [0.1], (0,), base=fld, mu0=prob.mu0, grid=TimeGrid(fld.knots))
    with pytest.raises(ValueError):
        stability_sweep("endpoint-shift", [0.1], (0,))
    with pytest.raises(ValueError):
        stability_sweep("field-noise", [0.1], (0,), base=fld)


def report(**kw):
    kw.setdefault("series", example_series())
    return assemble_report(**kw)


def test_report_verdicts():
    floors = FloorCertificate(("core",), np.array([[0.3, 0.25]]), 0.05, 0.05)
    assert report(lambda_star=0.9462).verdict == "feasible"
    assert report(lambda_star=0.5).verdict == "infeasible"
    assert report(lambda_star=None).verdict == "incomplete"
    assert report(series=None, lambda_star=1.0).verdict == "incomplete"
    assert report(lambda_star=1.0, core_targets={"core": 0.1}).verdict == "incomplete"
    assert report(lambda_star=1.0, core_floors=floors, core_targets={"core": 0.2}).verdict == "feasible"
    assert report(lambda_star=1.0, core_floors=floors, core_targets={"core": 0.21}).verdict == "infeasible"


def test_report_json_round_trip():
    floors = FloorCertificate(("core",), np.array([[0.3, 0.25]]), 0.05, 0.05)
    rep = report(lambda_star=1.0, core_floors=floors, stability_w=1.5, stability_m=0.4,
                 delta_tot_max=0.1, seeds=[0, 1])
    back = CertificateReport.from_json(rep.to_json())
    assert back.to_dict() == rep.to_dict()
    d = json.loads(report(lambda_star=1.0).to_json())
    assert d["core_floors"] == NOT_MEASURED
    assert d["deployment_floors"] == NOT_MEASURED
    assert d["stability"]["label"] == "empirical"
    with pytest.raises(ValueError):
        CertificateReport.from_json(json.dumps({"schema": "other"}))


def test_report_markdown_columns():
    md = report(lambda_star=1.0).to_markdown().splitlines()
    cols = [c.strip() for c in md[0].strip("|").split("|")]
    assert cols == ["Model", "lambda*", "lambda_eff^LCB", "min_k m_k^cert", "Feasible?",
                    "C_W (empirical)", "Robust floor at Delta_tot^max"]
    assert NOT_MEASURED in md[2]


def test_deployment_floors_decrease_with_budget():
    floors = FloorCertificate(("core",), np.array([[0.3, 0.25]]), 0.05, 0.05)
    rep = report(lambda_star=1.0, core_floors=floors, stability_m=0.5, delta_tot_max=0.1)
    vals = [rep.deployment_floors(d)["core"] for d in (0.0, 0.1, 0.2)]
    assert vals[0] == pytest.approx(0.2)
    assert vals[0] > vals[1] > vals[2]
