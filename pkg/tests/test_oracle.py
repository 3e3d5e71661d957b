import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hs

from polyfeed.errors import DivergenceError, StudyError, ValidationError
from polyfeed.feedback import eval_feedback
from polyfeed.genlyap import synthesize
from polyfeed.model import QuadraticControlSystem
from polyfeed.oracle import (Transcription, default_bands, default_oracle_horizon, fit_order,
                             kkt_residual, optimal_openloop, taylor_order_study, with_controls,
                             write_study)
from polyfeed.riccati import solve_are
from polyfeed.sim import integrate_closed_loop


def fd_check(tr, u, rng, directions=5, eps=1e-6):
    _, g, _, _ = tr.cost_grad(u)
    worst = 0.0
    for _ in range(directions):
        d = rng.standard_normal(u.shape)
        fd = (tr.forward(u + eps * d)[0] - tr.forward(u - eps * d)[0]) / (2 * eps)
        worst = max(worst, abs(fd - np.sum(g * d)) / max(abs(fd), 1e-300))
    return worst


def test_adjoint_gradient_burgers(burgers6, rng):
    Pi = solve_are(burgers6).Pi
    tr = Transcription(burgers6, 0.3 * rng.standard_normal(6), 5.0, 200, Pi)
    u = 0.1 * rng.standard_normal((201, 2))
    assert fd_check(tr, u, rng) <= 1e-5


@settings(max_examples=15, deadline=None)
@given(n=hs.integers(1, 3), m=hs.integers(1, 2), seed=hs.integers(0, 2**32 - 1))
def test_adjoint_gradient_random_systems(n, m, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n)) - 1.5 * np.eye(n)
    B = rng.standard_normal((n, m))
    N = 0.5 * rng.standard_normal((n, n, n))
    sys = QuadraticControlSystem(A, B, N, float(rng.uniform(0.1, 2.0)))
    Pi = np.eye(n)
    tr = Transcription(sys, 0.2 * rng.standard_normal(n), 2.0, 60, Pi)
    u = 0.1 * rng.standard_normal((61, m))
    assert fd_check(tr, u, rng) <= 1e-5


def test_lqr_special_case(linear3):
    Pi = solve_are(linear3).Pi
    y0 = np.array([0.4, -0.1, 0.3])
    sol = optimal_openloop(linear3, y0, n_steps=400, Pi=Pi)
    assert sol.converged and sol.kkt_norm <= 1e-8
    assert sol.V_hat == pytest.approx(0.5 * y0 @ Pi @ y0, rel=1e-6)
    assert kkt_residual(sol, linear3) == pytest.approx(sol.kkt_norm, rel=1e-6, abs=1e-15)


def test_zero_initial_state(burgers6):
    sol = optimal_openloop(burgers6, np.zeros(6), n_steps=100)
    assert sol.V_hat == 0.0 and np.all(sol.control_grid == 0) and sol.converged


def test_kkt_increases_with_perturbation(scalar):
    # stable open loop, so a local bump acts mainly through the mass term alpha u
    sol = optimal_openloop(scalar, [0.3], n_steps=200)
    base = kkt_residual(sol, scalar)
    for delta in (1e-3, 1e-2):
        u = sol.control_grid.copy()
        u[50, 0] += delta
        bumped = kkt_residual(with_controls(sol, u), scalar)
        growth = (bumped - base) * (1 + np.max(np.abs(u)))
        assert 0.3 * scalar.alpha * delta <= growth <= 3 * scalar.alpha * delta


def test_burgers_converged_run(burgers6, burgers6_d4, rng):
    exp = burgers6_d4.expansion.truncate(2)
    y0 = 0.05 * rng.standard_normal(6)
    sol = optimal_openloop(burgers6, y0, n_steps=200, Pi=exp.Pi)
    assert sol.converged
    assert kkt_residual(sol, burgers6) <= 1e-6
    assert sol.V_hat >= 0
    assert sol.state_traj.shape == (201, 6) and sol.costate_traj.shape == (201, 6)


def test_warm_start_dominance(burgers6, burgers6_d4):
    exp = burgers6_d4.expansion.truncate(3)
    v = np.array([1.0, -0.5, 0.3, 0.2, -0.1, 0.05])
    y0 = 0.2 * v / np.linalg.norm(v)
    T = default_oracle_horizon(burgers6, exp.Pi)
    times = np.linspace(0, T, 401)
    tr = integrate_closed_loop(burgers6, exp, y0, tol=1e-10, dense=True)
    warm = np.array([eval_feedback(exp, y) for y in tr.dense(times)[:6].T])
    a = optimal_openloop(burgers6, y0, T, 400, warm_start=warm, Pi=exp.Pi)
    b = optimal_openloop(burgers6, y0, T, 400, Pi=exp.Pi)
    assert a.converged and b.converged
    assert a.V_hat <= b.V_hat + 1e-10 * b.V_hat


def test_oracle_input_errors(burgers6):
    with pytest.raises(ValidationError):
        optimal_openloop(burgers6, np.zeros(5))
    with pytest.raises(ValidationError):
        optimal_openloop(burgers6, np.ones(6), n_steps=10)
    with pytest.raises(ValidationError):
        optimal_openloop(burgers6, 0.1 * np.ones(6), n_steps=100, warm_start=np.zeros((3, 2)))


def test_oracle_basin_error(burgers6):
    with pytest.raises(DivergenceError):
        optimal_openloop(burgers6, 100 * np.ones(6), n_steps=100)


def test_fit_order():
    s = np.geomspace(1e-3, 1e-1, 6)
    f = fit_order(s, 2.5 * s**3, "V", 2, (2.7, 3.3))
    assert f.slope == pytest.approx(3.0, abs=1e-12) and f.in_band
    short = fit_order(s[:3], s[:3] ** 3, "V", 2, (2.7, 3.3))
    assert math.isnan(short.slope) and short.note == "below noise floor" and short.in_band is None


def test_linear_study_below_noise_floor(linear3):
    exp = synthesize(linear3, 2).expansion
    rep = taylor_order_study(linear3, {2: exp}, np.ones(3), np.geomspace(1e-2, 1e-1, 4),
                             n_steps=200, bands=default_bands(2))
    fit = rep.fit("V", 2)
    assert math.isnan(fit.slope) and fit.note == "below noise floor"
    assert all(r.ordering_ok for r in rep.rows)


def test_scalar_study_and_export(tmp_path, scalar, scalar_d3):
    exps = {2: scalar_d3.expansion.truncate(2), 3: scalar_d3.expansion}
    rep = taylor_order_study(scalar, exps, [1.0], np.geomspace(1e-2, 1e-1, 5), n_steps=400,
                             bands=default_bands(3))
    assert np.all(np.diff(rep.scalings) < 0)
    assert rep.fit("V", 2).in_band and rep.fit("V", 3).in_band
    # deeper expansions are closer to the oracle at small s
    for s in rep.scalings[-2:]:
        rows = {r.d: r for r in rep.rows if r.s == s}
        assert rows[3].gap_V <= rows[2].gap_V + rows[2].noise_V
    write_study(rep, tmp_path / "st")
    header = (tmp_path / "st" / "study.csv").read_text().splitlines()[0]
    assert header == "s,d,V_hat,V_d,gap_V,J_cl,gap_u,kkt"
    orders = (tmp_path / "st" / "orders.txt").read_text()
    assert "V d=2: slope=" in orders and "PASS" in orders
    pts = np.loadtxt(tmp_path / "st" / "gap_V_d2.dat")
    assert pts.shape == (5, 2)


def test_study_needs_four_rows(scalar, scalar_d3):
    with pytest.raises(StudyError):
        taylor_order_study(scalar, [scalar_d3.expansion], [1.0], [1e-2, 2e-2, 4e-2], n_steps=100)
