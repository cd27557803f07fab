import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatbeam.control import (ControlProblem, K_T_sweep, _fit_log_cost, adjoint_basis, closed_loop,
                              cost_sweep_alpha, cost_sweep_T, hum_control, lambda_branch,
                              normal_operator_consistency, observability_gramian, smallest_eigenpair)
from heatbeam.grid import RectGrid
from heatbeam.operators import CoupledState, ModeSystem, hilbert_norm, random_state
from heatbeam.weights import ObservationRegions

GRID = RectGrid.uniform(16, 9)
REGIONS = ObservationRegions.default()
T, STEPS = 0.5, 16


def datum(seed=0):
    return random_state(GRID, np.random.default_rng(seed), 2.0, 3, 3)


def test_zero_datum_needs_no_control():
    res = hum_control(CoupledState.zeros(GRID), T, REGIONS, 1.0, 1e-6, n_steps=STEPS)
    assert res.cost == 0.0 and res.terminal_norm == 0.0


def test_halving_penalty_trades_cost_for_terminal_accuracy():
    results = [hum_control(datum(), T, REGIONS, 1.0, eps, n_steps=STEPS) for eps in (1e-2, 5e-3, 2.5e-3)]
    terminal = [r.terminal_norm for r in results]
    cost = [r.cost for r in results]
    assert terminal[0] > terminal[1] > terminal[2]
    assert cost[0] < cost[1] < cost[2]
    assert all(r.penalty_identity_holds for r in results)


def test_direct_and_cg_solvers_agree():
    direct = hum_control(datum(), T, REGIONS, 1.0, 1e-4, n_steps=STEPS)
    cg = hum_control(datum(), T, REGIONS, 1.0, 1e-4, n_steps=STEPS, solver="cg", strict=True)
    assert cg.cost == pytest.approx(direct.cost, rel=1e-6)
    assert cg.terminal_norm == pytest.approx(direct.terminal_norm, rel=1e-5)


@settings(max_examples=8)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 10.0))
def test_control_is_linear_in_the_datum(seed, factor):
    Y0 = datum(seed)
    scaled = CoupledState.from_arrays(GRID, *(factor * a for a in Y0.arrays()))
    base = hum_control(Y0, T, REGIONS, 1.0, 1e-4, n_steps=STEPS)
    big = hum_control(scaled, T, REGIONS, 1.0, 1e-4, n_steps=STEPS)
    assert big.cost == pytest.approx(factor * base.cost, rel=1e-8)
    assert big.terminal_norm == pytest.approx(factor * base.terminal_norm, rel=1e-8)


def test_closed_loop_reproduces_terminal_state():
    Y0 = datum()
    res = hum_control(Y0, T, REGIONS, 1.0, 1e-4, n_steps=STEPS)
    traj = closed_loop(Y0, res, REGIONS, 1.0)
    assert traj.norms()[-1] == pytest.approx(res.terminal_norm, rel=1e-8)
    assert res.terminal_norm < 0.1 * hilbert_norm(Y0)


def test_hum_input_validation():
    Y0 = datum()
    with pytest.raises(ValueError):
        hum_control(Y0, T, REGIONS, 1.0, 0.0, n_steps=STEPS)
    with pytest.raises(ValueError):
        hum_control(Y0, T, REGIONS.without_observation(), 1.0, 1e-3, n_steps=STEPS)
    with pytest.raises(ValueError):
        hum_control(Y0, T, REGIONS, 1.0, 1e-3, n_steps=STEPS, solver="lu")
    with pytest.raises(ValueError):
        ControlProblem(GRID, REGIONS, 1.0, 0.0)


def test_normal_matrix_matches_operator():
    problem = ControlProblem(GRID, REGIONS, 1.0, 0.25, 4)
    rng = np.random.default_rng(5)
    vec = rng.standard_normal(problem.dimension)
    direct = problem.to_real(problem.normal_operator(problem.from_real(vec)))
    np.testing.assert_allclose(problem.normal_matrix() @ vec, direct, atol=1e-12 * np.linalg.norm(direct))


def test_normal_operator_consistency_on_basis():
    problem = ControlProblem(GRID, REGIONS, 1.0, 0.25, 4)
    basis, _ = adjoint_basis(GRID, 12)
    coefficients = np.random.default_rng(2).standard_normal(12)
    assert normal_operator_consistency(problem, basis, 1e-3, coefficients) <= 1e-10


def test_log_cost_fit():
    T_values = np.array([0.5, 1.0, 2.0, 4.0])
    fit = _fit_log_cost(T_values, np.exp(3.0 / T_values + 1.0))
    assert fit["slope"] == pytest.approx(3.0) and fit["r_squared"] == pytest.approx(1.0)
    assert _fit_log_cost(T_values, np.ones(4))["degenerate"]
    assert _fit_log_cost(T_values, np.array([1.0, 0.0, 0.0, 2.0]))["degenerate"]


def test_cost_sweep_T_requires_increasing_horizons():
    with pytest.raises(ValueError):
        cost_sweep_T(datum(), [1.0, 0.5], REGIONS, 1.0, 1e-3)


def test_cost_sweep_alpha_reports_branches():
    out = cost_sweep_alpha(datum(), [0.5, 2.0], T, REGIONS, 1e-3, dt=T / STEPS)
    assert [r["branch"] for r in out["rows"]] == ["tau/alpha^2", "tau*alpha^(2/3)"]
    assert out["finite_positive"]
    assert lambda_branch(1.0) == "tau*alpha^(2/3)"
    with pytest.raises(ValueError):
        cost_sweep_alpha(datum(), [0.0], T, REGIONS, 1e-3)


def test_adjoint_basis_is_orthonormal():
    basis, chosen = adjoint_basis(GRID, 20)
    system = ModeSystem(GRID, 0.0)
    gram = system.inner_matrix(basis, basis)
    np.testing.assert_allclose(gram, np.eye(20), atol=1e-12)
    freqs = [c[0] for c in chosen]
    assert freqs == sorted(freqs)
    with pytest.raises(ValueError):
        adjoint_basis(GRID, 0)


def test_smallest_eigenpair_matches_dense_solver():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((8, 8))
    spd = A @ A.T + 0.1 * np.eye(8)
    value, vector, _ = smallest_eigenpair(spd)
    assert value == pytest.approx(np.linalg.eigvalsh(spd)[0], rel=1e-10)
    # the stopping rule is on the Rayleigh quotient, so the vector is accurate to about sqrt(tol)
    assert np.linalg.norm(spd @ vector - value * vector) <= 1e-6 * np.linalg.norm(spd, 2)


def test_gramian_is_symmetric_positive_and_decreasing_in_T():
    out = K_T_sweep([0.25, 0.5, 1.0], REGIONS, 1.0, basis_size=12, grid=GRID, dt=1 / 32)
    assert all(lam > 0 for lam in out["lambda_min"])
    assert out["strictly_decreasing"]
    report = observability_gramian(0.5, REGIONS, 1.0, 12, GRID, 1 / 32)
    assert report.symmetry_defect <= 1e-12
    assert report.K_T == pytest.approx(1 / report.lambda_min)


def test_empty_regions_give_singular_gramian():
    report = observability_gramian(0.5, REGIONS.without_observation(), 1.0, 8, GRID, 1 / 32)
    assert report.lambda_min == 0.0 and math.isinf(report.K_T)
