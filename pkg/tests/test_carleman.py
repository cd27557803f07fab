import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatbeam.carleman import (InadmissibleError, beam_inequality_check, calibrate_then_verify,
                               check_dteta_inequality, conjugate_decompose, coupled_inequality_check,
                               cross_product_closed_form, heat_inequality_check, random_adjoint_trajectories,
                               random_beam_sample, random_heat_sample, verify_ibp_identity)
from heatbeam.carleman.functionals import log_term, weight_family
from heatbeam.carleman.ibp import ALL_PAIRS, closed_form_coefficients
from heatbeam.carleman.jets import Jet, bell_derivatives, separable
from heatbeam.carleman.samples import interior_times, zero_beam_sample
from heatbeam.grid import RectGrid
from heatbeam.weights import beam_params, explicit_params, regime_params

MODERATE = explicit_params(1.0, 1.0, 0.05, 0.05)
IBP_TOL = 1e-7
seeds = st.integers(0, 2 ** 32 - 1)


@pytest.fixture(scope="module")
def moderate_decomposition():
    sample = random_beam_sample(np.random.default_rng(7))
    return conjugate_decompose(sample, MODERATE, weight_family(MODERATE), 1.0, 128, 256)


# ---------------------------------------------------------------- jets

def polynomial_jet(t, x, tp, xp, ta=2, xb=2):
    """Jet of t^tp x^xp."""
    tp_poly, xp_poly = np.polynomial.Polynomial.basis(tp), np.polynomial.Polynomial.basis(xp)
    return separable([tp_poly.deriv(a)(t) for a in range(ta + 1)], [xp_poly.deriv(b)(x) for b in range(xb + 1)])


def test_jet_product_follows_leibniz():
    t, x = np.linspace(0.1, 1, 5), np.linspace(-1, 1, 7)
    product = polynomial_jet(t, x, 2, 1) * polynomial_jet(t, x, 1, 2)
    T, X = np.meshgrid(t, x, indexing="ij")
    np.testing.assert_allclose(product[1, 1], 9 * T ** 2 * X ** 2, rtol=1e-14)
    np.testing.assert_allclose(product[2, 2], 36 * T * X, rtol=1e-14)


def test_exp_relative_matches_closed_form():
    t, x = np.linspace(0.1, 1, 4), np.linspace(-1, 1, 5)
    F = polynomial_jet(t, x, 1, 0).scale(3.0) + polynomial_jet(t, x, 0, 2).scale(0.5)
    E = F.exp_relative()
    T, X = np.meshgrid(t, x, indexing="ij")
    np.testing.assert_allclose(E[0, 2], 1 + X ** 2, rtol=1e-14)
    np.testing.assert_allclose(E[2, 1], 9 * X, rtol=1e-14)


def test_bell_derivatives_of_quadratic():
    t = np.linspace(0, 1, 5)
    B = bell_derivatives([None, 2 * t, 2 + 0 * t, 0 * t])
    np.testing.assert_allclose(B[2], 2 + 4 * t ** 2)
    np.testing.assert_allclose(B[3], 12 * t + 8 * t ** 3)


def test_jet_validation():
    with pytest.raises(ValueError):
        Jet([[1.0, 2.0], [3.0]])
    jet = Jet([[1.0, 2.0], [3.0, 4.0]])
    with pytest.raises(ValueError):
        jet[2, 0]
    with pytest.raises(ValueError):
        jet.d(0, 2)
    with pytest.raises(ValueError):
        jet ** 0


# ---------------------------------------------------------------- samples

def test_beam_sample_envelope_is_flat_at_time_ends():
    sample = random_beam_sample(np.random.default_rng(1))
    jet = sample.jet(np.array([0.0, 1.0]), np.linspace(0, 6, 9), 2, 1)
    for a in range(3):
        assert np.max(np.abs(jet[a, 0])) <= 1e-13


def test_heat_sample_vanishes_on_wall():
    sample = random_heat_sample(np.random.default_rng(1))
    values = sample.derivative(np.array([0.3]), np.linspace(0, 6, 9), np.array([0.0, 0.5]))
    assert np.all(values[..., 0] == 0) and np.any(values[..., 1] != 0)


def test_sample_validation():
    with pytest.raises(ValueError):
        random_beam_sample(np.random.default_rng(0), n_x=16, n_modes=5)
    with pytest.raises(ValueError):
        random_heat_sample(np.random.default_rng(0), n_vert=0)
    with pytest.raises(ValueError):
        interior_times(1.0, 1)


# ---------------------------------------------------------------- decomposition and IBP

def test_zero_sample_has_zero_pieces():
    decomp = conjugate_decompose(zero_beam_sample(), MODERATE, weight_family(MODERATE), 1.0, 16, 32)
    for name in ("M11", "M12", "M21", "M22", "N"):
        assert np.all(decomp.piece(name) == 0)
    assert decomp.residual == 0.0


def test_unweighted_decomposition_reproduces_the_sample():
    params = explicit_params(1.0, 0.0, 0.05, 0.05)
    sample = random_beam_sample(np.random.default_rng(3))
    decomp = conjugate_decompose(sample, params, weight_family(params), 1.0, 16, 32)
    np.testing.assert_array_equal(decomp.z(), decomp.eta.value)
    assert decomp.residual <= 1e-14


def test_decomposition_residual_at_moderate_params(moderate_decomposition):
    assert moderate_decomposition.residual <= 1e-8


def test_decomposition_validation():
    sample = random_beam_sample(np.random.default_rng(0), T=2.0)
    with pytest.raises(ValueError):
        conjugate_decompose(sample, MODERATE, weight_family(MODERATE), 1.0)
    with pytest.raises(ValueError):
        conjugate_decompose(random_beam_sample(np.random.default_rng(0)), MODERATE, weight_family(MODERATE),
                            1.0, precision="quad")


@pytest.mark.parametrize("pair", [(1, 1), (3, 3), (5, 3), (8, 7)])
def test_ibp_identity(moderate_decomposition, pair):
    record = verify_ibp_identity(*pair, moderate_decomposition)
    assert record.rel_err <= IBP_TOL


def test_vanishing_reduced_forms(moderate_decomposition):
    for pair in ((3, 3), (5, 3)):
        record = verify_ibp_identity(*pair, moderate_decomposition)
        assert record.reduced == 0.0 and abs(record.raw) <= IBP_TOL * record.scale


def test_ibp_rejects_unknown_pair(moderate_decomposition):
    assert (9, 1) not in ALL_PAIRS
    with pytest.raises(ValueError):
        verify_ibp_identity(9, 1, moderate_decomposition)


def test_closed_form_cross_product(moderate_decomposition):
    assert cross_product_closed_form(moderate_decomposition).rel_err <= IBP_TOL


def test_closed_form_with_zero_sample():
    decomp = conjugate_decompose(zero_beam_sample(), MODERATE, weight_family(MODERATE), 1.0, 16, 32)
    record = cross_product_closed_form(decomp)
    assert record.lhs == record.rhs == 0.0 and record.rel_err == 0.0


def test_closed_form_coefficients_at_unit_damping():
    assert closed_form_coefficients(1.0, 0.0) == {1: 8, 2: 66, 3: 12, 4: 3, 5: 2.0, 6: 7, 7: 32, 8: 12}


# ---------------------------------------------------------------- log-domain functionals

# factors stay where their squares are representable, so the direct sum is a valid reference
factors = st.floats(-3, 3).filter(lambda v: v == 0 or abs(v) > 1e-100)


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=3), st.lists(factors, min_size=3, max_size=3),
       st.floats(-5, 5).filter(lambda c: c != 0))
def test_log_term_matches_direct_sum(log_weight, factor, coefficient):
    log_weight, factor = np.array(log_weight), np.array(factor)
    quad = np.array([0.5, 1.0, 2.0])
    direct = coefficient * np.sum(np.exp(log_weight) * factor * factor * quad)
    la, sign = log_term(log_weight, (factor, factor), quad, coefficient)
    if direct == 0:
        assert sign == 0
    else:
        assert sign == np.sign(direct) and math.exp(la) == pytest.approx(abs(direct), rel=1e-12)


def test_log_term_survives_overflowing_factors():
    la, sign = log_term(np.array([-1000.0]), (np.array([1e200]), np.array([1e200])), np.array([1.0]))
    assert sign == 1.0 and la == pytest.approx(-1000.0 + 400 * math.log(10), rel=1e-14)
    assert log_term(np.zeros(2), (np.ones(2),), np.ones(2), 0.0) == (-math.inf, 0.0)


@settings(max_examples=10)
@given(seeds, st.floats(1e-3, 1e3))
def test_beam_ratio_is_scale_invariant(seed, factor):
    sample = random_beam_sample(np.random.default_rng(seed))
    report = beam_inequality_check("1.7", [sample, sample.scaled(factor)], beam_params(1.0))
    assert report.ratios[1] == pytest.approx(report.ratios[0], rel=1e-10)


def test_zero_samples_give_zero_ratio():
    report = beam_inequality_check("1.6", [zero_beam_sample()], beam_params(1.0))
    assert report.ratios.tolist() == [0.0]


def test_beam_theorem_admissibility():
    sample = [random_beam_sample(np.random.default_rng(0))]
    with pytest.raises(InadmissibleError) as info:
        beam_inequality_check("1.8", sample, beam_params(2.0))
    assert info.value.details["window_feasible"] is False
    with pytest.raises(InadmissibleError):
        beam_inequality_check("1.7", sample, beam_params(0.0))
    with pytest.raises(ValueError):
        beam_inequality_check("2.0", sample, beam_params(1.0))
    assert beam_inequality_check("1.8", sample, beam_params(1.0)).samples


def test_heat_boundary_terms_agree_between_paths():
    samples = [random_heat_sample(np.random.default_rng(seed)) for seed in range(2)]
    report = heat_inequality_check(samples, regime_params(1.0), n_t=32)
    assert max(report.extra["sigma_agreement"].values()) <= 1e-8


def test_coupled_and_observation_checks_need_admissible_params():
    trajs = random_adjoint_trajectories(np.random.default_rng(0), 1, 1.0, RectGrid.uniform(16, 9), n_steps=8)
    with pytest.raises(InadmissibleError):
        coupled_inequality_check(trajs, regime_params(8.0, theta=1.0))
    with pytest.raises(InadmissibleError):
        check_dteta_inequality(trajs, beam_params(0.0))
    assert coupled_inequality_check([], regime_params(8.0)).samples == []


def test_calibrate_then_verify():
    check = calibrate_then_verify([0.5, 1.0], [1.5, 2.0, 2.5], margin=2.0)
    assert check.c_hat == 1.0 and check.violations == 1 and not check.passed
    assert calibrate_then_verify([0.0], [0.0]).passed
    assert not calibrate_then_verify([math.inf], [1.0]).passed
    with pytest.raises(ValueError):
        calibrate_then_verify([], [1.0])
    with pytest.raises(ValueError):
        calibrate_then_verify([1.0], [1.0], margin=0.5)
