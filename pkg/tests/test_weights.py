import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from heatbeam.grid import RectGrid, TorusGrid
from heatbeam.weights import (Arc, Box, Calibration, ObservationRegions, WeightFamily, absorption_window,
                              alpha_star, beam_params, build_spatial_weights, clamp_exp, eval_rho,
                              eval_weight_family, explicit_params, log_rho, regime_params, build_psi_torus)

GRID = RectGrid.uniform(64, 33)
REGIONS = ObservationRegions.default()
SPATIAL = build_spatial_weights(REGIONS, GRID)
MODERATE = explicit_params(1.0, 1.0, 0.05, 0.05)


def test_arc_membership_wraps_through_zero():
    arc = Arc(6.0, 1.0)
    assert arc.contains(0.5) and arc.contains(6.1)
    assert not arc.contains(1.0) and not arc.contains(5.9)
    with pytest.raises(ValueError):
        Arc(0.0, 7.0)


def test_box_rejects_bad_vertical_extent():
    with pytest.raises(ValueError):
        Box(Arc(0.0, 1.0), 0.6, 0.4)


def test_default_regions_are_nested():
    r = REGIONS
    assert r.omega0.margin_inside(r.omega) > 0
    for inner, outer in zip(r.J_chain, r.J_chain[1:] + (r.J,)):
        assert inner.margin_inside(outer) > 0


def test_core_outside_patch_is_rejected():
    with pytest.raises(ValueError, match="omega0"):
        ObservationRegions(Box(Arc(1.9, 2.8), 0.2, 0.8), Box(Arc(0.1, 1.0), 0.3, 0.7), REGIONS.J, REGIONS.J_chain)


def test_core_missing_midline_is_rejected():
    regions = ObservationRegions(None, Box(Arc(2.2, 2.2), 0.55, 0.7), None, REGIONS.J_chain)
    with pytest.raises(ValueError, match="x2 = 1/2"):
        build_spatial_weights(regions, GRID)


def test_coarse_grid_cannot_separate_torus_critical_points():
    chain = tuple(Arc(0.5 - 0.1 * i, 0.6 + 0.2 * i) for i in range(5))
    regions = ObservationRegions(None, REGIONS.omega0, None, chain)
    with pytest.raises(ValueError, match="J0"):
        build_psi_torus(regions, TorusGrid(8))


def test_torus_weight_positive_with_critical_points_in_core_arc():
    assert SPATIAL.psi_I.values.min() > 0
    a, b = SPATIAL.report["torus_critical_points"]
    assert REGIONS.J0.contains(a) and REGIONS.J0.contains(b)
    x = np.linspace(0, 2 * np.pi, 4000, endpoint=False)
    slope = SPATIAL.psi_I_at(x, 1)
    flips = x[np.sign(slope) != np.sign(np.roll(slope, -1))]
    assert flips.size == 2 and np.all(REGIONS.J0.contains(flips))


def test_channel_weight_vanishes_on_walls_and_is_positive_inside():
    values = SPATIAL.psi_Omega.values
    assert np.max(np.abs(values[:, [0, -1]])) <= 1e-12
    assert values[:, 1:-1].min() > 0
    assert SPATIAL.report["normal_derivative_deviation"] < 1e-2


def test_ell_peaks_at_half_horizon():
    wf = WeightFamily(SPATIAL, explicit_params(1.0, 1.0, 0.05, 0.05, T=3.0))
    assert wf.ell(1.5) == pytest.approx(2.25, rel=1e-15)


def test_phi_matches_boundary_weight_on_walls():
    wf = WeightFamily(SPATIAL, MODERATE)
    x1 = GRID.torus.nodes
    for wall in (0.0, 1.0):
        np.testing.assert_allclose(wf.phi(0.3, x1, wall + 0 * x1), wf.phi(0.3, x1), rtol=1e-14)


@given(st.floats(0.01, 0.99), st.floats(0.0, 2 * np.pi), st.floats(0.0, 1.0))
def test_weight_ordering(t, x1, x2):
    w = eval_weight_family(WeightFamily(SPATIAL, MODERATE), t, (x1, x2))
    assert w.phi1 <= w.phi <= w.phi2 <= 0
    assert w.xi1 <= w.xi <= w.xi2


def test_weights_reject_endpoints():
    wf = WeightFamily(SPATIAL, MODERATE)
    with pytest.raises(ValueError):
        eval_weight_family(wf, 0.0, (1.0, 0.5))


def test_rho_vanishes_at_endpoints():
    wf = WeightFamily(SPATIAL, regime_params(1.0))
    rho = eval_rho(wf, np.array([0.0, 1.0]))
    for key in ("rho0", "rho1", "rho2", "rho3", "rho4", "rho5"):
        assert np.all(rho[key] == 0.0)
    assert np.all(np.isfinite(log_rho(wf, np.array([0.5]))["rho1"]))


def test_clamp_exp_flags_saturation():
    value, saturated = clamp_exp(np.array([0.0, 800.0]))
    assert saturated and value[0] == 1.0 and np.isfinite(value[1])
    value, saturated = clamp_exp(np.array([-np.inf, 1.0]))
    assert not saturated and value[0] == 0.0


def test_regime_params_at_unit_damping():
    calib = Calibration.load()
    p = regime_params(1.0)
    assert p.lam == calib.tau_default and p.mu == calib.theta_default
    assert p.s == pytest.approx(calib.s_hat0 * 2 * 2)


def test_regime_params_scalings():
    p = regime_params(8.0, tau=2.0, theta=1.5)
    assert p.lam == pytest.approx(2.0 * 4.0) and p.mu == 1.5
    q = regime_params(0.5, tau=2.0, theta=1.5)
    assert q.lam == pytest.approx(8.0) and q.mu == pytest.approx(3.0)
    with pytest.raises(ValueError):
        regime_params(0.0)


def test_default_regime_admissible_at_strong_damping():
    assert regime_params(8.0).admissible


def test_small_mu_inadmissible_with_condition_named():
    p = regime_params(8.0, theta=1.0)
    assert not p.admissible and p.violated() == ["mu_ge_mu0"]


def test_beam_params_allow_zero_damping():
    p = beam_params(0.0)
    assert p.alpha == 0.0 and p.admissible


def test_param_record_validation():
    with pytest.raises(ValueError):
        explicit_params(-1.0, 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        explicit_params(1.0, 1.0, 0.5, 1.0)


def test_alpha_star_root():
    out = alpha_star()
    b = out["beta_star"]
    assert abs(36 * b ** 3 + 111 * b ** 2 + 77 * b - 58) <= 1e-12
    assert 0 < b < 1
    assert out["alpha_star"] == pytest.approx(math.sqrt(6 * (2 - b) / (4 + b)), rel=1e-15)


def test_cubic_bracket_values():
    cubic = lambda b: ((36 * b + 111) * b + 77) * b - 58
    assert cubic(0.0) == -58 and cubic(1.0) == 166


def test_absorption_thresholds_coincide_at_beta_star():
    out = alpha_star()
    window = absorption_window(out["beta_star"], 1.0)
    assert window.alpha1_star == pytest.approx(out["alpha_star"], rel=1e-12)
    assert window.alpha2_star == pytest.approx(out["alpha_star"], rel=1e-12)
    assert window.feasible
    assert not absorption_window(out["beta_star"], 2.0).feasible


@given(st.floats(0.05, 5.0))
def test_window_feasible_exactly_below_threshold(alpha):
    out = alpha_star()
    if abs(alpha - out["alpha_star"]) < 1e-9:
        return
    assert absorption_window(out["beta_star"], alpha).feasible == (alpha < out["alpha_star"])


def test_absorption_window_validation():
    with pytest.raises(ValueError):
        absorption_window(1.5, 1.0)
    with pytest.raises(ValueError):
        absorption_window(0.5, 0.0)


@given(st.floats(0.02, 0.98))
def test_relative_exponent_matches_direct_difference(t0):
    wf = WeightFamily(SPATIAL, MODERATE)
    t = np.array([t0, 0.5])
    x1 = GRID.torus.nodes
    E = wf.exponent(x1)
    rel = wf.relative_exponent(t, E)
    phi = np.exp(wf.log_g(t))[:, None] * wf.numerator(x1)[None, :]
    direct = 2 * MODERATE.s * (phi - phi.max())
    np.testing.assert_allclose(rel, direct, atol=1e-12 * np.abs(phi).max())
    assert rel.max() <= 0


def test_relative_exponent_rejects_loose_bounds():
    wf = WeightFamily(SPATIAL, MODERATE)
    with pytest.raises(ValueError):
        wf.relative_exponent(np.array([0.5]), np.array([1.0]), E_max=0.0)


def test_calibration_roundtrip(tmp_path):
    calib = Calibration.load()
    path = tmp_path / "calibration.txt"
    path.write_text(calib.dump())
    assert Calibration.load(path) == calib
