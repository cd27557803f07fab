import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from heatbeam.grid import (RectFunction, RectGrid, TimeGrid, TorusFunction, TorusGrid, fornberg_weights, quadrature,
                           spectral_derivative, vertical_derivative)


def torus_fn(n, func):
    g = TorusGrid(n)
    return TorusFunction(g, func(g.nodes))


def test_fourth_derivative_of_cosine():
    out = spectral_derivative(torus_fn(64, np.cos), 4)
    # rounding in the unused modes is amplified by k^4 <= (n/2)^4
    np.testing.assert_allclose(out.values, np.cos(out.grid.nodes), atol=1e-10)


def test_first_derivative_of_sin3x():
    out = spectral_derivative(torus_fn(64, lambda x: np.sin(3 * x)), 1)
    np.testing.assert_allclose(out.values, 3 * np.cos(3 * out.grid.nodes), atol=1e-12)


@given(st.integers(0, 2 ** 32 - 1))
def test_second_twice_equals_fourth(seed):
    rng = np.random.default_rng(seed)
    g = TorusGrid(64)
    k = np.arange(33)
    coeff = (rng.standard_normal(33) + 1j * rng.standard_normal(33)) * (k < 20)
    f = TorusFunction(g, np.fft.irfft(coeff, n=64))
    twice = spectral_derivative(spectral_derivative(f, 2), 2).values
    once = spectral_derivative(f, 4).values
    assert np.linalg.norm(twice - once) <= 1e-12 * np.linalg.norm(once)


def test_spectral_order_range():
    f = torus_fn(16, np.cos)
    with pytest.raises(ValueError):
        spectral_derivative(f, 5)
    with pytest.raises(ValueError):
        TorusGrid(7)


def test_vertical_second_derivative_exact_for_quadratics():
    grid = RectGrid.uniform(16, 17)
    _, x2 = grid.mesh()
    out = vertical_derivative(RectFunction(grid, x2 ** 2), 2)
    np.testing.assert_allclose(out.values, 2.0, atol=1e-10)


def test_vertical_normal_derivative_converges_at_second_order():
    errors = []
    for layers in (17, 33, 65):
        grid = RectGrid.uniform(8, layers)
        _, x2 = grid.mesh()
        out = vertical_derivative(RectFunction(grid, np.sin(np.pi * x2)), 1)
        errors.append(abs(out.values[0, -1] + np.pi))
    rates = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    assert np.all(rates > 1.8)


@pytest.mark.parametrize("order", [1, 2])
def test_vertical_derivative_of_constant_is_zero(order):
    grid = RectGrid.uniform(8, 9)
    out = vertical_derivative(RectFunction(grid, np.full(grid.shape, 3.7)), order)
    np.testing.assert_allclose(out.values, 0.0, atol=1e-10)


def test_vertical_derivative_rejects_coarse_grid_and_bad_order():
    grid = RectGrid.uniform(8, 4)
    with pytest.raises(ValueError):
        vertical_derivative(RectFunction(grid, np.zeros(grid.shape)), 1)
    grid = RectGrid.uniform(8, 9)
    with pytest.raises(ValueError):
        vertical_derivative(RectFunction(grid, np.zeros(grid.shape)), 3)


def test_fornberg_reproduces_centered_stencil():
    np.testing.assert_allclose(fornberg_weights(0.0, np.array([-1.0, 0.0, 1.0]), 2), [1, -2, 1], atol=1e-14)


def test_quadrature_of_constant_over_time_and_torus():
    tg = TimeGrid.uniform(1.0, 40)
    g = TorusGrid(32)
    assert abs(quadrature(np.ones((41, 32)), tg, g) - 2 * np.pi) <= 1e-12


def test_quadrature_of_mean_zero_cosine():
    tg = TimeGrid.uniform(1.0, 40)
    g = TorusGrid(32)
    values = np.ones((41, 1)) * np.cos(g.nodes)[None, :]
    assert abs(quadrature(values, tg, g)) <= 1e-12


def test_quadrature_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        quadrature(np.ones((3, 4)), TimeGrid.uniform(1.0, 2), TorusGrid(8))


def test_quadrature_of_weighted_bump_matches_refined_reference():
    # e^{2 s phi0}-type integrand with small s: midpoint-in-time trapezoid vs a 4x finer grid
    def integrand(nt, nx):
        tg = TimeGrid.interior(1.0, nt)
        g = TorusGrid(nx)
        t = tg.nodes[:, None]
        x = g.nodes[None, :]
        phi = -(np.exp(0.5 * np.cos(x)) + 1.0) / (t * (1 - t))
        return quadrature(np.exp(2 * 0.01 * phi), tg, g)

    coarse, fine = integrand(200, 64), integrand(800, 64)
    assert abs(coarse - fine) <= 1e-6 * abs(fine)


def test_time_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid.uniform(-1.0, 4)
    with pytest.raises(ValueError):
        TimeGrid(1.0, 2, np.array([0.0, 0.7, 0.5]))


@given(st.floats(0.1, 10.0), st.integers(2, 200))
def test_time_weights_sum_to_horizon(T, n):
    assert abs(TimeGrid.uniform(T, n).time_weights().sum() - T) <= 1e-12 * T


@given(st.integers(4, 40).map(lambda m: 2 * m), st.integers(5, 40))
def test_rect_quadrature_of_constant_is_area(n, layers):
    grid = RectGrid.uniform(n, layers)
    assert abs(quadrature(np.ones(grid.shape), None, grid) - 2 * np.pi) <= 1e-12
