import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from heatbeam.grid import RectGrid, TimeGrid
from heatbeam.operators import CoupledState, hilbert_inner, random_state
from heatbeam.simulator import (ModeStepper, SourceSpec, check_resolvent_bound, exponential_reference,
                                modal_energy, resolvent_constant_exact, solve_adjoint, solve_dual,
                                solve_forward)
from heatbeam.operators import ModeSystem
from heatbeam.weights import ObservationRegions

GRID = RectGrid.uniform(16, 9)
TG = TimeGrid.uniform(0.5, 32)
seeds = st.integers(0, 2 ** 32 - 1)
alphas = st.sampled_from([0.0, 0.5, 1.0, 4.0])


def test_zero_state_stays_zero():
    traj = solve_forward(CoupledState.zeros(GRID), None, TG, 1.0)
    assert np.all(traj.norms() == 0.0)


def test_single_mode_stays_in_its_mode():
    x1, x2 = GRID.mesh()
    nodes = GRID.torus.nodes
    Y0 = CoupledState.from_arrays(GRID, np.sin(np.pi * x2) * np.cos(3 * x1), 0.2 * np.cos(3 * nodes), 0 * nodes)
    energy = modal_energy(solve_forward(Y0, None, TG, 1.0))
    others = np.delete(energy, 3, axis=1)
    assert np.max(others) <= 1e-25 * np.max(energy)
    assert np.all(energy[:, 3] > 0)


@given(seeds, alphas)
def test_energy_non_increasing(seed, alpha):
    Y0 = random_state(GRID, np.random.default_rng(seed))
    audit = solve_forward(Y0, None, TG, alpha).dissipation
    energy = audit["energy"]
    assert np.all(np.diff(energy) <= 1e-12 * energy[0])
    assert np.max(np.abs(audit["scheme_residual"])) <= 1e-12 * energy[0]


@given(seeds, alphas)
def test_crank_nicolson_energy_identity_is_exact(seed, alpha):
    Y0 = random_state(GRID, np.random.default_rng(seed))
    audit = solve_forward(Y0, None, TG, alpha, scheme="crank-nicolson").dissipation
    assert np.max(np.abs(audit["residual"])) <= 1e-12 * audit["energy"][0]


@given(seeds, alphas)
def test_adjoint_energy_non_increasing(seed, alpha):
    V0 = random_state(GRID, np.random.default_rng(seed))
    for solver in (solve_adjoint, solve_dual):
        energy = solver(V0, TG, alpha).dissipation["energy"]
        assert np.all(np.diff(energy) <= 1e-12 * energy[0])


@given(seeds, alphas, st.sampled_from(["implicit-euler", "crank-nicolson"]))
def test_dual_is_discrete_transpose(seed, alpha, scheme):
    rng = np.random.default_rng(seed)
    Y0, V0 = random_state(GRID, rng), random_state(GRID, rng)
    forward = solve_forward(Y0, None, TG, alpha, scheme).state(-1)
    dual = solve_dual(V0, TG, alpha, scheme).state(-1)
    lhs, rhs = hilbert_inner(forward, V0), hilbert_inner(Y0, dual)
    assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1.0)


def test_crank_nicolson_matches_exponential_reference():
    Y0 = random_state(GRID, np.random.default_rng(3), 2.0, 3, 3)
    errors = []
    for steps in (64, 128):
        traj = solve_forward(Y0, None, TimeGrid.uniform(0.25, steps), 1.0, "crank-nicolson")
        exact = exponential_reference(Y0, 1.0, 0.25)
        diff = [a - b for a, b in zip(traj.state(-1).arrays(), exact.arrays())]
        gap = CoupledState.from_arrays(GRID, *diff)
        errors.append(np.sqrt(hilbert_inner(gap, gap)))
    assert np.log2(errors[0] / errors[1]) > 1.9


def test_controls_are_masked_to_their_regions():
    regions = ObservationRegions.default()
    n = TG.nodes.size
    g = np.ones((n,) + GRID.shape)
    outside = ~regions.omega_mask(GRID)
    src = SourceSpec(g=g * outside[None], regions=regions)
    traj = solve_forward(CoupledState.zeros(GRID), src, TG, 1.0)
    assert np.all(traj.norms() == 0.0)
    with pytest.raises(ValueError):
        SourceSpec(g=g)


def test_source_shape_is_checked():
    src = SourceSpec(G=np.ones((3, 2)))
    with pytest.raises(ValueError, match="shape"):
        solve_forward(CoupledState.zeros(GRID), src, TG, 1.0)


def test_invalid_inputs_are_rejected():
    Y0 = CoupledState.zeros(GRID)
    with pytest.raises(ValueError):
        solve_forward(Y0, None, TG, 1.0, scheme="rk4")
    with pytest.raises(ValueError):
        solve_forward(Y0, None, TimeGrid.interior(1.0, 8), 1.0)
    with pytest.raises(ValueError):
        ModeStepper(ModeSystem(GRID, 1.0), 0.0)
    nodes = GRID.torus.nodes
    bad = CoupledState.from_arrays(GRID, np.zeros(GRID.shape), 0 * nodes, np.cos(nodes))
    with pytest.raises(ValueError, match="trace"):
        solve_forward(bad, None, TG, 1.0)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 4.0])
def test_sampled_resolvent_bound_never_beats_exact(alpha):
    exact = resolvent_constant_exact(alpha, GRID)
    sampled = check_resolvent_bound(alpha, 5, GRID, np.random.default_rng(1))
    assert exact > 0 and sampled >= exact * (1 - 1e-12)


@given(seeds, st.floats(1e-3, 1e3))
def test_resolvent_ratio_is_scale_invariant(seed, factor):
    system = ModeSystem(GRID, 1.0)
    coords = system.state_to_modes(random_state(GRID, np.random.default_rng(seed)))

    def ratio(x):
        image = system.apply(x)
        return np.sqrt(system.inner(image, image) / system.inner(x, x))

    assert ratio(factor * coords) == pytest.approx(ratio(coords), rel=1e-12)


def test_resolvent_requires_samples():
    with pytest.raises(ValueError):
        check_resolvent_bound(1.0, 0, GRID)


def test_trajectory_csv(tmp_path):
    traj = solve_forward(random_state(GRID, np.random.default_rng(0)), None, TG, 1.0)
    path = tmp_path / "traj.csv"
    traj.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["time", "h_norm", "fluid_norm", "displacement_norm", "velocity_norm"]
    assert len(rows) == TG.nodes.size + 1
    assert float(rows[1][1]) == pytest.approx(traj.norms()[0], rel=1e-15)
