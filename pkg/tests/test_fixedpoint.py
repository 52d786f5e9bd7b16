import json

import numpy as np
import pytest
from scipy.stats import norm

from graphon_mfc.dynamics import ConstantPolicy, ParticleEnsemble, simulate
from graphon_mfc.fixedpoint import (PicardDivergenceError, apply_psi, contraction_estimate, picard_solve,
                                    predicted_ratio)
from graphon_mfc.measure_space import (Graphon, LabelGrid, MeasureCollection, MeasureFlow, marginal_flow_distance,
                                       path_distance)
from graphon_mfc.models import custom_polynomial, graphon_mean_reversion

ZERO = ConstantPolicy([0.0])


def ensemble(grid, n, seed=0, shift=0.0):
    return ParticleEnsemble.from_quantile_map(lambda u, z: shift + u + norm.ppf(z), grid, n, seed)


def times(T, steps):
    return np.linspace(0.0, T, steps + 1)


def test_mu_independent_psi_ignores_frozen_flow():
    grid = LabelGrid.uniform(2)
    coeffs = custom_polynomial(grid, Graphon.constant(grid), b0=0.5, b1=-1.0, s0=0.7)
    init = ensemble(grid, 30)
    direct = simulate(coeffs, ZERO, init, 0.0, 1.0, 10, 3).flow
    for shift in (0.0, 2.0, -5.0):
        nu = MeasureFlow.constant(MeasureCollection.dirac(grid, [shift]), times(1.0, 10))
        assert np.array_equal(apply_psi(coeffs, ZERO, init, nu, 3).paths, direct.paths)


def test_simulated_flow_is_self_consistent():
    grid = LabelGrid.uniform(3)
    coeffs = graphon_mean_reversion(grid, Graphon.from_kernel(lambda u, v: u * v, grid), sigma0=0.5)
    N = 2000
    init = ensemble(grid, N)
    nu = simulate(coeffs, ZERO, init, 0.0, 1.0, 20, 7).flow
    assert path_distance(apply_psi(coeffs, ZERO, init, nu, 7), nu) <= 1e-12
    # a different noise seed only changes the laws at the sampling scale
    other = apply_psi(coeffs, ZERO, init, nu, 8)
    spread = np.sqrt(np.max(nu.snapshot(len(nu) - 1).second_moments))
    assert marginal_flow_distance(other, nu) <= 3.0 * spread / np.sqrt(N)


def test_frozen_mean_gives_linear_ode():
    grid = LabelGrid.uniform(2)
    coeffs = custom_polynomial(grid, Graphon.identity(grid), b1=-1.0, b3=1.0)
    init = ensemble(grid, 5)
    m = 0.8
    steps = 200
    nu = MeasureFlow.constant(MeasureCollection.dirac(grid, [m]), times(1.0, steps))
    flow = apply_psi(coeffs, ZERO, init, nu, 0)
    t = flow.times[:, None, None, None]
    exact = m + (init.positions[None] - m) * np.exp(-t)
    err = np.max(np.abs(flow.paths - exact))
    assert err <= 1.0 / steps * np.max(np.abs(init.positions - m))


def test_mu_independent_picard_converges_at_first_iteration():
    grid = LabelGrid.uniform(2)
    coeffs = custom_polynomial(grid, Graphon.constant(grid), b0=1.0, s0=0.3)
    flow, state = picard_solve(coeffs, ZERO, ensemble(grid, 20), 0.0, 1.0, 10, max_iters=5, seed=1)
    assert state.converged and state.converged_at_iteration == 1 and state.distance_history[1] == 0.0


def test_picard_fixed_point_and_state_invariants():
    grid = LabelGrid.uniform(3)
    coeffs = graphon_mean_reversion(grid, Graphon.from_kernel(lambda u, v: 1 - abs(u - v) / 2, grid), sigma1=0.5)
    init = ensemble(grid, 300)
    flow, state = picard_solve(coeffs, ZERO, init, 0.0, 0.5, 25, max_iters=15, tol=1e-6, seed=2)
    assert state.converged
    assert len(state.distance_history) == state.iterate_index
    assert all(d >= 0 for d in state.distance_history)
    assert path_distance(apply_psi(coeffs, ZERO, init, flow, 2), flow) < 1e-6
    for ratio in state.contraction_ratios:
        assert ratio <= predicted_ratio(coeffs, 0.5, grid.total_mass)
    data = json.loads(state.to_json())
    assert data["converged"] and data["distance_history"] == state.distance_history


def test_linear_mean_field_geometric_decay():
    grid = LabelGrid.uniform(2)
    coeffs = custom_polynomial(grid, Graphon.constant(grid), b3=1.0)
    init = ensemble(grid, 50, shift=1.0)
    _, state = picard_solve(coeffs, ZERO, init, 0.0, 0.2, 20, max_iters=12, tol=1e-10, seed=0)
    bound = predicted_ratio(coeffs, 0.2, 1.0)
    h = state.distance_history
    assert all(h[k] <= bound**k * h[0] * (1 + 1e-9) for k in range(len(h)))
    # iterates of m' = m are Taylor partial sums: ratios shrink like h / k
    assert all(r < 0.2 for r in state.contraction_ratios)


def test_divergence_is_reported():
    grid = LabelGrid.uniform(2)
    coeffs = custom_polynomial(grid, Graphon.constant(grid), b3=5.0)
    with pytest.raises(PicardDivergenceError):
        picard_solve(coeffs, ZERO, ensemble(grid, 20, shift=1.0), 0.0, 3.0, 60, max_iters=20, seed=0)


def test_time_splitting_matches_single_window():
    grid = LabelGrid.uniform(2)
    coeffs = graphon_mean_reversion(grid, Graphon.constant(grid), sigma0=0.4, sigma1=0.3)
    init = ensemble(grid, 200)
    full, s_full = picard_solve(coeffs, ZERO, init, 0.0, 1.0, 40, max_iters=30, tol=1e-9, seed=4)
    split, s_split = picard_solve(coeffs, ZERO, init, 0.0, 1.0, 40, max_iters=30, tol=1e-9, seed=4, window=0.25)
    assert s_full.converged and s_split.converged and len(s_split.windows) == 4
    assert path_distance(full, split) <= 1e-8
    _, s_auto = picard_solve(coeffs, ZERO, init, 0.0, 1.0, 40, max_iters=30, tol=1e-9, seed=4, window="auto")
    assert s_auto.converged


def test_contraction_estimate_cases():
    grid = LabelGrid.uniform(2)
    init = ensemble(grid, 40)
    t = times(0.5, 10)
    nu1 = MeasureFlow.constant(init.measure, t)
    nu2 = nu1.shifted(0.3)
    free = custom_polynomial(grid, Graphon.constant(grid), s0=1.0)
    assert contraction_estimate(free, ZERO, init, nu1, nu2, 0) == 0.0
    coupled = graphon_mean_reversion(grid, Graphon.constant(grid))
    ratio = contraction_estimate(coupled, ZERO, init, nu1, nu2, 0)
    assert 0.0 < ratio <= predicted_ratio(coupled, 0.5, 1.0)
    with pytest.raises(ValueError):
        contraction_estimate(coupled, ZERO, init, nu1, nu1, 0)


def test_invalid_arguments():
    grid = LabelGrid.uniform(2)
    coeffs = custom_polynomial(grid, Graphon.constant(grid))
    with pytest.raises(ValueError):
        picard_solve(coeffs, ZERO, ensemble(grid, 3), 0.0, 1.0, 4, max_iters=0)
    with pytest.raises(ValueError):
        picard_solve(coeffs, ZERO, ensemble(grid, 3), 0.0, 1.0, 4, max_iters=3, tol=0.0)
