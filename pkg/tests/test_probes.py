import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from graphon_mfc.dynamics import ConstantPolicy, OpenLoopTable, ParticleEnsemble, simulate
from graphon_mfc.measure_space import Graphon, LabelGrid
from graphon_mfc.models import custom_polynomial, graphon_lq, graphon_mean_reversion
from graphon_mfc.probes import (contraction_constant, contraction_window, law_invariance_test, moment_bound_check,
                                moment_constant, stability_constant, stability_probe, strengthened_moment_constant,
                                sup_moment, validate_coefficients)

ZERO = ConstantPolicy([0.0])
QMAP = lambda u, z: u + norm.ppf(z)  # noqa: E731


def test_linear_drift_lipschitz_estimate():
    grid = LabelGrid.uniform(2)
    coeffs = custom_polynomial(grid, Graphon.constant(grid), b1=2.0)
    rep = validate_coefficients(coeffs, 100, seed=1)
    assert rep.empirical["b_lip_x"] == pytest.approx(2.0, rel=1e-9)
    assert rep.empirical["b_lip_mu"] == 0.0


def test_bounded_drift_growth():
    grid = LabelGrid.uniform(2)
    coeffs = custom_polynomial(grid, Graphon.constant(grid), b0=1.5)
    rep = validate_coefficients(coeffs, 100, seed=2)
    assert rep.empirical["growth"] <= 1.5 + 1e-12
    assert coeffs.M >= 1.5 and not any(v.startswith("growth") for v in rep.violations)


def test_graphon_drift_below_hand_bound():
    grid = LabelGrid.uniform(4)
    G = Graphon.from_kernel(lambda u, v: np.exp(-2 * abs(u - v)), grid)
    kappa = 0.7
    coeffs = graphon_mean_reversion(grid, G, kappa=kappa)
    rep = validate_coefficients(coeffs, 200, seed=3)
    # |kappa (m_G(mu) - m_G(mu'))| <= kappa * max_u ||G(u,.)||_{L2(lambda)} / deg(u) * d(mu, mu')
    degree = G.matrix @ grid.weights
    hand = kappa * max(np.sqrt(G.matrix[i] ** 2 @ grid.weights) / degree[i] for i in range(4))
    assert rep.empirical["b_lip_mu"] <= hand * (1 + 1e-9)
    # the tracking cost is not Hoelder in x uniformly in mu, so only Lipschitz and growth keys must pass
    assert not [v for v in rep.violations if not v.startswith(("f_holder", "g_holder"))]


def test_declared_constants_of_families_pass():
    grid = LabelGrid.uniform(3)
    G = Graphon.from_kernel(lambda u, v: u * v, grid)
    for coeffs in (graphon_lq(grid, G, c=2.0), graphon_mean_reversion(grid, G, sigma1=0.5),
                   custom_polynomial(grid, G, b0=0.3, b1=-1.0, b3=0.5, s0=0.4, s2=0.2, action_bound=2.0, b2=1.0)):
        rep = validate_coefficients(coeffs, 150, seed=4)
        lip_growth = [v for v in rep.violations if not v.startswith(("f_holder", "g_holder"))]
        assert not lip_growth, lip_growth


def test_understated_constant_is_flagged():
    grid = LabelGrid.uniform(2)
    coeffs = custom_polynomial(grid, Graphon.constant(grid), b1=3.0).replace(L=1.0)
    assert any(v.startswith("b_lip") for v in validate_coefficients(coeffs, 50, seed=5).violations)


def test_constants_are_monotone():
    for fn in (stability_constant, moment_constant, strengthened_moment_constant, contraction_constant):
        assert fn(1.0, 0.5, 1.0) <= fn(2.0, 0.5, 1.0) <= fn(2.0, 1.0, 1.0) <= fn(2.0, 1.0, 2.0)
    h = contraction_window(1.0, 1.0)
    assert contraction_constant(1.0, h, 1.0) * h == pytest.approx(0.5, rel=1e-9)
    assert contraction_window(0.0, 1.0) == np.inf


def test_stability_identical_inputs():
    grid = LabelGrid.uniform(2)
    init = ParticleEnsemble.from_quantile_map(QMAP, grid, 50, 0)
    coeffs = graphon_mean_reversion(grid, Graphon.constant(grid))
    rep = stability_probe(coeffs, ZERO, init, init, 0.0, 1.0, 10, 0)
    assert rep.lhs == 0.0 and rep.C_hat == 0.0


def test_stability_additive_noise_propagates_differences():
    grid = LabelGrid.uniform(2)
    coeffs = custom_polynomial(grid, Graphon.constant(grid), s0=1.0)
    a = ParticleEnsemble.from_quantile_map(QMAP, grid, 40, 0)
    b = a.with_positions(a.positions + np.random.default_rng(0).normal(size=a.positions.shape))
    rep = stability_probe(coeffs, ZERO, a, b, 0.0, 1.0, 10, 0)
    assert rep.C_hat == pytest.approx(1.0, abs=1e-12)
    assert rep.bound_applies and rep.C_hat <= rep.bound


def test_stability_needs_shared_streams():
    grid = LabelGrid.uniform(2)
    a = ParticleEnsemble.from_quantile_map(QMAP, grid, 5, 0)
    b = ParticleEnsemble.from_quantile_map(QMAP, grid, 5, 1).permuted(np.stack([np.roll(np.arange(5), 1)] * 2))
    with pytest.raises(ValueError):
        stability_probe(custom_polynomial(grid, Graphon.constant(grid)), ZERO, a, b, 0.0, 1.0, 2, 0)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000))
def test_moment_bound_on_random_instances(seed):
    gen = np.random.default_rng(seed)
    grid = LabelGrid.uniform(3)
    G = Graphon(grid, gen.uniform(0.1, 1.0, size=(3, 3)))
    coeffs = custom_polynomial(grid, G, b0=gen.normal(), b1=gen.normal(), b2=1.0, b3=gen.normal(),
                               s0=abs(gen.normal()), s1=0.3 * gen.normal(), action_bound=1.0)
    init = ParticleEnsemble.from_quantile_map(QMAP, grid, 100, seed)
    table = OpenLoopTable(gen.uniform(-1, 1, size=(3, 20, 1)))
    res = simulate(coeffs, table, init, 0.0, 1.0, 20, seed)
    rep = moment_bound_check(coeffs, res, init)
    assert rep.holds and rep.lhs >= 0
    assert rep.lhs == pytest.approx(sup_moment(res))


def test_strengthened_moment_bound():
    grid = LabelGrid.uniform(3)
    coeffs = graphon_lq(grid, Graphon.constant(grid), c=1.0, action_bound=2.0)
    assert coeffs.strengthened_growth
    init = ParticleEnsemble.from_quantile_map(QMAP, grid, 200, 0)
    res = simulate(coeffs, ConstantPolicy([2.0]), init, 0.0, 1.0, 20, 0)
    rep = moment_bound_check(coeffs, res, init)
    assert rep.strengthened_holds and rep.holds


def test_law_invariance_deterministic_schemes():
    grid = LabelGrid.uniform(3)
    coeffs = custom_polynomial(grid, Graphon.from_kernel(lambda u, v: u * v, grid), b1=-1.0, b3=1.0, fm=1.0, gm=0.5)
    init = ParticleEnsemble.from_quantile_map(QMAP, grid, 200, 0)
    for scheme in ("identity", "shuffle", "shuffle_positions"):
        rep = law_invariance_test(coeffs, ZERO, init, scheme, 0.0, 1.0, 10, 0, 3)
        limit = 0.0 if scheme == "identity" else 1e-12
        assert rep.max_abs_difference <= limit, scheme


def test_law_invariance_shuffle_with_noise_is_exact():
    grid = LabelGrid.uniform(2)
    coeffs = custom_polynomial(grid, Graphon.constant(grid), b1=-1.0, b3=1.0, s0=0.5, fm=1.0)
    init = ParticleEnsemble.from_quantile_map(QMAP, grid, 200, 0)
    rep = law_invariance_test(coeffs, ZERO, init, "shuffle", 0.0, 1.0, 10, 0, 2)
    assert rep.max_abs_difference <= 1e-12


def test_law_invariance_redraw_statistical():
    grid = LabelGrid.uniform(2)
    coeffs = custom_polynomial(grid, Graphon.constant(grid), b1=-1.0, b3=1.0, s0=0.5, fm=1.0, gx=1.0)
    init = ParticleEnsemble.from_quantile_map(QMAP, grid, 2000, 0)
    rep = law_invariance_test(coeffs, ZERO, init, "redraw", 0.0, 1.0, 10, 0, 3, quantile_map=QMAP)
    assert rep.max_discrepancy <= 3.0 + 1.0  # loose unit check; the acceptance suite runs the full protocol


def test_unknown_scheme():
    grid = LabelGrid.uniform(2)
    init = ParticleEnsemble.from_quantile_map(QMAP, grid, 5, 0)
    with pytest.raises(ValueError):
        law_invariance_test(custom_polynomial(grid, Graphon.constant(grid)), ZERO, init, "nope", 0, 1, 2, 0, 1)


def test_law_invariance_pooled_error_from_replications():
    grid = LabelGrid.uniform(2)
    coeffs = custom_polynomial(grid, Graphon.constant(grid), b1=-1.0, b3=1.0, s0=0.5, fm=1.0, gx=1.0)
    init = ParticleEnsemble.from_quantile_map(QMAP, grid, 200, 0)
    rep = law_invariance_test(coeffs, ZERO, init, "redraw", 0.0, 1.0, 5, 0, 4, quantile_map=QMAP)
    se = np.sqrt(np.var(rep.base_costs, ddof=1) + np.var(rep.alt_costs, ddof=1))
    assert rep.replication_stderr == pytest.approx(se, rel=1e-12)
    gaps = np.abs(np.subtract(rep.alt_costs, rep.base_costs))
    assert np.allclose(rep.discrepancies, gaps / se, rtol=1e-12)
    assert np.allclose(rep.iid_discrepancies, gaps / np.asarray(rep.pooled_stderr), rtol=1e-12)
    single = law_invariance_test(coeffs, ZERO, init, "redraw", 0.0, 1.0, 5, 0, 1, quantile_map=QMAP)
    assert single.replication_stderr is None and single.discrepancies == single.iid_discrepancies
