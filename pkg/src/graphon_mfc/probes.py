"""Numerical probes of the standing assumptions and the a priori estimates.

The explicit constants follow the usual Gronwall route on ``[t, T]`` with
``h = T - t`` and ``Lam = lambda(U)``: split ``sup|X|^2`` into the initial,
drift and martingale parts (factor 3), bound the drift part by Cauchy-Schwarz
(factor ``h``) and the martingale part by Doob (factor 4), and use
``d(mu_r, mu'_r)^2 <= sum_k lambda_k E|X_r - X'_r|^2`` for coupled particles.
Each step is valid verbatim for the Euler scheme (discrete Doob and discrete
Gronwall), so the constants bound the simulated quantities as well.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import rng
from .dynamics import (CoefficientSet, ParticleEnsemble, Policy, SimulationResult, cost_from_samples, simulate)
from .measure_space import LabelGrid, MeasureCollection, collection_distance, path_distance


# --------------------------------------------------------------------------
# explicit constants


def _exp(v: float, scale: float = 1.0) -> float:
    """``scale * exp(v)``; the constants exceed the float range quickly and inf is the honest float value."""
    with np.errstate(over="ignore"):
        return float(np.float64(scale) * np.exp(v))


def stability_constant(L: float, horizon: float, total_mass: float) -> float:
    """Constant of the initial-condition stability estimate (fixed open-loop control)."""
    c = 6.0 * L**2 * (horizon + 4.0) * (1.0 + total_mass)
    return _exp(c * horizon, 3.0)


def moment_constant(M: float, horizon: float, total_mass: float) -> float:
    """Constant ``C`` in ``sup-moment <= C (1 + E|xi|^2 + int E|alpha|^2)``."""
    c = 15.0 * max(horizon, 4.0) * M**2
    return _exp(c * (1.0 + total_mass) * horizon, max(3.0, c * horizon * total_mass, c * (1.0 + total_mass)))


def strengthened_moment_constant(M: float, horizon: float, total_mass: float) -> float:
    """Constant of the action-free moment bound under the strengthened growth condition."""
    c = 9.0 * max(horizon, 4.0) * M**2
    return _exp(c * (1.0 + total_mass) * horizon, max(3.0, c * horizon * total_mass))


def contraction_constant(L: float, horizon: float, total_mass: float) -> float:
    """``C`` with ``d(Psi nu, Psi mu)^2 <= C h d(nu, mu)^2`` on a window of length ``h``."""
    c = 8.0 * L**2 * max(horizon, 4.0)
    return _exp(c * horizon, c * total_mass)


def contraction_window(L: float, total_mass: float, target: float = 0.5) -> float:
    """Largest window length ``h`` with ``C(h) h <= target`` (bisection)."""
    if L == 0 or total_mass == 0:
        return np.inf
    lo, hi = 0.0, 1.0
    while contraction_constant(L, hi, total_mass) * hi <= target:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if contraction_constant(L, mid, total_mass) * mid <= target:
            lo = mid
        else:
            hi = mid
    return lo


# --------------------------------------------------------------------------
# coefficient validation


@dataclass
class AssumptionReport:
    n_probes: int
    empirical: dict
    declared: dict
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return asdict(self)


def _random_collection(gen: np.random.Generator, grid: LabelGrid, n_atoms: int, dim: int, scale: float):
    centers = gen.normal(0.0, scale, size=(len(grid), 1, dim))
    spread = gen.uniform(0.1, 1.0) * scale
    return MeasureCollection.from_array(grid, centers + spread * gen.normal(size=(len(grid), n_atoms, dim)))


def _random_actions(gen, space, n, scale):
    if space.bounded:
        return gen.uniform(space.lower, space.upper, size=(n, space.dim))
    return space.origin + gen.normal(0.0, scale, size=(n, space.dim))


def validate_coefficients(coeffs: CoefficientSet, probe_budget: int, seed: int, *, grid: Optional[LabelGrid] = None,
                          n_atoms: int = 4, scale: float = 2.0, rtol: float = 1e-9) -> AssumptionReport:
    """Sample random tuples and report empirical Lipschitz, growth and Hoelder ratios.

    Violations of the declared ``L``, ``M``, ``M_strong``, ``M_cost`` and
    ``K`` are flagged; nothing is raised.
    """
    if probe_budget < 1:
        raise ValueError("probe_budget must be at least 1")
    grid = grid or coeffs.grid or LabelGrid.uniform(2)
    d, space = coeffs.dim, coeffs.action_space
    g1, g2, g3, g4 = coeffs.gammas
    keys = ["b_lip_x", "b_lip_mu", "b_lip", "sigma_lip_x", "sigma_lip_mu", "sigma_lip", "growth",
            "strengthened_growth", "cost_growth", "f_holder_x", "f_holder_mu", "g_holder_x", "g_holder_mu"]
    emp = dict.fromkeys(keys, 0.0)
    zero_x = MeasureCollection.dirac(grid, np.zeros(d))
    zero_a = MeasureCollection.dirac(grid, space.origin)

    def upd(key, num, den):
        if den > 1e-14:
            emp[key] = max(emp[key], float(num / den))

    for i in range(probe_budget):
        gen = rng.generator(seed, rng.AUXILIARY, 0, i)
        k = int(gen.integers(len(grid)))
        x = gen.normal(0.0, scale, size=(1, d))
        x2 = x + gen.normal(0.0, scale * 10.0 ** gen.uniform(-3, 0), size=(1, d))
        a = _random_actions(gen, space, 1, scale)
        mu = _random_collection(gen, grid, n_atoms, d, scale)
        if gen.uniform() < 0.5:
            # small perturbation of mu
            atoms, _ = mu.stacked()
            mu2 = MeasureCollection.from_array(grid, atoms + 10.0 ** gen.uniform(-3, 0) * gen.normal(size=atoms.shape))
        else:
            mu2 = _random_collection(gen, grid, n_atoms, d, scale)
        nu = MeasureCollection.from_array(grid, np.stack([_random_actions(gen, space, n_atoms, scale)
                                                          for _ in range(len(grid))]))
        dmu = collection_distance(mu, mu2)
        dx = float(np.linalg.norm(x - x2))
        mu_norm, mu2_norm = np.sqrt(mu.squared_norm), np.sqrt(mu2.squared_norm)
        nu_norm = collection_distance(nu, zero_a)

        def b(xx, m):
            return coeffs.drift(k, xx, a, m, nu)[0]

        def s(xx, m):
            return coeffs.volatility(k, xx, a, m, nu)[0]

        for name, fn in (("b", b), ("sigma", s)):
            upd(f"{name}_lip_x", np.linalg.norm(fn(x, mu) - fn(x2, mu)), dx)
            upd(f"{name}_lip_mu", np.linalg.norm(fn(x, mu) - fn(x, mu2)), dmu)
            upd(f"{name}_lip", np.linalg.norm(fn(x, mu) - fn(x2, mu2)), dx + dmu)
        size = np.linalg.norm(b(x, mu)) + np.linalg.norm(s(x, mu))
        xn = float(np.linalg.norm(x))
        an = float(np.linalg.norm(a - space.origin))
        upd("growth", size, 1.0 + xn + an + mu_norm + nu_norm)
        upd("strengthened_growth", size, 1.0 + xn + mu_norm)
        f = lambda xx, m: float(coeffs.running_cost(k, xx, a, m, nu)[0])
        g = lambda xx, m: float(coeffs.terminal_cost(k, xx, m)[0])
        upd("cost_growth", abs(f(x, mu)) + abs(g(x, mu)), 1.0 + xn**2 + mu_norm**2)
        x2n = float(np.linalg.norm(x2))
        upd("f_holder_x", abs(f(x, mu) - f(x2, mu)), dx**g1 * (1.0 + xn + x2n) ** (2 - g1))
        upd("f_holder_mu", abs(f(x, mu) - f(x, mu2)), dmu**g2 * (1.0 + mu_norm + mu2_norm) ** (2 - g2))
        upd("g_holder_x", abs(g(x, mu) - g(x2, mu)), dx**g3 * (1.0 + xn + x2n) ** (2 - g3))
        upd("g_holder_mu", abs(g(x, mu) - g(x, mu2)), dmu**g4 * (1.0 + mu_norm + mu2_norm) ** (2 - g4))

    declared = {"L": coeffs.L, "M": coeffs.M, "M_strong": coeffs.M_strong, "K": coeffs.K, "M_cost": coeffs.M_cost,
                "gammas": list(coeffs.gammas)}
    checks = [("b_lip", "L"), ("sigma_lip", "L"), ("growth", "M"), ("cost_growth", "M_cost"),
              ("f_holder_x", "K"), ("f_holder_mu", "K"), ("g_holder_x", "K"), ("g_holder_mu", "K")]
    if coeffs.strengthened_growth:
        checks.append(("strengthened_growth", "M_strong"))
    violations = [f"{key}={emp[key]:.6g} exceeds {const}={declared[const]:.6g}" for key, const in checks
                  if emp[key] > declared[const] * (1.0 + rtol) + rtol]
    return AssumptionReport(probe_budget, emp, declared, violations)


# --------------------------------------------------------------------------
# a priori estimates


@dataclass
class MomentReport:
    lhs: float
    initial_moment: float
    action_energy: float
    constant: float
    rhs: float
    holds: bool
    strengthened_constant: Optional[float] = None
    strengthened_rhs: Optional[float] = None
    strengthened_holds: Optional[bool] = None


def sup_moment(result: SimulationResult) -> float:
    """``sum_k lambda_k mean_i max_n |X_n^{k,i}|^2`` over the recorded grid."""
    flow = result.flow
    sup_sq = np.max(np.sum(flow.paths**2, axis=-1), axis=0)
    return float(flow.grid.weights @ np.sum(flow.weights * sup_sq, axis=1))


def moment_bound_check(coeffs: CoefficientSet, result: SimulationResult, init: ParticleEnsemble) -> MomentReport:
    """Compare the simulated sup-moment with the explicit moment bounds."""
    if result.record_every != 1:
        raise ValueError("the sup-moment needs every step recorded")
    h = float(result.flow.times[-1] - result.flow.times[0])
    lam = init.grid.total_mass
    lhs = sup_moment(result)
    xi = init.second_moment()
    energy = result.diagnostics["action_energy"]
    c = moment_constant(coeffs.M, h, lam)
    rhs = c * (1.0 + xi + energy)
    report = MomentReport(lhs, xi, energy, c, rhs, bool(lhs <= rhs))
    if coeffs.strengthened_growth:
        c2 = strengthened_moment_constant(coeffs.M_strong, h, lam)
        report.strengthened_constant = c2
        report.strengthened_rhs = c2 * (1.0 + xi)
        report.strengthened_holds = bool(lhs <= report.strengthened_rhs)
    return report


@dataclass
class StabilityReport:
    lhs: float
    rhs: float
    C_hat: float
    bound: float
    bound_applies: bool
    moments: tuple


def stability_probe(coeffs: CoefficientSet, policy: Policy, init_a: ParticleEnsemble, init_b: ParticleEnsemble,
                    t0: float, T: float, steps: int, seed: int) -> StabilityReport:
    """Both sides of the initial-condition stability estimate under synchronous coupling.

    ``bound`` is the explicit constant; it applies to controls that do not
    feed back on the state (open-loop tables, constant actions).
    """
    if not init_a.grid.same_as(init_b.grid) or init_a.positions.shape != init_b.positions.shape:
        raise ValueError("ensembles must share grid and particle layout")
    if not (np.array_equal(init_a.stream_ids, init_b.stream_ids) and np.array_equal(init_a.marks, init_b.marks)):
        raise ValueError("ensembles must share noise streams and marks")
    res_a = simulate(coeffs, policy, init_a, t0, T, steps, seed)
    res_b = simulate(coeffs, policy, init_b, t0, T, steps, seed)
    lhs = path_distance(res_a.flow, res_b.flow) ** 2
    diff = init_a.positions - init_b.positions
    rhs = float(init_a.grid.weights @ np.mean(np.sum(diff**2, axis=-1), axis=1))
    c_hat = lhs / rhs if rhs > 0 else 0.0
    bound = stability_constant(coeffs.L, T - t0, init_a.grid.total_mass)
    applies = not getattr(policy, "state_dependent", True)
    return StabilityReport(lhs, rhs, c_hat, bound, applies,
                           (moment_bound_check(coeffs, res_a, init_a), moment_bound_check(coeffs, res_b, init_b)))


# --------------------------------------------------------------------------
# law invariance


@dataclass
class LawInvarianceReport:
    scheme: str
    base_costs: list
    alt_costs: list
    pooled_stderr: list
    discrepancies: list
    max_discrepancy: float
    max_abs_difference: float
    replication_stderr: Optional[float] = None
    iid_discrepancies: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


SCHEMES = ("identity", "shuffle", "shuffle_positions", "redraw")


def _permutations(seed: int, replication: int, n_labels: int, n: int) -> np.ndarray:
    gen = rng.generator(seed, rng.AUXILIARY, n_labels, replication)
    return np.stack([gen.permutation(n) for _ in range(n_labels)])


def law_invariance_test(coeffs: CoefficientSet, policy: Policy, init: ParticleEnsemble, scheme: str, t0: float,
                        T: float, steps: int, seed: int, replications: int, *,
                        quantile_map: Optional[Callable] = None) -> LawInvarianceReport:
    """Cost estimates of law-equivalent initializations, compared in pooled-SE units.

    Schemes: ``identity`` (same ensemble), ``shuffle`` (per-label permutation
    of particles together with their marks and noise streams), ``shuffle_positions``
    (permute initial positions only), ``redraw`` (fresh marks and noise from an
    independent seed through ``quantile_map``).  Replication ``r`` uses seed
    ``seed + r`` for the base run; the deterministic schemes share it.

    Particle costs interact through the empirical laws, so the per-run
    standard error (which treats particles as independent) understates the
    spread of a cost estimate.  With two or more replications the pooled
    error bar is ``sqrt(var(base) + var(alt))`` over replications, and
    ``discrepancies`` are measured in that unit; ``iid_discrepancies`` keep
    the per-run version.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    if scheme == "redraw" and quantile_map is None:
        raise ValueError("the redraw scheme needs the quantile map")
    n_labels, n = init.positions.shape[:2]
    base_costs, alt_costs, pooled, disc = [], [], [], []
    for r in range(replications):
        base_seed = seed + r
        if scheme == "redraw":
            base = ParticleEnsemble.from_quantile_map(quantile_map, init.grid, n, base_seed)
        else:
            base = init
        res = simulate(coeffs, policy, base, t0, T, steps, base_seed)
        j0, s0 = cost_from_samples(init.grid, res.cost_samples)
        alt_seed = base_seed
        if scheme == "identity":
            alt = base
        elif scheme == "shuffle":
            alt = base.permuted(_permutations(seed, r, n_labels, n))
        elif scheme == "shuffle_positions":
            perms = _permutations(seed, r, n_labels, n)
            alt = base.with_positions(base.positions[np.arange(n_labels)[:, None], perms])
        else:
            # independent copy: seeds beyond the base range
            alt_seed = seed + replications + r + 1_000_003
            alt = ParticleEnsemble.from_quantile_map(quantile_map, init.grid, n, alt_seed)
        res_alt = simulate(coeffs, policy, alt, t0, T, steps, alt_seed)
        j1, s1 = cost_from_samples(init.grid, res_alt.cost_samples)
        se = float(np.hypot(s0, s1))
        base_costs.append(j0)
        alt_costs.append(j1)
        pooled.append(se)
        gap = abs(j1 - j0)
        disc.append(0.0 if gap == 0 else (gap / se if se > 0 else np.inf))
    iid_disc = disc
    rep_se = None
    if replications >= 2:
        rep_se = float(np.sqrt(np.var(base_costs, ddof=1) + np.var(alt_costs, ddof=1)))
        gaps = [abs(a - b) for a, b in zip(base_costs, alt_costs)]
        disc = [0.0 if g == 0 else (g / rep_se if rep_se > 0 else np.inf) for g in gaps]
    return LawInvarianceReport(scheme, base_costs, alt_costs, pooled, disc, float(max(disc)),
                               float(max(abs(a - b) for a, b in zip(base_costs, alt_costs))), rep_se, iid_disc)
