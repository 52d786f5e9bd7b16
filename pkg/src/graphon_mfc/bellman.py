"""Hamiltonian, Bellman residuals, dynamic programming and verification checks."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .calculus import TestFunction
from .dynamics import (ActionSpace, CoefficientSet, ParticleEnsemble, Policy, SwitchingPolicy, cost_from_samples,
                       simulate)
from .measure_space import EmpiricalMeasure, MeasureCollection


class MarginalError(ValueError):
    """A coupling's state marginal differs from the collection it is paired with."""


class BudgetExceededError(ValueError):
    pass


def _merge_atoms(atoms: np.ndarray, weights: np.ndarray):
    uniq, inv = np.unique(atoms, axis=0, return_inverse=True)
    return uniq, np.bincount(inv.ravel(), weights=weights, minlength=uniq.shape[0])


@dataclass(frozen=True, eq=False)
class LiftedCoupling:
    """Per-label discrete laws on ``R^d x A`` with atoms ``(states[k][i], actions[k][i])``."""

    grid: object
    states: tuple
    actions: tuple
    weights: tuple

    def __post_init__(self):
        if not len(self.states) == len(self.actions) == len(self.weights) == len(self.grid):
            raise ValueError("one atom set per label is required")
        for s, a, w in zip(self.states, self.actions, self.weights):
            if s.shape[0] != a.shape[0] or s.shape[0] != w.shape[0]:
                raise ValueError("states, actions and weights must have matching lengths")
            if abs(w.sum() - 1.0) > 1e-12 or np.any(w < 0):
                raise ValueError("coupling weights must be a probability vector per label")

    @classmethod
    def from_feedback(cls, mu: MeasureCollection, actions: Sequence[np.ndarray]) -> "LiftedCoupling":
        """Attach one action to each state atom: ``pi^k = mu^k o (Id x a)^-1``."""
        acts = tuple(np.asarray(a, dtype=float).reshape(m.size, -1) for m, a in zip(mu.measures, actions))
        return cls(mu.grid, tuple(m.atoms for m in mu.measures), acts, tuple(m.weights for m in mu.measures))

    def mixture(self, other: "LiftedCoupling", theta: float) -> "LiftedCoupling":
        """``theta pi + (1 - theta) pi'`` as a concatenated atom list."""
        return LiftedCoupling(self.grid,
                              tuple(np.concatenate([a, b]) for a, b in zip(self.states, other.states)),
                              tuple(np.concatenate([a, b]) for a, b in zip(self.actions, other.actions)),
                              tuple(np.concatenate([theta * a, (1 - theta) * b])
                                    for a, b in zip(self.weights, other.weights)))

    def first_marginal(self) -> MeasureCollection:
        return MeasureCollection(self.grid, tuple(EmpiricalMeasure(*_merge_atoms(s, w))
                                                  for s, w in zip(self.states, self.weights)))

    def second_marginal(self) -> MeasureCollection:
        return MeasureCollection(self.grid, tuple(EmpiricalMeasure(*_merge_atoms(a, w))
                                                  for a, w in zip(self.actions, self.weights)))

    def marginal_matches(self, mu: MeasureCollection, tol: float = 1e-12) -> bool:
        for s, w, m in zip(self.states, self.weights, mu.measures):
            a1, w1 = _merge_atoms(s, w)
            a2, w2 = _merge_atoms(m.atoms, m.weights)
            keep1, keep2 = w1 > tol, w2 > tol
            if keep1.sum() != keep2.sum():
                return False
            if not (np.array_equal(a1[keep1], a2[keep2]) and np.allclose(w1[keep1], w2[keep2], rtol=0, atol=tol)):
                return False
        return True


@dataclass(frozen=True)
class CandidateValue:
    """A smooth candidate for the Bellman equation (a test function with analytic derivatives)."""

    function: TestFunction
    name: str = "candidate"

    def at(self, t, mu):
        return self.function.at(t, mu)

    def evaluate(self, t, mu) -> float:
        return self.function.evaluate(t, mu)


def _as_function(phi):
    return phi.function if isinstance(phi, CandidateValue) else phi


def _integrand(coeffs, snap, k, x, a, mu, nu):
    b = coeffs.drift(k, x, a, mu, nu)
    sig = coeffs.volatility(k, x, a, mu, nu)
    f = coeffs.running_cost(k, x, a, mu, nu)
    cov = np.einsum("nil,njl->nij", sig, sig)
    return np.sum(snap.grad(k, x) * b, axis=1) + 0.5 * np.einsum("nij,nij->n", snap.hess(k, x), cov) + f


def hamiltonian(coeffs: CoefficientSet, u_index: int, t: float, pi: LiftedCoupling, phi,
                mu: Optional[MeasureCollection] = None) -> float:
    """``H(u, t, pi, phi)``: the integrand averaged against ``pi^u``.

    The derivatives of ``phi`` are taken at the first marginal of ``pi``; when
    ``mu`` is given it must coincide with that marginal.
    """
    pi1 = pi.first_marginal()
    if mu is not None and not pi.marginal_matches(mu):
        raise MarginalError("the coupling's first marginal differs from mu")
    mu = mu if mu is not None else pi1
    snap = _as_function(phi).at(t, mu)
    nu = pi.second_marginal()
    x, a, w = pi.states[u_index], pi.actions[u_index], pi.weights[u_index]
    return float(w @ _integrand(coeffs, snap, u_index, x, a, mu, nu))


@dataclass(frozen=True, eq=False)
class ActionGrid:
    """Finite search set for the infimum over actions, with its resolution."""

    points: np.ndarray
    resolution: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[0] == 0:
            raise ValueError("empty action grid")
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, space: ActionSpace, n_per_axis: int) -> "ActionGrid":
        if not space.bounded or n_per_axis < 2:
            raise ValueError("need a bounded action space and at least two points per axis")
        axes = [np.linspace(lo, hi, n_per_axis) for lo, hi in zip(space.lower, space.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        res = float(np.max((space.upper - space.lower) / (n_per_axis - 1)))
        return cls(np.stack([m.ravel() for m in mesh], axis=1), res)

    @classmethod
    def from_resolution(cls, space: ActionSpace, resolution: float) -> "ActionGrid":
        n = int(np.ceil(np.max(space.upper - space.lower) / resolution)) + 1
        return cls.uniform(space, n)

    def refined(self, factor: int) -> "ActionGrid":
        """Nested refinement of a uniform tensor grid (contains every current point)."""
        axes = [np.unique(self.points[:, i]) for i in range(self.points.shape[1])]
        new_axes = [np.linspace(ax[0], ax[-1], (ax.size - 1) * factor + 1) if ax.size > 1 else ax for ax in axes]
        mesh = np.meshgrid(*new_axes, indexing="ij")
        return ActionGrid(np.stack([m.ravel() for m in mesh], axis=1), self.resolution / factor)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class BellmanResidual:
    residual: float
    dt: float
    infimum: float
    grid_resolution: float
    minimizers: list = field(default_factory=list)
    mode: str = "pointwise"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["minimizers"] = [np.asarray(m).tolist() for m in self.minimizers]
        return d


def _pointwise_minimum(coeffs, snap, mu, grid: ActionGrid, chunk: int = 2_000_000):
    total, minimizers = 0.0, []
    pts = grid.points
    m = pts.shape[0]
    for k, meas in enumerate(mu.measures):
        x = meas.atoms
        best = np.full(x.shape[0], np.inf)
        arg = np.zeros(x.shape[0], dtype=int)
        per = max(1, chunk // max(m, 1))
        for start in range(0, x.shape[0], per):
            xs = x[start:start + per]
            xx = np.repeat(xs, m, axis=0)
            aa = np.tile(pts, (xs.shape[0], 1))
            vals = _integrand(coeffs, snap, k, xx, aa, mu, None).reshape(xs.shape[0], m)
            arg[start:start + per] = np.argmin(vals, axis=1)
            best[start:start + per] = vals[np.arange(xs.shape[0]), arg[start:start + per]]
        total += mu.grid.weights[k] * (meas.weights @ best)
        minimizers.append(pts[arg])
    return float(total), minimizers


def _joint_minimum(coeffs, snap, mu, grid: ActionGrid, budget: int):
    sizes = [m.size for m in mu.measures]
    n_atoms = sum(sizes)
    n_combos = len(grid) ** n_atoms
    if n_combos > budget:
        raise BudgetExceededError(f"joint assignment search needs {n_combos} combinations (budget {budget})")
    best, best_assign = np.inf, None
    splits = np.cumsum(sizes)[:-1]
    for combo in itertools.product(range(len(grid)), repeat=n_atoms):
        per_label = np.split(grid.points[list(combo)], splits)
        nu = MeasureCollection(mu.grid, tuple(EmpiricalMeasure(a, m.weights) for a, m in zip(per_label, mu.measures)))
        total = 0.0
        for k, (meas, a) in enumerate(zip(mu.measures, per_label)):
            total += mu.grid.weights[k] * (meas.weights @ _integrand(coeffs, snap, k, meas.atoms, a, mu, nu))
        if total < best:
            best, best_assign = total, per_label
    return float(best), best_assign


def bellman_residual(coeffs: CoefficientSet, phi, t: float, mu: MeasureCollection, search: ActionGrid, *,
                     joint_budget: int = 100_000) -> BellmanResidual:
    """``-d_t phi(t, mu) - inf_{pi: pi_1 = mu} sum_k lambda_k H(k, t, pi, phi)`` over feedback assignments.

    Action-law independent models minimize atom by atom over the grid; other
    models enumerate joint assignments of grid actions to all atoms.
    """
    snap = _as_function(phi).at(t, mu)
    if coeffs.nu_independent:
        inf, minimizers = _pointwise_minimum(coeffs, snap, mu, search)
        mode = "pointwise"
    else:
        inf, minimizers = _joint_minimum(coeffs, snap, mu, search, joint_budget)
        mode = "joint"
    return BellmanResidual(float(-snap.dt - inf), float(snap.dt), inf, search.resolution, minimizers, mode)


def terminal_residual(coeffs: CoefficientSet, phi, mu: MeasureCollection, T: float) -> float:
    """``phi(T, mu) - sum_k lambda_k int g(k, x, mu) mu^k(dx)``."""
    g = sum(mu.grid.weights[k] * m.expect(coeffs.terminal_cost(k, m.atoms, mu)) for k, m in enumerate(mu.measures))
    return float(_as_function(phi).evaluate(T, mu) - g)


# --------------------------------------------------------------------------
# dynamic programming


@dataclass
class DPPReport:
    lhs: float
    rhs: float
    gap: float
    stderr: float
    lhs_stderr: float
    rhs_stderr: float
    best_full: tuple
    best_nested: tuple
    n_simulations: int
    continuation: str

    def to_dict(self) -> dict:
        return asdict(self)


def dpp_check(coeffs: CoefficientSet, t: float, init: ParticleEnsemble, theta: float, T: float,
              control_grid: Sequence[Policy], steps: int, seed: int, *, budget: int = 100,
              continuation: str = "common", continuation_seed: Optional[int] = None) -> DPPReport:
    """Full-horizon minimum versus the nested minimum through time ``theta``.

    Controls are pairs from ``control_grid`` played on ``[t, theta)`` and
    ``[theta, T]``.  The nested side minimizes the running cost up to
    ``theta`` plus the best continuation cost restarted from the time-theta
    ensemble.  ``continuation="common"`` continues the same noise streams
    (flow property); ``"fresh"`` restarts with independent noise, so the
    continuation depends on the time-theta ensemble only through its
    particles' states.
    """
    if not t < theta < T:
        raise ValueError("need t < theta < T")
    if continuation not in ("common", "fresh"):
        raise ValueError("continuation must be 'common' or 'fresh'")
    m = len(control_grid)
    if m == 0:
        raise ValueError("empty control grid")
    if m * m > budget:
        raise BudgetExceededError(f"{m * m} full-horizon combinations exceed the budget {budget}")
    dt = (T - t) / steps
    n1 = int(round((theta - t) / dt))
    if n1 < 1 or n1 >= steps or abs(t + n1 * dt - theta) > 1e-9 * max(1.0, abs(T)):
        raise ValueError("theta must lie strictly inside the time grid")
    grid = init.grid
    cont_seed = seed if continuation == "common" else (continuation_seed if continuation_seed is not None
                                                         else seed + 7919)
    cont_offset = n1 if continuation == "common" else 0

    full = {}
    for i, j in itertools.product(range(m), repeat=2):
        res = simulate(coeffs, SwitchingPolicy(theta, control_grid[i], control_grid[j]), init, t, T, steps, seed)
        full[(i, j)] = res.cost_samples
    nested = {}
    for i in range(m):
        head = simulate(coeffs, control_grid[i], init, t, theta, n1, seed)
        # the continuation keeps accumulating on top of the head's running cost
        tails = [simulate(coeffs, control_grid[j], head.final, theta, T, steps - n1, cont_seed,
                          step_offset=cont_offset, running0=head.running).cost_samples for j in range(m)]
        tail_means = [float(grid.weights @ s.mean(axis=1)) for s in tails]
        j_best = int(np.argmin(tail_means))
        nested[i] = (j_best, tails[j_best])

    full_means = {key: cost_from_samples(grid, s) for key, s in full.items()}
    best_full = min(full_means, key=lambda key: full_means[key][0])
    nested_means = {i: cost_from_samples(grid, s) for i, (_, s) in nested.items()}
    i_best = min(nested_means, key=lambda i: nested_means[i][0])
    lhs, lhs_se = full_means[best_full]
    rhs, rhs_se = nested_means[i_best]
    return DPPReport(lhs, rhs, lhs - rhs, float(np.hypot(lhs_se, rhs_se)), lhs_se, rhs_se, best_full,
                     (i_best, nested[i_best][0]), m * m + m + m * m, continuation)


# --------------------------------------------------------------------------
# verification


@dataclass
class VerificationReport:
    phi_value: float
    cost: float
    stderr: float
    gap: float
    tolerance: float
    within_tolerance: bool
    bellman_residuals: list
    residual_times: list
    terminal_residual: float

    def to_dict(self) -> dict:
        return asdict(self)


def verify_policy(coeffs: CoefficientSet, phi, feedback: Policy, init: ParticleEnsemble, t0: float, T: float,
                  steps: int, seed: int, *, action_grid: Optional[ActionGrid] = None, n_residual_times: int = 3,
                  residual_thin: int = 1, rel_tol: float = 0.01, n_se: float = 3.0) -> VerificationReport:
    """Simulate the feedback and compare its cost with ``phi(t0, mu0)``.

    Bellman residuals are evaluated on the realized flow at ``n_residual_times``
    interior grid times (snapshots thinned to every ``residual_thin``-th
    particle), the terminal residual at the final snapshot.
    """
    if not feedback.markov:
        raise ValueError("verification needs a Markov feedback")
    mu0 = init.measure
    phi_value = _as_function(phi).evaluate(t0, mu0)
    res = simulate(coeffs, feedback, init, t0, T, steps, seed)
    J, se = cost_from_samples(init.grid, res.cost_samples)
    tol = max(rel_tol * abs(phi_value), n_se * se)
    residuals, times = [], []
    if action_grid is not None and n_residual_times > 0:
        idx = np.unique(np.linspace(0, len(res.flow) - 2, n_residual_times).round().astype(int))
        for j in idx:
            atoms = res.flow.paths[j][:, ::residual_thin]
            mu_j = MeasureCollection.from_array(init.grid, atoms)
            residuals.append(bellman_residual(coeffs, phi, float(res.flow.times[j]), mu_j, action_grid).residual)
            times.append(float(res.flow.times[j]))
    term = terminal_residual(coeffs, phi, res.flow.snapshot(len(res.flow) - 1), T)
    return VerificationReport(float(phi_value), J, se, float(J - phi_value), float(tol), bool(abs(J - phi_value) <= tol),
                              residuals, times, term)
