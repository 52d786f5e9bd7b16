"""Controlled particle dynamics with interaction through empirical laws.

Coefficient callables use a vectorized convention.  For label index ``k``,
states ``x`` of shape ``(n, d)`` and actions ``a`` of shape ``(n, q)``:

* ``drift(k, x, a, mu, nu)``       -> ``(n, d)``
* ``volatility(k, x, a, mu, nu)``  -> ``(n, d, l)``
* ``running_cost(k, x, a, mu, nu)`` -> ``(n,)``
* ``terminal_cost(k, x, mu)``       -> ``(n,)``

``mu`` is the state :class:`~graphon_mfc.measure_space.MeasureCollection` and
``nu`` the collection of action laws (``None`` is passed where a model is
declared independent of action laws and no laws are available).
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import rng
from .measure_space import LabelGrid, MeasureCollection, MeasureFlow, _sample_points

BLOW_UP = 1e9

ActionLawCollection = MeasureCollection


class SimulationError(RuntimeError):
    """Numerical failure during a simulation (blow-up, non-finite state)."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class ActionSpaceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ActionSpace:
    """Box ``[lower, upper]`` in R^q with a designated origin."""

    lower: np.ndarray
    upper: np.ndarray
    origin: Optional[np.ndarray] = None

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape or np.any(lower > upper):
            raise ValueError("invalid action box")
        origin = np.zeros_like(lower) if self.origin is None else np.atleast_1d(np.asarray(self.origin, float))
        if np.any(origin < lower) or np.any(origin > upper):
            raise ValueError("origin must lie in the action box")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def box(cls, bound: float, dim: int = 1) -> "ActionSpace":
        return cls(np.full(dim, -bound), np.full(dim, bound))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    @property
    def radius(self) -> float:
        """Largest distance from the origin to a point of the box."""
        far = np.maximum(np.abs(self.upper - self.origin), np.abs(self.lower - self.origin))
        return float(np.linalg.norm(far))

    def contains(self, a: np.ndarray, tol: float = 1e-12) -> bool:
        return bool(np.all(a >= self.lower - tol) and np.all(a <= self.upper + tol))

    def grid(self, resolution: float) -> np.ndarray:
        """Uniform tensor grid of spacing at most ``resolution``, shape ``(n, q)``."""
        if not self.bounded:
            raise ValueError("cannot grid an unbounded action space")
        axes = []
        for lo, hi in zip(self.lower, self.upper):
            n = max(int(np.ceil((hi - lo) / resolution)), 1) + 1
            axes.append(np.linspace(lo, hi, n))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Model coefficients together with their declared structural constants.

    ``L`` and ``M`` are the Lipschitz and linear-growth constants of the
    drift and volatility, ``M_strong`` (when not ``None``) the constant of the
    action-free growth bound, ``K`` and ``gammas`` the local Hoelder data of
    the costs and ``M_cost`` their quadratic growth constant.
    """

    drift: Callable
    volatility: Callable
    running_cost: Callable
    terminal_cost: Callable
    dim: int
    noise_dim: int
    action_space: ActionSpace
    L: float = 0.0
    M: float = 0.0
    M_strong: Optional[float] = None
    K: float = 0.0
    gammas: tuple = (1.0, 1.0, 1.0, 1.0)
    M_cost: float = 0.0
    nu_independent: bool = True
    grid: Optional[LabelGrid] = None
    graphon: object = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("L", "M", "K", "M_cost"):
            if getattr(self, name) < 0:
                raise ValueError(f"declared constant {name} must be nonnegative")
        if self.M_strong is not None and self.M_strong < 0:
            raise ValueError("M_strong must be nonnegative")
        if len(self.gammas) != 4 or any(not 0 < g <= 1 for g in self.gammas):
            raise ValueError("Hoelder exponents must lie in (0, 1]")

    @property
    def strengthened_growth(self) -> bool:
        return self.M_strong is not None

    @property
    def action_dim(self) -> int:
        return self.action_space.dim

    def replace(self, **changes) -> "CoefficientSet":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# policies


class Policy:
    """Base class: ``actions`` returns the ``(n, q)`` actions of one label."""

    markov = True
    state_dependent = True

    def actions(self, k: int, t: float, step: int, x: np.ndarray, mu: MeasureCollection,
                marks: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class FeedbackPolicy(Policy):
    """Markov feedback ``a(k, t, x, mu)``."""

    def __init__(self, fn: Callable, name: str = "feedback"):
        self.fn = fn
        self.name = name

    def actions(self, k, t, step, x, mu, marks):
        return np.asarray(self.fn(k, t, x, mu), dtype=float).reshape(x.shape[0], -1)


class ConstantPolicy(FeedbackPolicy):
    def __init__(self, value):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        self.value = value
        self.state_dependent = False
        super().__init__(lambda k, t, x, mu: np.broadcast_to(value, (x.shape[0], value.size)),
                         name=f"constant{value.tolist()}")


class OpenLoopTable(Policy):
    """Tabulated open-loop actions driven by each particle's uniform mark.

    ``values`` has shape ``(K, S, m)`` or ``(K, S, m, q)``; a particle with
    mark ``z`` at global step ``s`` plays ``values[k, min(s, S-1), floor(m z)]``.
    """

    markov = False
    state_dependent = False

    def __init__(self, values):
        values = np.asarray(values, dtype=float)
        if values.ndim == 3:
            values = values[..., None]
        if values.ndim != 4:
            raise ValueError("table must have shape (K, S, m) or (K, S, m, q)")
        self.values = values

    def actions(self, k, t, step, x, mu, marks):
        s = min(step, self.values.shape[1] - 1)
        m = self.values.shape[2]
        idx = np.minimum((marks * m).astype(int), m - 1)
        return self.values[k, s, idx]

    def square_integral(self, grid: LabelGrid, dt: float, origin) -> float:
        """``sum_k lambda_k sum_s dt E|a - origin|^2`` over the table's steps."""
        sq = np.sum((self.values - np.asarray(origin)) ** 2, axis=-1).mean(axis=2)
        return float(grid.weights @ sq.sum(axis=1) * dt)


class SwitchingPolicy(Policy):
    """Play ``before`` on ``[t, switch_time)`` and ``after`` from ``switch_time`` on."""

    def __init__(self, switch_time: float, before: Policy, after: Policy):
        self.switch_time = float(switch_time)
        self.before = before
        self.after = after
        self.markov = before.markov and after.markov
        self.state_dependent = before.state_dependent or after.state_dependent

    def actions(self, k, t, step, x, mu, marks):
        tol = 1e-9 * max(1.0, abs(self.switch_time))
        chosen = self.before if t < self.switch_time - tol else self.after
        return chosen.actions(k, t, step, x, mu, marks)


# --------------------------------------------------------------------------
# particles


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """``N`` particles per label with uniform marks and noise-stream ids.

    ``positions`` has shape ``(K, N, d)``; ``marks`` holds the uniform
    variable attached to each particle and ``stream_ids`` the index of its
    Brownian stream within the label.
    """

    grid: LabelGrid
    positions: np.ndarray
    marks: np.ndarray
    stream_ids: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim == 2:
            pos = pos[..., None]
        if pos.ndim != 3 or pos.shape[0] != len(self.grid):
            raise ValueError("positions must have shape (K, N, d)")
        marks = np.asarray(self.marks, dtype=float)
        ids = np.asarray(self.stream_ids, dtype=np.int64)
        if marks.shape != pos.shape[:2] or ids.shape != pos.shape[:2]:
            raise ValueError("marks and stream ids need shape (K, N)")
        for k in range(ids.shape[0]):
            if np.unique(ids[k]).size != ids.shape[1]:
                raise ValueError(f"stream ids repeat within label {k}")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "stream_ids", ids)

    @classmethod
    def from_quantile_map(cls, quantile_map: Callable, grid: LabelGrid, n_particles: int,
                          seed: int) -> "ParticleEnsemble":
        """Particles ``xi = j(u, Z)``; the marks ``Z`` are kept on the ensemble."""
        points, marks = _sample_points(quantile_map, grid, n_particles, seed)
        ids = np.broadcast_to(np.arange(n_particles), marks.shape).copy()
        return cls(grid, points, marks, ids)

    @classmethod
    def from_positions(cls, grid: LabelGrid, positions, seed: int = 0) -> "ParticleEnsemble":
        pos = np.asarray(positions, dtype=float)
        if pos.ndim == 2:
            pos = pos[..., None]
        n = pos.shape[1]
        ids = np.broadcast_to(np.arange(n), pos.shape[:2]).copy()
        marks = np.stack([rng.open_uniforms(seed, rng.UNIFORM_MARK, k, ids[k]) for k in range(len(grid))])
        return cls(grid, pos, marks, ids)

    @property
    def n_particles(self) -> int:
        return self.positions.shape[1]

    @property
    def dim(self) -> int:
        return self.positions.shape[2]

    @property
    def measure(self) -> MeasureCollection:
        return MeasureCollection.from_array(self.grid, self.positions)

    def with_positions(self, positions) -> "ParticleEnsemble":
        return ParticleEnsemble(self.grid, positions, self.marks, self.stream_ids)

    def permuted(self, perms) -> "ParticleEnsemble":
        """Reorder particles label by label, carrying marks and streams along."""
        perms = np.asarray(perms)
        rows = np.arange(len(self.grid))[:, None]
        return ParticleEnsemble(self.grid, self.positions[rows, perms], self.marks[rows, perms],
                                self.stream_ids[rows, perms])

    def second_moment(self) -> float:
        """``sum_k lambda_k E|xi^k|^2``."""
        return float(self.grid.weights @ np.mean(np.sum(self.positions**2, axis=-1), axis=1))


# --------------------------------------------------------------------------
# simulation


@dataclass(eq=False)
class SimulationResult:
    flow: MeasureFlow
    actions: np.ndarray
    running: np.ndarray
    terminal: np.ndarray
    final: ParticleEnsemble
    dt: float
    seed: int
    step_offset: int
    record_every: int
    diagnostics: dict
    increments: Optional[np.ndarray] = None

    @property
    def cost_samples(self) -> np.ndarray:
        return self.running + self.terminal

    @property
    def cost_estimate(self) -> float:
        return cost_from_samples(self.flow.grid, self.cost_samples)[0]

    @property
    def std_error(self) -> float:
        return cost_from_samples(self.flow.grid, self.cost_samples)[1]

    def action_law(self, j: int) -> ActionLawCollection:
        return MeasureCollection.from_array(self.flow.grid, self.actions[j])


def cost_from_samples(grid: LabelGrid, samples: np.ndarray) -> tuple[float, float]:
    """lambda-quadrature of per-label particle averages and its standard error.

    The error treats particles as independent; with interaction through the
    empirical laws it understates the spread across independent runs.
    """
    n = samples.shape[1]
    estimate = float(grid.weights @ samples.mean(axis=1))
    if n < 2:
        return estimate, 0.0
    var = samples.var(axis=1, ddof=1)
    return estimate, float(np.sqrt(np.sum(grid.weights**2 * var) / n))


def brownian_increments(stream_ids: np.ndarray, noise_dim: int, steps: int, dt: float, seed: int,
                        step_offset: int = 0) -> np.ndarray:
    """Increments ``dW`` of shape ``(steps, K, N, l)`` from the counter-based streams."""
    n_labels = stream_ids.shape[0]
    out = np.empty((steps, n_labels, stream_ids.shape[1], noise_dim))
    for s in range(steps):
        for k in range(n_labels):
            out[s, k] = rng.normal_block(seed, k, step_offset + s, stream_ids[k], noise_dim)
    return out * np.sqrt(dt)


def coarsen_increments(increments: np.ndarray, factor: int) -> np.ndarray:
    """Sum blocks of ``factor`` consecutive increments (same Brownian path, coarser grid)."""
    steps = increments.shape[0]
    if steps % factor:
        raise ValueError("factor must divide the number of steps")
    return increments.reshape((steps // factor, factor) + increments.shape[1:]).sum(axis=1)


def _time(t0: float, T: float, steps: int, s: int) -> float:
    return t0 + (T - t0) * s / steps


def simulate(coeffs: CoefficientSet, policy: Policy, init: ParticleEnsemble, t0: float, T: float, steps: int,
             seed: int, *, record_every: int = 1, step_offset: int = 0, increments: Optional[np.ndarray] = None,
             frozen_flow: Optional[MeasureFlow] = None, store_noise: bool = False,
             running0: Optional[np.ndarray] = None, threads: int = 1) -> SimulationResult:
    """Euler-Maruyama for the particle system with empirical-law interaction.

    The measure arguments at step ``s`` are the empirical collections of the
    current states and actions, unless ``frozen_flow`` is given, in which case
    its snapshot ``s`` replaces the state law (decoupled system).  Brownian
    increments come from streams keyed on ``(seed, label, step_offset + s)``
    and each particle's stream id, or from ``increments`` when supplied.
    ``running0`` seeds the per-particle running-cost accumulator, so a run
    continued from an earlier one reproduces its cost sums exactly.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if not T > t0:
        raise ValueError("need T > t0")
    if record_every < 1 or steps % record_every:
        raise ValueError("record_every must divide steps")
    if init.dim != coeffs.dim:
        raise ValueError(f"ensemble dimension {init.dim} does not match model dimension {coeffs.dim}")
    if coeffs.grid is not None and not coeffs.grid.same_as(init.grid):
        raise ValueError("ensemble and model use different label grids")
    if increments is not None and increments.shape[:3] != (steps,) + init.positions.shape[:2]:
        raise ValueError("increments must have shape (steps, K, N, l)")
    if frozen_flow is not None:
        if len(frozen_flow) != steps + 1:
            raise ValueError("frozen flow must have one snapshot per simulation time")
        expected = np.array([_time(t0, T, steps, s) for s in range(steps + 1)])
        if not np.allclose(frozen_flow.times, expected, rtol=0, atol=1e-9 * max(1.0, abs(T))):
            raise ValueError("frozen flow time grid does not match the simulation grid")

    grid = init.grid
    n_labels, n, d = init.positions.shape
    ell, q = coeffs.noise_dim, coeffs.action_dim
    dt = (T - t0) / steps
    sqrt_dt = np.sqrt(dt)
    n_rec = steps // record_every + 1
    paths = np.empty((n_rec, n_labels, n, d))
    actions_rec = np.empty((n_rec, n_labels, n, q))
    if running0 is not None and np.shape(running0) != (n_labels, n):
        raise ValueError("running0 must have shape (K, N)")
    running = np.zeros((n_labels, n)) if running0 is None else np.array(running0, dtype=float)
    noise = np.empty((steps, n_labels, n, ell)) if store_noise else None
    x = init.positions.copy()
    action_energy = 0.0
    max_abs = float(np.max(np.abs(x)))
    pool = ThreadPoolExecutor(threads) if threads > 1 else None

    def label_map(fn):
        if pool is None:
            return [fn(k) for k in range(n_labels)]
        return list(pool.map(fn, range(n_labels)))

    try:
        for s in range(steps + 1):
            t = _time(t0, T, steps, s)
            gstep = step_offset + s
            if frozen_flow is not None:
                mu_arg = frozen_flow.snapshot(s)
            else:
                mu_arg = MeasureCollection.from_array(grid, x)
            a = np.stack(label_map(lambda k: policy.actions(k, t, gstep, x[k], mu_arg, init.marks[k])))
            if a.shape != (n_labels, n, q):
                raise ActionSpaceError(f"policy returned actions of shape {a.shape}, expected {(n_labels, n, q)}")
            if not coeffs.action_space.contains(a):
                raise ActionSpaceError(f"policy action outside the action space at step {s}")
            nu = MeasureCollection.from_array(grid, a)
            if s % record_every == 0:
                paths[s // record_every] = x
                actions_rec[s // record_every] = a
            if s == steps:
                break
            action_energy += dt * float(grid.weights @ np.mean(np.sum((a - coeffs.action_space.origin) ** 2, -1), 1))

            def advance(k):
                b = np.asarray(coeffs.drift(k, x[k], a[k], mu_arg, nu), dtype=float).reshape(n, d)
                sig = np.asarray(coeffs.volatility(k, x[k], a[k], mu_arg, nu), dtype=float).reshape(n, d, ell)
                f = np.asarray(coeffs.running_cost(k, x[k], a[k], mu_arg, nu), dtype=float).reshape(n)
                if increments is not None:
                    dw = increments[s, k]
                else:
                    dw = sqrt_dt * rng.normal_block(seed, k, gstep, init.stream_ids[k], ell)
                return b, sig, f, dw

            parts = label_map(advance)
            x_new = np.empty_like(x)
            for k, (b, sig, f, dw) in enumerate(parts):
                x_new[k] = x[k] + b * dt + np.einsum("nij,nj->ni", sig, dw)
                running[k] += f * dt
                if noise is not None:
                    noise[s, k] = dw
            x = x_new
            peak = float(np.max(np.abs(x))) if x.size else 0.0
            if not np.isfinite(peak) or peak > BLOW_UP:
                raise SimulationError(f"state blew up at step {s + 1}", step=s + 1)
            max_abs = max(max_abs, peak)
    finally:
        if pool is not None:
            pool.shutdown()

    mu_T = MeasureCollection.from_array(grid, x)
    terminal = np.stack([np.asarray(coeffs.terminal_cost(k, x[k], mu_T), dtype=float).reshape(n)
                         for k in range(n_labels)])
    times = np.array([_time(t0, T, steps, s) for s in range(0, steps + 1, record_every)])
    flow = MeasureFlow(grid, times, paths=paths)
    diagnostics = {"max_abs_state": max_abs, "steps": steps, "action_energy": action_energy}
    return SimulationResult(flow=flow, actions=actions_rec, running=running, terminal=terminal,
                            final=init.with_positions(x), dt=dt, seed=seed, step_offset=step_offset,
                            record_every=record_every, diagnostics=diagnostics, increments=noise)


def cost(coeffs: CoefficientSet, result: SimulationResult, include_terminal: bool = True) -> tuple[float, float]:
    """Estimate of the cost functional and its Monte Carlo standard error.

    Running costs use the left-endpoint rule on the simulation grid; the
    particle average and lambda-quadrature follow.
    """
    samples = result.running + result.terminal if include_terminal else result.running
    return cost_from_samples(result.flow.grid, samples)
