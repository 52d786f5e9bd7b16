"""Collections of probability measures indexed by a weighted label grid.

The label space ``(U, lambda)`` is replaced by a finite grid of labels with
positive weights.  A state of the lifted problem is a
:class:`MeasureCollection`: one weighted particle cloud per label.  Flows of
such collections are stored as :class:`MeasureFlow`, optionally keeping the
per-particle trajectories so that path-space quantities can be computed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.special import logsumexp

from . import rng

EXACT_TRANSPORT_CAP = 64


class GridMismatchError(ValueError):
    pass


class ZeroDegreeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabelGrid:
    """Finite weighted stand-in for the label measure space."""

    labels: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=float).reshape(-1)
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if labels.shape != weights.shape:
            raise ValueError("labels and weights must have the same length")
        if labels.size == 0:
            raise ValueError("a label grid needs at least one label")
        if not np.all(weights > 0) or not np.all(np.isfinite(weights)):
            raise ValueError("label weights must be finite and strictly positive")
        if np.unique(labels).size != labels.size:
            raise ValueError("labels must be distinct")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, n_labels: int, total_mass: float = 1.0) -> "LabelGrid":
        """Labels ``k/K`` for ``k = 1..K`` carrying equal weights."""
        labels = np.arange(1, n_labels + 1) / n_labels
        return cls(labels, np.full(n_labels, total_mass / n_labels))

    def __len__(self) -> int:
        return self.labels.size

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.weights))

    def same_as(self, other: "LabelGrid") -> bool:
        return self is other or (
            np.array_equal(self.labels, other.labels) and np.array_equal(self.weights, other.weights)
        )

    def to_dict(self) -> dict:
        return {"labels": self.labels.tolist(), "weights": self.weights.tolist()}


def _as_atoms(atoms) -> np.ndarray:
    atoms = np.asarray(atoms, dtype=float)
    if atoms.ndim == 0:
        atoms = atoms.reshape(1, 1)
    elif atoms.ndim == 1:
        atoms = atoms.reshape(-1, 1)
    return atoms


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Finitely supported probability measure on R^d.

    ``atoms`` has shape ``(n, d)``; ``weights`` default to ``1/n``.
    """

    atoms: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        atoms = _as_atoms(self.atoms)
        if atoms.shape[0] == 0:
            raise ValueError("empty measure")
        if not np.all(np.isfinite(atoms)):
            raise ValueError("atoms must be finite")
        if self.weights is None:
            weights = np.full(atoms.shape[0], 1.0 / atoms.shape[0])
        else:
            weights = np.asarray(self.weights, dtype=float).reshape(-1)
            if weights.shape[0] != atoms.shape[0]:
                raise ValueError("one weight per atom is required")
            if np.any(weights < 0):
                raise ValueError("atom weights must be nonnegative")
            if abs(weights.sum() - 1.0) > 1e-12:
                raise ValueError(f"atom weights sum to {weights.sum()!r}, not 1")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def dirac(cls, x) -> "EmpiricalMeasure":
        return cls(np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1))

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @cached_property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    @cached_property
    def mean(self) -> np.ndarray:
        return self.weights @ self.atoms

    @cached_property
    def second_moment(self) -> np.ndarray:
        """Componentwise raw second moment."""
        return self.weights @ self.atoms**2

    def expect(self, values: np.ndarray) -> float:
        """Integral of per-atom ``values`` against the measure."""
        return float(self.weights @ values)

    @staticmethod
    def mixture(measures: Sequence["EmpiricalMeasure"], coefficients) -> "EmpiricalMeasure":
        coefficients = np.asarray(coefficients, dtype=float)
        atoms = np.concatenate([m.atoms for m in measures], axis=0)
        weights = np.concatenate([c * m.weights for m, c in zip(measures, coefficients)])
        weights = weights / weights.sum()
        return EmpiricalMeasure(atoms, weights)


@dataclass(frozen=True, eq=False)
class MeasureCollection:
    """One empirical measure per label of ``grid``."""

    grid: LabelGrid
    measures: tuple

    def __post_init__(self):
        measures = tuple(self.measures)
        if len(measures) != len(self.grid):
            raise ValueError("need exactly one measure per label")
        dims = {m.dim for m in measures}
        if len(dims) != 1:
            raise ValueError("all per-label measures must share one dimension")
        object.__setattr__(self, "measures", measures)

    @classmethod
    def from_array(cls, grid: LabelGrid, points: np.ndarray, weights: Optional[np.ndarray] = None):
        """Build from an array of shape ``(K, N, d)`` (or ``(K, N)``)."""
        points = np.asarray(points, dtype=float)
        if points.ndim == 2:
            points = points[..., None]
        if weights is None:
            return cls(grid, tuple(EmpiricalMeasure(points[k]) for k in range(points.shape[0])))
        return cls(grid, tuple(EmpiricalMeasure(points[k], weights[k]) for k in range(points.shape[0])))

    @classmethod
    def dirac(cls, grid: LabelGrid, x) -> "MeasureCollection":
        """The collection ``delta_x`` at every label (``x`` may be per-label, shape ``(K, d)``)."""
        x = np.asarray(x, dtype=float)
        if x.ndim <= 1:
            x = np.broadcast_to(np.atleast_1d(x), (len(grid), np.atleast_1d(x).size))
        return cls(grid, tuple(EmpiricalMeasure.dirac(x[k]) for k in range(len(grid))))

    def __len__(self) -> int:
        return len(self.measures)

    def __getitem__(self, k: int) -> EmpiricalMeasure:
        return self.measures[k]

    @property
    def dim(self) -> int:
        return self.measures[0].dim

    @cached_property
    def means(self) -> np.ndarray:
        return np.stack([m.mean for m in self.measures])

    @cached_property
    def second_moments(self) -> np.ndarray:
        return np.stack([m.second_moment for m in self.measures])

    @cached_property
    def squared_norm(self) -> float:
        """``d(mu, delta_0)^2``: lambda-integral of per-label second moments."""
        return float(self.grid.weights @ self.second_moments.sum(axis=1))

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """Atoms and weights as ``(K, n, d)`` / ``(K, n)`` arrays when all clouds have equal size."""
        sizes = {m.size for m in self.measures}
        if len(sizes) != 1:
            raise ValueError("per-label clouds differ in size")
        return (np.stack([m.atoms for m in self.measures]), np.stack([m.weights for m in self.measures]))


@dataclass(frozen=True, eq=False)
class MeasureFlow:
    """Time-indexed collections, optionally backed by particle paths.

    With ``paths`` of shape ``(M+1, K, N, d)`` the flow is path-coupled and
    snapshot ``j`` is the time-``times[j]`` marginal of the stored
    trajectories.  Otherwise ``snapshots`` holds the collections directly.
    """

    grid: LabelGrid
    times: np.ndarray
    paths: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    snapshots: Optional[tuple] = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size == 0:
            raise ValueError("time grid must be a nonempty vector")
        if np.any(np.diff(times) <= 0):
            raise ValueError("time grid must be strictly increasing")
        object.__setattr__(self, "times", times)
        if self.paths is not None:
            paths = np.asarray(self.paths, dtype=float)
            if paths.ndim != 4 or paths.shape[0] != times.size or paths.shape[1] != len(self.grid):
                raise ValueError("paths must have shape (len(times), K, N, d)")
            object.__setattr__(self, "paths", paths)
            if self.weights is None:
                n = paths.shape[2]
                object.__setattr__(self, "weights", np.full(paths.shape[1:3], 1.0 / n))
        elif self.snapshots is not None:
            snaps = tuple(self.snapshots)
            if len(snaps) != times.size:
                raise ValueError("one snapshot per time is required")
            if any(not s.grid.same_as(self.grid) for s in snaps):
                raise GridMismatchError("snapshots must share the flow's label grid")
            object.__setattr__(self, "snapshots", snaps)
        else:
            raise ValueError("a flow needs either paths or snapshots")

    @property
    def path_coupled(self) -> bool:
        return self.paths is not None

    def __len__(self) -> int:
        return self.times.size

    def snapshot(self, j: int) -> MeasureCollection:
        if self.paths is not None:
            return MeasureCollection.from_array(self.grid, self.paths[j], self.weights)
        return self.snapshots[j]

    @classmethod
    def constant(cls, mu: MeasureCollection, times) -> "MeasureFlow":
        """Time-constant extension of ``mu`` (path-coupled, constant paths)."""
        atoms, weights = mu.stacked()
        times = np.asarray(times, dtype=float)
        paths = np.broadcast_to(atoms, (times.size,) + atoms.shape).copy()
        return cls(mu.grid, times, paths=paths, weights=weights)

    def shifted(self, offset) -> "MeasureFlow":
        """Translate every particle by ``offset`` (path-coupled flows only)."""
        if self.paths is None:
            raise ValueError("shift needs a path-coupled flow")
        return MeasureFlow(self.grid, self.times, paths=self.paths + np.asarray(offset, float), weights=self.weights)


@dataclass(frozen=True, eq=False)
class Graphon:
    """Interaction kernel evaluated on the label grid.

    ``matrix[i, j] = G(u_i, u_j)`` with values in [0, 1].
    """

    grid: LabelGrid
    matrix: np.ndarray
    row_degree: np.ndarray = field(init=False)

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=float)
        k = len(self.grid)
        if matrix.shape != (k, k):
            raise ValueError(f"graphon matrix must be {k}x{k}")
        if np.any(matrix < 0) or np.any(matrix > 1):
            raise ValueError("graphon values must lie in [0, 1]")
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "row_degree", matrix @ self.grid.weights)

    @classmethod
    def from_kernel(cls, kernel: Callable[[float, float], float], grid: LabelGrid) -> "Graphon":
        u = grid.labels
        return cls(grid, np.array([[kernel(a, b) for b in u] for a in u], dtype=float))

    @classmethod
    def constant(cls, grid: LabelGrid, value: float = 1.0) -> "Graphon":
        return cls(grid, np.full((len(grid), len(grid)), value))

    @classmethod
    def identity(cls, grid: LabelGrid) -> "Graphon":
        return cls(grid, np.eye(len(grid)))

    @cached_property
    def mixing(self) -> np.ndarray:
        """Row-stochastic matrix ``G(u,v) lambda_v / ||G(u,.)||_1``."""
        if np.any(self.row_degree <= 0):
            raise ZeroDegreeError("graphon has a row of zero degree")
        return self.matrix * self.grid.weights[None, :] / self.row_degree[:, None]

    @cached_property
    def lipschitz_factor(self) -> float:
        """Bound on ``|m_G(u, mu) - m_G(u, mu')| / d(mu, mu')`` over all labels."""
        if np.any(self.row_degree <= 0):
            raise ZeroDegreeError("graphon has a row of zero degree")
        norms = np.sqrt((self.matrix**2) @ self.grid.weights) / self.row_degree
        return float(norms.max())

    def neighborhood_means(self, mu: MeasureCollection) -> np.ndarray:
        """Means of the neighborhood mixtures for every label, shape ``(K, d)``."""
        return self.mixing @ mu.means


def _w2_squared_1d(a: EmpiricalMeasure, b: EmpiricalMeasure) -> float:
    xa, xb = a.atoms[:, 0], b.atoms[:, 0]
    if a.is_uniform and b.is_uniform and a.size == b.size:
        diff = np.sort(xa) - np.sort(xb)
        return float(np.mean(diff**2))
    ia, ib = np.argsort(xa, kind="stable"), np.argsort(xb, kind="stable")
    xa, wa = xa[ia], a.weights[ia]
    xb, wb = xb[ib], b.weights[ib]
    ca, cb = np.cumsum(wa), np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    breaks = np.union1d(ca, cb)
    lengths = np.diff(np.concatenate([[0.0], breaks]))
    mids = breaks - 0.5 * lengths
    qa = xa[np.minimum(np.searchsorted(ca, mids), xa.size - 1)]
    qb = xb[np.minimum(np.searchsorted(cb, mids), xb.size - 1)]
    return float(np.sum(lengths * (qa - qb) ** 2))


def _cost_matrix(a: EmpiricalMeasure, b: EmpiricalMeasure) -> np.ndarray:
    diff = a.atoms[:, None, :] - b.atoms[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def transport_lp(cost: np.ndarray, wa: np.ndarray, wb: np.ndarray) -> float:
    """Exact discrete optimal transport cost by the dual simplex method."""
    n, m = cost.shape
    rows = np.zeros((n, n * m))
    for i in range(n):
        rows[i, i * m:(i + 1) * m] = 1.0
    cols = np.zeros((m, n * m))
    for j in range(m):
        cols[j, j::m] = 1.0
    res = linprog(
        cost.ravel(),
        A_eq=np.vstack([rows, cols])[:-1],
        b_eq=np.concatenate([wa, wb])[:-1],
        bounds=(0, None),
        method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(np.clip(res.x, 0, None) @ cost.ravel())


def sinkhorn_cost(cost: np.ndarray, wa: np.ndarray, wb: np.ndarray, eps: float,
                  max_iter: int = 5000, tol: float = 1e-10) -> tuple[float, float]:
    """Transport cost of the entropic plan (log-domain Sinkhorn).

    Returns ``(cost, bound)`` where ``bound = eps * log(n m)`` limits the gap
    to the unregularized optimum.
    """
    log_a, log_b = np.log(wa), np.log(wb)
    f = np.zeros_like(wa)
    g = np.zeros_like(wb)
    for _ in range(max_iter):
        f = eps * (log_a - logsumexp((g[None, :] - cost) / eps, axis=1))
        g_new = eps * (log_b - logsumexp((f[:, None] - cost) / eps, axis=0))
        if np.max(np.abs(g_new - g)) < tol * max(1.0, eps):
            g = g_new
            break
        g = g_new
    plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
    return float(np.sum(plan * cost)), eps * float(np.log(cost.size))


def wasserstein2(a: EmpiricalMeasure, b: EmpiricalMeasure, *, exact_transport_cap: int = EXACT_TRANSPORT_CAP,
                 return_bound: bool = False):
    """2-Wasserstein distance between two empirical measures.

    In dimension one the quantile coupling is exact.  In higher dimension the
    transport LP is solved exactly while both clouds have at most
    ``exact_transport_cap`` atoms; beyond that an entropic plan with
    ``eps = 1e-3 * max cost`` is used and, with ``return_bound=True``, the
    additive error bound on the squared distance is returned as well.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    # canonical argument order makes the result exactly symmetric
    if (b.size, b.atoms.tobytes(), b.weights.tobytes()) < (a.size, a.atoms.tobytes(), a.weights.tobytes()):
        a, b = b, a
    bound = 0.0
    if a.dim == 1:
        sq = _w2_squared_1d(a, b)
    else:
        cost = _cost_matrix(a, b)
        if max(a.size, b.size) <= exact_transport_cap:
            sq = transport_lp(cost, a.weights, b.weights)
        else:
            scale = float(cost.max()) or 1.0
            sq, bound = sinkhorn_cost(cost, a.weights, b.weights, 1e-3 * scale)
    value = float(np.sqrt(max(sq, 0.0)))
    return (value, bound) if return_bound else value


def collection_distance(mu: MeasureCollection, nu: MeasureCollection) -> float:
    """``d(mu, nu) = (sum_k lambda_k W2(mu^k, nu^k)^2)^(1/2)``."""
    if not mu.grid.same_as(nu.grid):
        raise GridMismatchError("collections live on different label grids")
    sq = np.array([wasserstein2(a, b) ** 2 for a, b in zip(mu.measures, nu.measures)])
    return float(np.sqrt(mu.grid.weights @ sq))


def path_distance(flow_a: MeasureFlow, flow_b: MeasureFlow) -> float:
    """Sup-norm path distance under the coupling given by shared particle indices.

    This is an upper bound on the path-space collection distance.
    """
    if not flow_a.grid.same_as(flow_b.grid):
        raise GridMismatchError("flows live on different label grids")
    if not (flow_a.path_coupled and flow_b.path_coupled):
        raise ValueError("both flows must be path-coupled")
    if flow_a.paths.shape != flow_b.paths.shape or not np.array_equal(flow_a.times, flow_b.times):
        raise ValueError("flows must share time grid and particle layout")
    if not np.array_equal(flow_a.weights, flow_b.weights):
        raise ValueError("flows must share particle weights")
    diff = flow_a.paths - flow_b.paths
    sup_sq = np.max(np.sum(diff**2, axis=-1), axis=0)  # (K, N)
    per_label = np.sum(flow_a.weights * sup_sq, axis=1)
    return float(np.sqrt(flow_a.grid.weights @ per_label))


def marginal_flow_distance(flow_a: MeasureFlow, flow_b: MeasureFlow) -> float:
    """Largest collection distance between time marginals on a shared time grid."""
    if not np.allclose(flow_a.times, flow_b.times, rtol=0, atol=1e-12):
        raise ValueError("flows must share a time grid")
    return max(collection_distance(flow_a.snapshot(j), flow_b.snapshot(j)) for j in range(len(flow_a)))


def graphon_neighborhood(graphon: Graphon, mu: MeasureCollection, u_index: int, *,
                         zero_degree: str = "error") -> EmpiricalMeasure:
    """The mixture ``sum_v G(u,v) lambda_v mu^v / ||G(u,.)||_1`` as one cloud.

    ``zero_degree="dirac"`` returns ``delta_0`` for isolated labels instead of
    raising :class:`ZeroDegreeError`.
    """
    if not graphon.grid.same_as(mu.grid):
        raise GridMismatchError("graphon and collection use different grids")
    degree = graphon.row_degree[u_index]
    if degree <= 0:
        if zero_degree == "dirac":
            return EmpiricalMeasure.dirac(np.zeros(mu.dim))
        raise ZeroDegreeError(f"label {u_index} has zero interaction degree")
    coeff = graphon.matrix[u_index] * mu.grid.weights / degree
    keep = np.flatnonzero(coeff > 0)
    return EmpiricalMeasure.mixture([mu.measures[j] for j in keep], coeff[keep])


def sample_initial(quantile_map: Callable, grid: LabelGrid, particles_per_label: int, seed: int) -> MeasureCollection:
    """Per-label clouds ``j(u_k, Z)`` with ``Z`` from label-specific uniform streams."""
    points, _ = _sample_points(quantile_map, grid, particles_per_label, seed)
    return MeasureCollection.from_array(grid, points)


def _sample_points(quantile_map, grid, n, seed):
    if n < 1:
        raise ValueError("particles_per_label must be at least 1")
    ids = np.arange(n)
    marks = np.stack([rng.open_uniforms(seed, rng.UNIFORM_MARK, k, ids) for k in range(len(grid))])
    out = []
    for k, u in enumerate(grid.labels):
        # maps return a scalar, shape (n,) for d = 1, or shape (n, d)
        x = np.asarray(quantile_map(u, marks[k]), dtype=float)
        if x.ndim == 0:
            x = np.full((n, 1), float(x))
        elif x.ndim == 1:
            x = x.reshape(n, 1)
        if not np.all(np.isfinite(x)):
            raise ValueError(f"quantile map returned non-finite values at label {u}")
        out.append(np.array(x))
    return np.stack(out), marks


@dataclass(frozen=True)
class Moments:
    per_label: np.ndarray
    aggregate: np.ndarray


def moments(mu: MeasureCollection, order: int) -> Moments:
    """Per-label mean (``order=1``) or componentwise raw second moment (``order=2``).

    ``aggregate`` is the lambda-integral of the per-label values.
    """
    if order == 1:
        per_label = mu.means
    elif order == 2:
        per_label = mu.second_moments
    else:
        raise ValueError("order must be 1 or 2")
    return Moments(per_label, mu.grid.weights @ per_label)
