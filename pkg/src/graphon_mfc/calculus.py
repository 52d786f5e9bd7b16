"""Functions of measure collections with analytic linear functional derivatives.

A :class:`TestFunction` is evaluated through :meth:`TestFunction.at`, which
fixes ``(t, mu)`` once (caching the moments it needs) and returns a snapshot
exposing ``value``, ``dt`` and, at a label index ``k`` and points ``x`` of
shape ``(n, d)``, the flat derivative ``flat``, its x-gradient ``grad``
``(n, d)`` and x-Hessian ``hess`` ``(n, d, d)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import CoefficientSet, ParticleEnsemble, Policy, SimulationResult, coarsen_increments, simulate
from .measure_space import EmpiricalMeasure, MeasureCollection


# --------------------------------------------------------------------------
# component functions phi(k, x)


class Component:
    """Real function of ``(label index, x)`` with analytic x-derivatives."""

    def value(self, k: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, k: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hess(self, k: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def integrate(self, mu: MeasureCollection) -> np.ndarray:
        """Per-label integrals ``int phi(k, x) mu^k(dx)``, shape ``(K,)``."""
        return np.array([m.expect(self.value(k, m.atoms)) for k, m in enumerate(mu.measures)])


class Polynomial(Component):
    """``c0 + c1.x + x^T C2 x / 2``; each coefficient is shared or given per label.

    Shapes: ``c0`` scalar or ``(K,)``, ``c1`` ``(d,)`` or ``(K, d)``,
    ``c2`` ``(d, d)`` or ``(K, d, d)`` (symmetrized).
    """

    def __init__(self, c0=0.0, c1=None, c2=None, dim: int = 1):
        self.c0 = np.asarray(c0, dtype=float)
        self.c1 = np.zeros(dim) if c1 is None else np.asarray(c1, dtype=float)
        c2 = np.zeros((dim, dim)) if c2 is None else np.asarray(c2, dtype=float)
        self.c2 = 0.5 * (c2 + np.swapaxes(c2, -1, -2))
        self.dim = self.c1.shape[-1]
        if self.c2.shape[-1] != self.dim or self.c0.ndim > 1 or self.c1.ndim > 2 or self.c2.ndim > 3:
            raise ValueError("inconsistent polynomial coefficient shapes")

    @classmethod
    def coordinate(cls, i: int = 0, dim: int = 1, scale: float = 1.0) -> "Polynomial":
        c1 = np.zeros(dim)
        c1[i] = scale
        return cls(0.0, c1, None, dim)

    @classmethod
    def half_square(cls, dim: int = 1, scale: float = 1.0) -> "Polynomial":
        """``scale |x|^2 / 2``."""
        return cls(0.0, None, scale * np.eye(dim), dim)

    @classmethod
    def label_coordinate(cls, n_labels: int, j: int, scale: float = 1.0, i: int = 0, dim: int = 1) -> "Polynomial":
        """``scale x_i 1{k = j}``."""
        c1 = np.zeros((n_labels, dim))
        c1[j, i] = scale
        return cls(np.zeros(n_labels), c1, np.zeros((n_labels, dim, dim)), dim)

    def _coef(self, k):
        c0 = self.c0[k] if self.c0.ndim == 1 else self.c0
        c1 = self.c1[k] if self.c1.ndim == 2 else self.c1
        c2 = self.c2[k] if self.c2.ndim == 3 else self.c2
        return c0, c1, c2

    def value(self, k, x):
        c0, c1, c2 = self._coef(k)
        return c0 + x @ c1 + 0.5 * np.einsum("ni,ij,nj->n", x, c2, x)

    def grad(self, k, x):
        _, c1, c2 = self._coef(k)
        return c1 + x @ c2

    def hess(self, k, x):
        return np.broadcast_to(self._coef(k)[2], (x.shape[0], self.dim, self.dim))

    @property
    def degree(self) -> int:
        if np.any(self.c2):
            return 2
        return 1 if np.any(self.c1) else 0


class Bump(Component):
    """Gaussian bump ``amplitude exp(-|x - center|^2 / (2 width^2))`` (bounded with bounded derivatives)."""

    def __init__(self, center, width: float = 1.0, amplitude=1.0):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        if width <= 0:
            raise ValueError("width must be positive")
        self.width = float(width)
        self.amplitude = np.asarray(amplitude, dtype=float)
        self.dim = self.center.shape[-1]

    def _parts(self, k, x):
        center = self.center[k] if self.center.ndim == 2 else self.center
        amp = self.amplitude[k] if self.amplitude.ndim == 1 else self.amplitude
        z = x - center
        return z, amp * np.exp(-0.5 * np.sum(z**2, axis=1) / self.width**2)

    def value(self, k, x):
        return self._parts(k, x)[1]

    def grad(self, k, x):
        z, v = self._parts(k, x)
        return -v[:, None] * z / self.width**2

    def hess(self, k, x):
        z, v = self._parts(k, x)
        w2 = self.width**2
        outer = z[:, :, None] * z[:, None, :] / w2**2
        return v[:, None, None] * (outer - np.eye(self.dim)[None] / w2)


# --------------------------------------------------------------------------
# outer functions F(y, t, k)


class Outer:
    """Real function of ``y in R^m`` (and of time and label) with gradient and time derivative."""

    def value(self, y, t, k=None) -> float:
        raise NotImplementedError

    def grad(self, y, t, k=None) -> np.ndarray:
        raise NotImplementedError

    def dt(self, y, t, k=None) -> float:
        return 0.0

    affine = False


class QuadraticOuter(Outer):
    """``c + b.y + y^T A(t) y / 2``; ``A`` may be a matrix or a callable of time (then pass ``A_dt``)."""

    def __init__(self, A, b=None, c: float = 0.0, A_dt: Optional[Callable] = None):
        self._A = A
        self._A_dt = A_dt
        m = (A(0.0) if callable(A) else np.asarray(A)).shape[0]
        self.b = np.zeros(m) if b is None else np.asarray(b, dtype=float)
        self.c = float(c)
        self.affine = not callable(A) and not np.any(A)

    def A(self, t):
        return np.asarray(self._A(t) if callable(self._A) else self._A, dtype=float)

    def value(self, y, t, k=None):
        return float(self.c + self.b @ y + 0.5 * y @ self.A(t) @ y)

    def grad(self, y, t, k=None):
        A = self.A(t)
        return self.b + 0.5 * (A + A.T) @ y

    def dt(self, y, t, k=None):
        if self._A_dt is None:
            return 0.0
        return float(0.5 * y @ np.asarray(self._A_dt(t)) @ y)


class CallableOuter(Outer):
    """User-supplied ``F(y, t, k)`` with analytic ``grad`` and optional ``dt``."""

    def __init__(self, value: Callable, grad: Callable, dt: Optional[Callable] = None, affine: bool = False):
        self._value, self._grad, self._dt = value, grad, dt
        self.affine = affine

    def value(self, y, t, k=None):
        return float(self._value(y, t, k))

    def grad(self, y, t, k=None):
        return np.asarray(self._grad(y, t, k), dtype=float)

    def dt(self, y, t, k=None):
        return 0.0 if self._dt is None else float(self._dt(y, t, k))


# --------------------------------------------------------------------------
# test functions


@dataclass
class Snapshot:
    """A test function frozen at ``(t, mu)``."""

    value: float
    dt: float
    flat: Callable
    grad: Callable
    hess: Callable


class TestFunction:
    affine = False

    def at(self, t: float, mu: MeasureCollection) -> Snapshot:
        raise NotImplementedError

    def evaluate(self, t: float, mu: MeasureCollection) -> float:
        return self.at(t, mu).value

    def __add__(self, other: "TestFunction") -> "TestFunction":
        return Sum([self, other])


class Linear(TestFunction):
    """``v(mu) = sum_k lambda_k int phi(k, x) mu^k(dx)``; flat derivative ``phi``."""

    affine = True

    def __init__(self, phi: Component):
        self.phi = phi

    def at(self, t, mu):
        value = float(mu.grid.weights @ self.phi.integrate(mu))
        return Snapshot(value, 0.0, self.phi.value, self.phi.grad, self.phi.hess)


def _combine(coeffs: np.ndarray, comps: Sequence[Component], method: str, k: int, x: np.ndarray):
    out = None
    for c, comp in zip(coeffs, comps):
        if c == 0:
            continue
        term = c * getattr(comp, method)(k, x)
        out = term if out is None else out + term
    if out is None:
        shape = {"value": (x.shape[0],), "grad": x.shape, "hess": x.shape + (x.shape[1],)}[method]
        return np.zeros(shape)
    return out


class CylindricalPerLabel(TestFunction):
    """``v(t, mu) = sum_k lambda_k F(<phi_1, mu^k>, ..., <phi_m, mu^k>; t, k)``."""

    def __init__(self, outer: Outer, phis: Sequence[Component]):
        self.outer = outer
        self.phis = list(phis)
        self.affine = outer.affine

    def at(self, t, mu):
        y = np.stack([phi.integrate(mu) for phi in self.phis], axis=1)  # (K, m)
        lam = mu.grid.weights
        value = float(sum(lam[k] * self.outer.value(y[k], t, k) for k in range(len(lam))))
        dt = float(sum(lam[k] * self.outer.dt(y[k], t, k) for k in range(len(lam))))
        dF = np.stack([self.outer.grad(y[k], t, k) for k in range(len(lam))])
        return Snapshot(value, dt,
                        lambda k, x: _combine(dF[k], self.phis, "value", k, x),
                        lambda k, x: _combine(dF[k], self.phis, "grad", k, x),
                        lambda k, x: _combine(dF[k], self.phis, "hess", k, x))


class CylindricalOfCollection(TestFunction):
    """``v(t, mu) = F(sum_k lambda_k <phi_1, mu^k>, ..., sum_k lambda_k <phi_m, mu^k>; t)``."""

    def __init__(self, outer: Outer, phis: Sequence[Component]):
        self.outer = outer
        self.phis = list(phis)
        self.affine = outer.affine

    def at(self, t, mu):
        lam = mu.grid.weights
        y = np.array([lam @ phi.integrate(mu) for phi in self.phis])
        dF = self.outer.grad(y, t)
        return Snapshot(self.outer.value(y, t), self.outer.dt(y, t),
                        lambda k, x: _combine(dF, self.phis, "value", k, x),
                        lambda k, x: _combine(dF, self.phis, "grad", k, x),
                        lambda k, x: _combine(dF, self.phis, "hess", k, x))


class Kernel:
    """Symmetric-free k-point kernel ``phi(u_1..u_k, x_1..x_k)`` evaluated on batches.

    ``value(labels, xs)`` receives a tuple of label-index arrays and a tuple of
    ``(n, d)`` arrays; ``grad(slot, ...)`` and ``hess(slot, ...)`` differentiate
    with respect to ``x_slot``.
    """

    order: int = 2

    def value(self, labels, xs):
        raise NotImplementedError

    def grad(self, slot, labels, xs):
        raise NotImplementedError

    def hess(self, slot, labels, xs):
        raise NotImplementedError


class CallableKernel(Kernel):
    def __init__(self, order: int, value: Callable, grad: Callable, hess: Callable):
        self.order = order
        self._value, self._grad, self._hess = value, grad, hess

    def value(self, labels, xs):
        return self._value(labels, xs)

    def grad(self, slot, labels, xs):
        return self._grad(slot, labels, xs)

    def hess(self, slot, labels, xs):
        return self._hess(slot, labels, xs)


class PairQuadraticKernel(Kernel):
    """``W(u_1, u_2) [x_1^T B x_2 + x_1^T A1 x_1 / 2 + x_2^T A2 x_2 / 2 + e1.x_1 + e2.x_2 + c0]``.

    ``W`` is a ``(K, K)`` matrix on the label grid (e.g. a graphon).  This
    family admits closed-form evaluation through per-label first and second
    moments, used by :class:`KInteraction` instead of enumeration.
    """

    order = 2

    def __init__(self, W, B=None, A1=None, A2=None, e1=None, e2=None, c0: float = 0.0, dim: int = 1):
        self.W = np.asarray(W, dtype=float)
        eye = np.zeros((dim, dim))
        self.B = eye if B is None else np.asarray(B, dtype=float).reshape(dim, dim)
        self.A1 = eye if A1 is None else np.asarray(A1, dtype=float).reshape(dim, dim)
        self.A2 = eye if A2 is None else np.asarray(A2, dtype=float).reshape(dim, dim)
        self.A1 = 0.5 * (self.A1 + self.A1.T)
        self.A2 = 0.5 * (self.A2 + self.A2.T)
        self.e1 = np.zeros(dim) if e1 is None else np.asarray(e1, dtype=float)
        self.e2 = np.zeros(dim) if e2 is None else np.asarray(e2, dtype=float)
        self.c0 = float(c0)
        self.dim = dim

    @classmethod
    def product(cls, n_labels: int, dim: int = 1) -> "PairQuadraticKernel":
        """``x_1 . x_2`` with unit weights."""
        return cls(np.ones((n_labels, n_labels)), B=np.eye(dim), dim=dim)

    @classmethod
    def graphon_spread(cls, W, dim: int = 1) -> "PairQuadraticKernel":
        """``W(u_1, u_2) |x_1 - x_2|^2 / 2``."""
        eye = np.eye(dim)
        return cls(W, B=-eye, A1=eye, A2=eye, dim=dim)

    def value(self, labels, xs):
        l1, l2 = labels
        x1, x2 = xs
        h = (np.einsum("ni,ij,nj->n", x1, self.B, x2) + 0.5 * np.einsum("ni,ij,nj->n", x1, self.A1, x1)
             + 0.5 * np.einsum("ni,ij,nj->n", x2, self.A2, x2) + x1 @ self.e1 + x2 @ self.e2 + self.c0)
        return self.W[l1, l2] * h

    def grad(self, slot, labels, xs):
        l1, l2 = labels
        x1, x2 = xs
        if slot == 0:
            g = x2 @ self.B.T + x1 @ self.A1 + self.e1
        else:
            g = x1 @ self.B + x2 @ self.A2 + self.e2
        return self.W[l1, l2][:, None] * g

    def hess(self, slot, labels, xs):
        A = self.A1 if slot == 0 else self.A2
        return self.W[labels[0], labels[1]][:, None, None] * A


def _flatten(mu: MeasureCollection):
    labels, atoms, weights = [], [], []
    for k, m in enumerate(mu.measures):
        labels.append(np.full(m.size, k))
        atoms.append(m.atoms)
        weights.append(mu.grid.weights[k] * m.weights)
    return np.concatenate(labels), np.concatenate(atoms), np.concatenate(weights)


class KInteraction(TestFunction):
    """``v(mu) = int phi(u_1..u_k, x_1..x_k) mu^{u_1}(dx_1)..mu^{u_k}(dx_k) lambda(du_1)..lambda(du_k)``.

    Generic kernels are integrated by enumerating all k-tuples of atoms (small
    instances only); :class:`PairQuadraticKernel` uses moments.  The flat
    derivative sums, over slots, the kernel integrated in the other slots.
    """

    affine = False

    def __init__(self, kernel: Kernel, enumerate_always: bool = False):
        self.kernel = kernel
        self.order = kernel.order
        self.enumerate_always = enumerate_always

    def at(self, t, mu):
        if isinstance(self.kernel, PairQuadraticKernel) and not self.enumerate_always:
            return self._pair_snapshot(mu)
        return self._enumerated_snapshot(mu)

    # -- enumeration (oracle-grade, exponential in the order)

    def _enumerated_snapshot(self, mu):
        L, X, Wt = _flatten(mu)
        n, order, kernel = L.size, self.order, self.kernel
        combos = np.array(list(itertools.product(range(n), repeat=order)))
        weight = np.prod(Wt[combos], axis=1)
        value = float(weight @ kernel.value(tuple(L[combos[:, j]] for j in range(order)),
                                            tuple(X[combos[:, j]] for j in range(order))))
        others = np.array(list(itertools.product(range(n), repeat=order - 1))).reshape(-1, order - 1)
        w_others = np.prod(Wt[others], axis=1) if order > 1 else np.ones(1)

        def slot_args(slot, k, x):
            # rows: (point p, other-combo c) flattened as p * C + c
            npts, C = x.shape[0], w_others.size
            labels, xs = [], []
            col = 0
            for j in range(order):
                if j == slot:
                    labels.append(np.full(npts * C, k))
                    xs.append(np.repeat(x, C, axis=0))
                else:
                    idx = np.tile(others[:, col], npts)
                    labels.append(L[idx])
                    xs.append(X[idx])
                    col += 1
            return tuple(labels), tuple(xs), npts, C

        def reduce(method, k, x):
            out = 0.0
            for slot in range(order):
                labels, xs, npts, C = slot_args(slot, k, x)
                if method == "value":
                    vals = kernel.value(labels, xs)
                else:
                    vals = getattr(kernel, method)(slot, labels, xs)
                vals = vals.reshape((npts, C) + vals.shape[1:])
                out = out + np.tensordot(w_others, vals, axes=([0], [1]))
            return out

        return Snapshot(value, 0.0, lambda k, x: reduce("value", k, x), lambda k, x: reduce("grad", k, x),
                        lambda k, x: reduce("hess", k, x))

    # -- closed form for pair-quadratic kernels

    def _pair_snapshot(self, mu):
        ker = self.kernel
        lam = mu.grid.weights
        means = mu.means  # (K, d)
        second = np.stack([np.einsum("n,ni,nj->ij", m.weights, m.atoms, m.atoms) for m in mu.measures])
        LW = lam[:, None] * ker.W * lam[None, :]
        tr1 = np.einsum("ij,kij->k", ker.A1, second)
        tr2 = np.einsum("ij,kij->k", ker.A2, second)
        cross = means @ ker.B @ means.T
        h = cross + 0.5 * tr1[:, None] + 0.5 * tr2[None, :] + (means @ ker.e1)[:, None] + (means @ ker.e2)[None, :]
        value = float(np.sum(LW * (h + ker.c0)))
        row = ker.W * lam[None, :]  # slot 0 at label k: weights over l of W[k, l] lam_l
        col = ker.W.T * lam[None, :]  # slot 1 at label k: W[l, k] lam_l

        def flat(k, x):
            r, c = row[k], col[k]
            s1 = (x @ ker.B @ (r @ means) + r.sum() * (0.5 * np.einsum("ni,ij,nj->n", x, ker.A1, x) + x @ ker.e1 + ker.c0)
                  + 0.5 * r @ tr2 + r @ (means @ ker.e2))
            s2 = (x @ ker.B.T @ (c @ means) + c.sum() * (0.5 * np.einsum("ni,ij,nj->n", x, ker.A2, x) + x @ ker.e2 + ker.c0)
                  + 0.5 * c @ tr1 + c @ (means @ ker.e1))
            return s1 + s2

        def grad(k, x):
            r, c = row[k], col[k]
            return (ker.B @ (r @ means) + r.sum() * (x @ ker.A1 + ker.e1)
                    + ker.B.T @ (c @ means) + c.sum() * (x @ ker.A2 + ker.e2))

        def hess(k, x):
            H = row[k].sum() * ker.A1 + col[k].sum() * ker.A2
            return np.broadcast_to(H, (x.shape[0],) + H.shape)

        return Snapshot(value, 0.0, flat, grad, hess)


class Sum(TestFunction):
    def __init__(self, terms: Sequence[TestFunction]):
        self.terms = list(terms)
        self.affine = all(t.affine for t in self.terms)

    def at(self, t, mu):
        snaps = [term.at(t, mu) for term in self.terms]
        return Snapshot(sum(s.value for s in snaps), sum(s.dt for s in snaps),
                        lambda k, x: sum(s.flat(k, x) for s in snaps),
                        lambda k, x: sum(s.grad(k, x) for s in snaps),
                        lambda k, x: sum(s.hess(k, x) for s in snaps))


class TimeScaled(TestFunction):
    """``a(t) v(t, mu) + b(t)`` with analytic ``a'`` and ``b'``."""

    def __init__(self, base: TestFunction, factor: Callable, factor_dt: Callable,
                 offset: Optional[Callable] = None, offset_dt: Optional[Callable] = None):
        self.base = base
        self.factor, self.factor_dt = factor, factor_dt
        self.offset = offset or (lambda t: 0.0)
        self.offset_dt = offset_dt or (lambda t: 0.0)
        self.affine = base.affine

    def at(self, t, mu):
        s = self.base.at(t, mu)
        a = float(self.factor(t))
        return Snapshot(a * s.value + float(self.offset(t)),
                        float(self.factor_dt(t)) * s.value + a * s.dt + float(self.offset_dt(t)),
                        lambda k, x: a * s.flat(k, x), lambda k, x: a * s.grad(k, x), lambda k, x: a * s.hess(k, x))


# --------------------------------------------------------------------------
# operations


def evaluate(tf: TestFunction, t: float, mu: MeasureCollection) -> float:
    return tf.at(t, mu).value


def _points(x):
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    return np.atleast_2d(x.reshape(1, -1) if single else x), single


def flat_derivative(tf: TestFunction, t: float, mu: MeasureCollection, u_index: int, x):
    pts, single = _points(x)
    out = tf.at(t, mu).flat(u_index, pts)
    return float(out[0]) if single else out


def grad_x_flat(tf: TestFunction, t: float, mu: MeasureCollection, u_index: int, x):
    pts, single = _points(x)
    out = tf.at(t, mu).grad(u_index, pts)
    return out[0] if single else out


def hess_x_flat(tf: TestFunction, t: float, mu: MeasureCollection, u_index: int, x):
    pts, single = _points(x)
    out = tf.at(t, mu).hess(u_index, pts)
    return out[0] if single else out


def pairing(snapshot: Snapshot, mu: MeasureCollection, nu: MeasureCollection) -> float:
    """``sum_k lambda_k [int dv/dm(k, x) (nu^k - mu^k)(dx)]``."""
    total = 0.0
    for k, (a, b) in enumerate(zip(mu.measures, nu.measures)):
        total += mu.grid.weights[k] * (b.expect(snapshot.flat(k, b.atoms)) - a.expect(snapshot.flat(k, a.atoms)))
    return float(total)


def interpolate(mu: MeasureCollection, nu: MeasureCollection, eps: float) -> MeasureCollection:
    """The mixture collection ``mu + eps (nu - mu)``."""
    return MeasureCollection(mu.grid, tuple(EmpiricalMeasure.mixture([a, b], [1.0 - eps, eps])
                                            for a, b in zip(mu.measures, nu.measures)))


@dataclass
class GateauxReport:
    epsilons: list
    finite_differences: list
    pairing: float
    errors: list
    slope: Optional[float]
    exact: bool
    slope_all: Optional[float] = None
    slope_richardson: Optional[float] = None


# round-off in the difference quotient grows like u |v| / eps: the deep ladder
# resolves the asymptotic order, the moderate one suits exactness checks
GATEAUX_EPSILONS = tuple(0.1 * 2.0**-i for i in range(12))
GATEAUX_EXACT_EPSILONS = (0.2, 0.1, 0.05, 0.025, 0.0125)


def _loglog_slope(eps, errs) -> Optional[float]:
    keep = [(e, r) for e, r in zip(eps, errs) if r > 0]
    if len(keep) < 2:
        return None
    le, lr = np.log(np.array(keep)).T
    return float(np.polyfit(le, lr, 1)[0])


def gateaux_check(tf: TestFunction, t: float, mu: MeasureCollection, nu: MeasureCollection,
                  epsilons: Sequence[float] = GATEAUX_EPSILONS, exact_tol: float = 1e-12,
                  fit_last: int = 4) -> GateauxReport:
    """Compare difference quotients along ``mu + eps (nu - mu)`` with the flat-derivative pairing.

    ``slope`` is the least-squares log-log slope of the errors against
    ``eps`` over the ``fit_last`` smallest epsilons (the asymptotic regime);
    ``slope_all`` fits every epsilon.  ``slope_richardson`` fits
    ``|4 e(eps/2) - e(eps)|`` for halving ladders, which cancels the
    ``eps^2`` term of the signed error ``e`` and so is insensitive to
    sign changes of the remainder at moderate ``eps``.  All are ``None``
    when the errors vanish to ``exact_tol``.
    """
    snap = tf.at(t, mu)
    pair = pairing(snap, mu, nu)
    fds = [(tf.evaluate(t, interpolate(mu, nu, e)) - snap.value) / e for e in epsilons]
    errors = [abs(fd - pair) for fd in fds]
    exact = max(errors) <= exact_tol
    slope = slope_all = slope_rich = None
    if not exact:
        order = np.argsort(epsilons)[:fit_last]
        slope = _loglog_slope([epsilons[i] for i in order], [errors[i] for i in order])
        slope_all = _loglog_slope(epsilons, errors)
        signed = {e: fd - pair for e, fd in zip(epsilons, fds)}
        pairs = [(e, abs(4.0 * signed[e / 2] - signed[e])) for e in epsilons if e / 2 in signed]
        if pairs:
            slope_rich = _loglog_slope(*zip(*pairs))
    return GateauxReport(list(epsilons), fds, pair, errors, slope, bool(exact), slope_all, slope_rich)


@dataclass
class GrowthReport:
    grad_ratio: float
    hess_norm: float


def growth_probe(tf: TestFunction, t: float, collections: Sequence[MeasureCollection], points: np.ndarray) -> GrowthReport:
    """Sampled ``|d_x dv/dm| / (1 + |x| + d(mu, delta_0))`` and ``|d_x^2 dv/dm|`` maxima."""
    ratio, hnorm = 0.0, 0.0
    for mu in collections:
        snap = tf.at(t, mu)
        scale = 1.0 + np.linalg.norm(points, axis=1) + np.sqrt(mu.squared_norm)
        for k in range(len(mu)):
            ratio = max(ratio, float(np.max(np.linalg.norm(snap.grad(k, points), axis=1) / scale)))
            hnorm = max(hnorm, float(np.max(np.linalg.norm(snap.hess(k, points), axis=(1, 2), ord=2))))
    return GrowthReport(ratio, hnorm)


# --------------------------------------------------------------------------
# Ito chain rule along simulated flows


@dataclass
class ItoReport:
    lhs: float
    rhs: float
    residual: float
    quadrature: str
    martingale: Optional[float] = None
    residual_cv: Optional[float] = None
    integrand: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "residual": self.residual, "quadrature": self.quadrature,
                "martingale": self.martingale, "residual_cv": self.residual_cv}


def ito_residual(tf: TestFunction, result: SimulationResult, coeffs: CoefficientSet, policy: Optional[Policy] = None,
                 *, quadrature: str = "midpoint", control_variate: bool = False) -> ItoReport:
    """Both sides of the chain rule for ``v(t, mu_t)`` along a simulated flow.

    The integrand ``dt v + sum_k lambda_k E[grad dv/dm . b + hess dv/dm : sigma sigma^T / 2]``
    is evaluated at every simulation time with particle averages and the
    recorded actions; ``midpoint`` averages the integrand at the two ends of
    each step, ``left`` uses the left end.  With ``control_variate`` the
    discrete martingale built from the stored Brownian increments is also
    reported and subtracted in ``residual_cv``.
    """
    if not result.flow.path_coupled:
        raise ValueError("the flow must carry trajectories")
    if result.record_every != 1:
        raise ValueError("every step must be recorded")
    if quadrature not in ("midpoint", "left"):
        raise ValueError("quadrature must be 'midpoint' or 'left'")
    if control_variate and result.increments is None:
        raise ValueError("the control variate needs stored Brownian increments (store_noise=True)")
    flow = result.flow
    lam = flow.grid.weights
    times = flow.times
    n_steps = times.size - 1
    dt = np.diff(times)
    integrand = np.empty(times.size)
    martingale = 0.0
    snaps = []
    for j in range(times.size):
        mu = flow.snapshot(j)
        nu = result.action_law(j)
        snap = tf.at(times[j], mu)
        snaps.append(snap)
        total = snap.dt
        step_mart = 0.0
        for k in range(len(lam)):
            x = flow.paths[j, k]
            a = result.actions[j, k]
            b = coeffs.drift(k, x, a, mu, nu)
            sig = coeffs.volatility(k, x, a, mu, nu)
            g = snap.grad(k, x)
            H = snap.hess(k, x)
            cov = np.einsum("nil,njl->nij", sig, sig)
            w = flow.weights[k]
            total += lam[k] * (w @ (np.sum(g * b, axis=1) + 0.5 * np.einsum("nij,nij->n", H, cov)))
            if control_variate and j < n_steps:
                dW = result.increments[j, k]
                sdw = np.einsum("nil,nl->ni", sig, dW)
                quad = np.einsum("ni,nij,nj->n", sdw, H, sdw) - dt[j] * np.einsum("nij,nij->n", H, cov)
                step_mart += lam[k] * (w @ (np.sum(g * sdw, axis=1) + 0.5 * quad))
        integrand[j] = total
        martingale += step_mart
    lhs = snaps[-1].value - snaps[0].value
    if quadrature == "midpoint":
        rhs = float(np.sum(dt * 0.5 * (integrand[:-1] + integrand[1:])))
    else:
        rhs = float(np.sum(dt * integrand[:-1]))
    report = ItoReport(float(lhs), rhs, float(lhs - rhs), quadrature, integrand=integrand.tolist())
    if control_variate:
        report.martingale = float(martingale)
        report.residual_cv = float(lhs - rhs - martingale)
    return report


@dataclass
class ItoStudy:
    steps: list
    dts: list
    residuals: list
    slope: float
    reports: list


def ito_refinement_study(tf: TestFunction, coeffs: CoefficientSet, policy: Policy, init: ParticleEnsemble, t0: float,
                         T: float, steps: Sequence[int], seed: int, *, control_variate: bool = True,
                         quadrature: str = "midpoint") -> ItoStudy:
    """Residuals over a sequence of step counts driven by one Brownian path (common random numbers).

    The finest simulation draws the increments; coarser ones sum them in
    blocks.  ``slope`` is the log-log slope of ``|residual|`` against ``dt``.
    """
    steps = sorted(steps)
    finest = steps[-1]
    if any(finest % s for s in steps):
        raise ValueError("every step count must divide the finest one")
    fine = simulate(coeffs, policy, init, t0, T, finest, seed, store_noise=True)
    reports, residuals = [], []
    for s in steps:
        if s == finest:
            res = fine
        else:
            inc = coarsen_increments(fine.increments, finest // s)
            res = simulate(coeffs, policy, init, t0, T, s, seed, increments=inc, store_noise=True)
        rep = ito_residual(tf, res, coeffs, policy, quadrature=quadrature, control_variate=control_variate)
        reports.append(rep)
        residuals.append(rep.residual_cv if control_variate else rep.residual)
    dts = [(T - t0) / s for s in steps]
    slope = float(np.polyfit(np.log(dts), np.log(np.abs(residuals)), 1)[0])
    return ItoStudy(list(steps), dts, residuals, slope, reports)
