"""Linear-quadratic graphon benchmark with a Riccati oracle.

Dynamics ``dX^k = a dt + sigma0 dW^k`` in d = 1, running cost
``a^2/2 + c_k (x - m_G(k, mu))^2/2``, no terminal cost.  Splitting each label
into its mean ``m_k`` and fluctuation gives the value

    v(t, mu) = sum_k lambda_k [p_k(t) Var_k / 2 + r_k(t)] + m^T P(t) m / 2

with ``p_k' = p_k^2 - c_k``, ``r_k' = -sigma0^2 p_k / 2``,
``P' = P Lam^-1 P - Q``, ``Q = (I - W)^T diag(lambda c) (I - W)`` and zero
terminal data, ``W`` the graphon mixing matrix and ``Lam = diag(lambda)``.
The optimal feedback is ``a = -p_k (x - m_k) - (P m)_k / lambda_k``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from .calculus import CallableOuter, CylindricalOfCollection, CylindricalPerLabel, Polynomial, QuadraticOuter, Sum
from .bellman import CandidateValue
from .dynamics import CoefficientSet, FeedbackPolicy
from .measure_space import Graphon, LabelGrid, MeasureCollection
from .models import graphon_lq

ODE_TOL = 1e-12


@dataclass(frozen=True)
class LQParams:
    grid: LabelGrid
    graphon: Graphon
    c: np.ndarray
    sigma0: float = 0.5
    T: float = 1.0
    action_bound: float = 10.0

    def __post_init__(self):
        c = np.broadcast_to(np.asarray(self.c, dtype=float), (len(self.grid),)).copy()
        if np.any(c < 0):
            raise ValueError("state cost weights must be nonnegative")
        if self.sigma0 < 0 or not self.T > 0 or self.action_bound <= 0:
            raise ValueError("need sigma0 >= 0, T > 0 and a positive action bound")
        object.__setattr__(self, "c", c)


class LQBenchmark:
    """Benchmark instance with dense Riccati solutions on ``[0, T]``."""

    def __init__(self, params: LQParams):
        self.params = params
        p = params
        K = len(p.grid)
        lam = p.grid.weights
        self.lam = lam
        self.W = p.graphon.mixing
        I_W = np.eye(K) - self.W
        self.Q = I_W.T @ np.diag(lam * p.c) @ I_W
        self.coeffs: CoefficientSet = graphon_lq(p.grid, p.graphon, p.c, p.sigma0, p.action_bound)
        self.K = K

        # backward integration in s = T - t, state (p_1..p_K, r_1..r_K, vec P)
        def rhs(s, y):
            pk, P = y[:K], y[2 * K:].reshape(K, K)
            dp = -(pk**2 - p.c)
            dr = 0.5 * p.sigma0**2 * pk
            dP = -(P @ np.diag(1.0 / lam) @ P - self.Q)
            return np.concatenate([dp, dr, dP.ravel()])

        sol = solve_ivp(rhs, (0.0, p.T), np.zeros(2 * K + K * K), method="DOP853", rtol=ODE_TOL, atol=ODE_TOL,
                        dense_output=True)
        if not sol.success:
            raise RuntimeError(f"Riccati integration failed: {sol.message}")
        self._sol = sol

    # -- oracle trajectories

    def _state(self, t):
        return self._sol.sol(self.params.T - float(t))

    def p(self, t) -> np.ndarray:
        return self._state(t)[: self.K]

    def r(self, t) -> np.ndarray:
        return self._state(t)[self.K: 2 * self.K]

    def P(self, t) -> np.ndarray:
        P = self._state(t)[2 * self.K:].reshape(self.K, self.K)
        return 0.5 * (P + P.T)

    def p_dt(self, t) -> np.ndarray:
        return self.p(t) ** 2 - self.params.c

    def r_dt(self, t) -> np.ndarray:
        return -0.5 * self.params.sigma0**2 * self.p(t)

    def P_dt(self, t) -> np.ndarray:
        P = self.P(t)
        return P @ np.diag(1.0 / self.lam) @ P - self.Q

    def riccati_residual(self, times, h: float = 1e-5) -> float:
        """Largest gap between central differences of the dense solution and the ODE right-hand side."""
        worst = 0.0
        T = self.params.T
        for t in times:
            if t - h < 0.0:
                fd = (-3 * self._state(t) + 4 * self._state(t + h) - self._state(t + 2 * h)) / (2 * h)
            elif t + h > T:
                fd = (3 * self._state(t) - 4 * self._state(t - h) + self._state(t - 2 * h)) / (2 * h)
            else:
                fd = (self._state(t + h) - self._state(t - h)) / (2 * h)
            ode = np.concatenate([self.p_dt(t), self.r_dt(t), self.P_dt(t).ravel()])
            worst = max(worst, float(np.max(np.abs(fd - ode))))
        return worst

    def trajectories(self, n_times: int = 101) -> tuple[np.ndarray, np.ndarray]:
        """Time grid and rows ``(p_1..p_K, r_1..r_K, vec P)`` for regression pinning."""
        times = np.linspace(0.0, self.params.T, n_times)
        return times, np.stack([np.concatenate([self.p(t), self.r(t), self.P(t).ravel()]) for t in times])

    # -- value, candidate and feedback

    def value(self, t: float, mu: MeasureCollection) -> float:
        means = mu.means[:, 0]
        var = mu.second_moments[:, 0] - means**2
        return float(self.lam @ (0.5 * self.p(t) * var + self.r(t)) + 0.5 * means @ self.P(t) @ means)

    def candidate(self) -> CandidateValue:
        """The value as a sum of a per-label cylindrical and a collection cylindrical function."""
        per_label = CallableOuter(
            lambda y, t, k: 0.5 * self.p(t)[k] * (y[1] - y[0] ** 2) + self.r(t)[k],
            lambda y, t, k: np.array([-self.p(t)[k] * y[0], 0.5 * self.p(t)[k]]),
            lambda y, t, k: 0.5 * self.p_dt(t)[k] * (y[1] - y[0] ** 2) + self.r_dt(t)[k])
        fluct = CylindricalPerLabel(per_label, [Polynomial.coordinate(), Polynomial.half_square(scale=2.0)])
        phis = [Polynomial.label_coordinate(self.K, j, 1.0 / self.lam[j]) for j in range(self.K)]
        mean = CylindricalOfCollection(QuadraticOuter(self.P, A_dt=self.P_dt), phis)
        return CandidateValue(Sum([fluct, mean]), name="lq-riccati")

    def feedback_action(self, k: int, t: float, x: np.ndarray, mu: MeasureCollection) -> np.ndarray:
        means = mu.means[:, 0]
        return -(self.p(t)[k] * (x - means[k]) + (self.P(t) @ means)[k] / self.lam[k])

    def feedback(self, shift: float = 0.0) -> FeedbackPolicy:
        return FeedbackPolicy(lambda k, t, x, mu: self.feedback_action(k, t, x, mu) + shift,
                              name=f"lq-feedback{'' if shift == 0 else f'+{shift}'}")


def build_lq_benchmark(grid: LabelGrid, graphon: Graphon, c=1.0, sigma0: float = 0.5, T: float = 1.0,
                       action_bound: float = 10.0) -> LQBenchmark:
    return LQBenchmark(LQParams(grid, graphon, c, sigma0, T, action_bound))


# --------------------------------------------------------------------------
# independent cross-checks


def closed_form_fluctuation(c: float, sigma0: float, T: float, t: float) -> tuple[float, float]:
    """``p(t) = sqrt(c) tanh(sqrt(c)(T - t))`` and ``r(t) = sigma0^2 log cosh(sqrt(c)(T - t)) / 2``."""
    s = np.sqrt(c) * (T - t)
    return float(np.sqrt(c) * np.tanh(s)), float(0.5 * sigma0**2 * np.log(np.cosh(s)))


def _stage_cost(gain: float, c: float, sigma0: float, var: float, length: float) -> tuple[float, float]:
    """Exact variance and accumulated cost over one stage of constant feedback gain.

    ``Var' = -2 gain Var + sigma0^2``, cost rate ``(gain^2 + c) Var / 2``.
    """
    A = np.array([[-2.0 * gain, 0.0, sigma0**2], [0.5 * (gain**2 + c), 0.0, 0.0], [0.0, 0.0, 0.0]])
    out = expm(A * length) @ np.array([var, 0.0, 1.0])
    return float(out[0]), float(out[1])


def gain_search_value(c: float, sigma0: float, T: float, var0: float, gains, n_stages: int) -> tuple[float, tuple]:
    """Best cost over piecewise-constant gains ``a = -gain (x - m)`` on equal stages (single label, G = 1).

    An upper bound on the exact value ``p(0) var0 / 2 + r(0)``.
    """
    length = T / n_stages
    best, best_gains = np.inf, None
    for combo in itertools.product(gains, repeat=n_stages):
        var, total = var0, 0.0
        for g in combo:
            var, cost = _stage_cost(g, c, sigma0, var, length)
            total += cost
        if total < best:
            best, best_gains = total, combo
    return float(best), tuple(best_gains)


def shooting_value(bench: LQBenchmark, m0: np.ndarray) -> float:
    """Deterministic mean problem solved by shooting on the adjoint (sigma0 = 0 setting).

    Optimality gives ``m' = -Lam^-1 y``, ``y' = -Q m``, ``y(T) = 0``; the
    linear boundary problem is solved exactly from the unit responses in
    ``y(0)`` and the cost integrated along the optimal path.
    """
    K, lam, Q, T = bench.K, bench.lam, bench.Q, bench.params.T
    inv = 1.0 / lam

    def rhs(t, z):
        m, y, _ = z[:K], z[K:2 * K], z[2 * K]
        a = -inv * y
        return np.concatenate([a, -Q @ m, [0.5 * lam @ a**2 + 0.5 * m @ Q @ m]])

    def terminal_adjoint(y0):
        z = solve_ivp(rhs, (0.0, T), np.concatenate([m0, y0, [0.0]]), method="DOP853", rtol=ODE_TOL, atol=ODE_TOL)
        return z.y[K:2 * K, -1]

    base = terminal_adjoint(np.zeros(K))
    jac = np.stack([terminal_adjoint(np.eye(K)[i]) - base for i in range(K)], axis=1)
    y0 = np.linalg.solve(jac, -base)
    z = solve_ivp(rhs, (0.0, T), np.concatenate([m0, y0, [0.0]]), method="DOP853", rtol=ODE_TOL, atol=ODE_TOL)
    return float(z.y[2 * K, -1])
