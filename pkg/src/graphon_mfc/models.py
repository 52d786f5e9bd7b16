"""Built-in coefficient families.

All families interact through the graphon neighborhood mean
``m_G(u, mu) = sum_v G(u,v) lambda_v mean(mu^v) / ||G(u,.)||_1``, which is
Lipschitz in ``mu`` with constant ``Graphon.lipschitz_factor`` (Cauchy-Schwarz
against ``lambda`` plus ``|mean(a) - mean(b)| <= W2(a, b)``).  The declared
constants below are derived from that bound.
"""

from __future__ import annotations

import numpy as np

from .dynamics import ActionSpace, CoefficientSet
from .measure_space import Graphon, LabelGrid


def _neighborhood_mean(graphon: Graphon, mu, k: int) -> np.ndarray:
    return graphon.mixing[k] @ mu.means


def _per_label(value, grid: LabelGrid, name: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, dtype=float), (len(grid),)).copy()
    if np.any(arr < 0):
        raise ValueError(f"{name} must be nonnegative")
    return arr


def graphon_lq(grid: LabelGrid, graphon: Graphon, c=1.0, sigma0: float = 0.5,
               action_bound: float = 10.0) -> CoefficientSet:
    """``dX = a dt + sigma0 dW`` with cost ``a^2/2 + c(u)(x - m_G)^2/2`` and no terminal cost (d = 1)."""
    c = _per_label(c, grid, "c")
    if sigma0 < 0 or action_bound <= 0:
        raise ValueError("need sigma0 >= 0 and a positive action bound")
    ell = graphon.lipschitz_factor

    def drift(k, x, a, mu, nu):
        return a.copy()

    def volatility(k, x, a, mu, nu):
        return np.full((x.shape[0], 1, 1), sigma0)

    def running_cost(k, x, a, mu, nu):
        m = _neighborhood_mean(graphon, mu, k)
        return 0.5 * a[:, 0] ** 2 + 0.5 * c[k] * (x[:, 0] - m[0]) ** 2

    def terminal_cost(k, x, mu):
        return np.zeros(x.shape[0])

    cmax = float(c.max())
    return CoefficientSet(
        drift, volatility, running_cost, terminal_cost, dim=1, noise_dim=1,
        action_space=ActionSpace.box(action_bound), L=0.0, M=max(1.0, sigma0),
        M_strong=sigma0 + action_bound, K=max(0.5, cmax * (1.0 + ell)),
        M_cost=0.5 * action_bound**2 + cmax * max(1.0, ell**2),
        grid=grid, graphon=graphon, name="graphon-lq",
        params={"c": c.tolist(), "sigma0": sigma0, "action_bound": action_bound})


def graphon_mean_reversion(grid: LabelGrid, graphon: Graphon, kappa: float = 1.0, sigma0: float = 0.3,
                           sigma1: float = 0.0, q: float = 1.0, q_terminal: float = 0.0, dim: int = 1,
                           action_bound: float | None = None) -> CoefficientSet:
    """Mean reversion toward the graphon neighborhood mean.

    ``b = kappa (m_G - x) + a``, ``sigma = diag(sigma0 + sigma1 m_G)``,
    ``f = |a|^2/2 + q |x - m_G|^2/2``, ``g = q_terminal |x - m_G|^2/2``;
    actions live in R^d (a box when ``action_bound`` is given).
    """
    if kappa < 0 or q < 0 or q_terminal < 0:
        raise ValueError("kappa, q and q_terminal must be nonnegative")
    ell = graphon.lipschitz_factor
    root_d = np.sqrt(dim)

    def drift(k, x, a, mu, nu):
        return kappa * (_neighborhood_mean(graphon, mu, k) - x) + a

    def volatility(k, x, a, mu, nu):
        diag = sigma0 + sigma1 * _neighborhood_mean(graphon, mu, k)
        return np.broadcast_to(np.diag(diag), (x.shape[0], dim, dim)).copy()

    def running_cost(k, x, a, mu, nu):
        gap = x - _neighborhood_mean(graphon, mu, k)
        return 0.5 * np.sum(a**2, axis=1) + 0.5 * q * np.sum(gap**2, axis=1)

    def terminal_cost(k, x, mu):
        gap = x - _neighborhood_mean(graphon, mu, k)
        return 0.5 * q_terminal * np.sum(gap**2, axis=1)

    if action_bound is None:
        space = ActionSpace(np.full(dim, -np.inf), np.full(dim, np.inf))
        m_strong = None
    else:
        space = ActionSpace.box(action_bound, dim)
        m_strong = max(root_d * abs(sigma0) + space.radius, kappa, (kappa + abs(sigma1)) * ell)
    L = max(kappa * max(1.0, ell), abs(sigma1) * ell)
    M = max(root_d * abs(sigma0), kappa, 1.0, (kappa + abs(sigma1)) * ell)
    qmax = max(q, q_terminal)
    # |a|^2 / 2 is only quadratically bounded in x when the action box is bounded
    m_cost = (0.5 * space.radius**2 if space.bounded else np.inf) + (q + q_terminal) * max(1.0, ell**2)
    return CoefficientSet(
        drift, volatility, running_cost, terminal_cost, dim=dim, noise_dim=dim, action_space=space,
        L=L, M=M, M_strong=m_strong, K=max(0.5, qmax * (1.0 + ell)), M_cost=m_cost,
        grid=grid, graphon=graphon, name="graphon-mean-reversion",
        params={"kappa": kappa, "sigma0": sigma0, "sigma1": sigma1, "q": q, "q_terminal": q_terminal,
                "dim": dim, "action_bound": action_bound})


def custom_polynomial(grid: LabelGrid, graphon: Graphon, b0=0.0, b1=0.0, b2=0.0, b3=0.0, s0=0.0, s1=0.0, s2=0.0,
                      fx=0.0, fa=0.0, fm=0.0, f0=0.0, gx=0.0, gm=0.0, g1=0.0, dim: int = 1,
                      action_bound: float | None = None) -> CoefficientSet:
    """Affine coefficients with quadratic costs (componentwise in R^d).

    ``b = b0 + b1 x + b2 a + b3 m_G``, ``sigma = diag(s0 + s1 x + s2 m_G)``,
    ``f = f0 + fx|x|^2/2 + fa|a|^2/2 + fm|x - m_G|^2/2``,
    ``g = g1 sum(x) + gx|x|^2/2 + gm|x - m_G|^2/2``.
    """
    root_d = np.sqrt(dim)
    ell = graphon.lipschitz_factor

    def drift(k, x, a, mu, nu):
        return b0 + b1 * x + b2 * a + b3 * _neighborhood_mean(graphon, mu, k)

    def volatility(k, x, a, mu, nu):
        diag = s0 + s1 * x + s2 * _neighborhood_mean(graphon, mu, k)
        return diag[:, :, None] * np.eye(dim)[None]

    def running_cost(k, x, a, mu, nu):
        gap = x - _neighborhood_mean(graphon, mu, k)
        return (f0 + 0.5 * fx * np.sum(x**2, axis=1) + 0.5 * fa * np.sum(a**2, axis=1)
                + 0.5 * fm * np.sum(gap**2, axis=1))

    def terminal_cost(k, x, mu):
        gap = x - _neighborhood_mean(graphon, mu, k)
        return g1 * np.sum(x, axis=1) + 0.5 * gx * np.sum(x**2, axis=1) + 0.5 * gm * np.sum(gap**2, axis=1)

    if action_bound is None:
        space = ActionSpace(np.full(dim, -np.inf), np.full(dim, np.inf))
    else:
        space = ActionSpace.box(action_bound, dim)
    L = max(abs(b1), abs(b3) * ell, abs(s1), abs(s2) * ell)
    M = max(root_d * (abs(b0) + abs(s0)), abs(b1) + abs(s1), abs(b2), (abs(b3) + abs(s2)) * ell)
    m_strong = None
    if b2 == 0 or space.bounded:
        extra = abs(b2) * space.radius if b2 != 0 else 0.0
        m_strong = max(root_d * (abs(b0) + abs(s0)) + extra, abs(b1) + abs(s1), (abs(b3) + abs(s2)) * ell)
    cmax = max(abs(fx), abs(fm), abs(gx), abs(gm))
    action_part = 0.0 if fa == 0 else (0.5 * abs(fa) * space.radius**2 if space.bounded else np.inf)
    m_cost = (abs(f0) + action_part + root_d * abs(g1) + 0.5 * (abs(fx) + abs(gx))
              + (abs(fm) + abs(gm)) * max(1.0, ell**2))
    return CoefficientSet(
        drift, volatility, running_cost, terminal_cost, dim=dim, noise_dim=dim, action_space=space,
        L=L, M=M, M_strong=m_strong, K=max(0.5, cmax * (1.0 + ell) + abs(g1)),
        M_cost=m_cost,
        grid=grid, graphon=graphon, name="custom-polynomial",
        params={"b0": b0, "b1": b1, "b2": b2, "b3": b3, "s0": s0, "s1": s1, "s2": s2, "fx": fx, "fa": fa,
                "fm": fm, "f0": f0, "gx": gx, "gm": gm, "g1": g1, "dim": dim, "action_bound": action_bound})


FAMILIES = {
    "graphon-lq": graphon_lq,
    "graphon-mean-reversion": graphon_mean_reversion,
    "custom-polynomial": custom_polynomial,
}
