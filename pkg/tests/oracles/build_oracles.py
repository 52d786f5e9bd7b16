"""Independent reference values, frozen into ``tests/data/oracles.json``.

Nothing here imports the package: transport costs come from enumerating
permutations, the linear-quadratic values from closed forms, analytic
constant-gain stage formulas and the matrix exponential of the Hamiltonian
system.  Re-run with ``python3 tests/oracles/build_oracles.py`` only when an
oracle itself changes.
"""

from __future__ import annotations

import itertools
import json
import math
from pathlib import Path

import numpy as np
from scipy.linalg import expm

OUT = Path(__file__).resolve().parents[1] / "data" / "oracles.json"


def w2_by_permutations(xa: np.ndarray, xb: np.ndarray) -> float:
    """Uniform equal-size clouds: optimal plans include a permutation (Birkhoff), so enumerate them all."""
    n = len(xa)
    best = math.inf
    for perm in itertools.permutations(range(n)):
        cost = sum(float(np.sum((xa[i] - xb[j]) ** 2)) for i, j in enumerate(perm)) / n
        best = min(best, cost)
    return math.sqrt(best)


def mixture_mean_product_graphon() -> list[float]:
    """G(u, v) = u v, labels 0.5 and 1 with weight 1/2, Diracs at 1 and 3: mean of each neighborhood mixture."""
    labels, weights, atoms = [0.5, 1.0], [0.5, 0.5], [1.0, 3.0]
    out = []
    for u in labels:
        degree = sum(u * v * w for v, w in zip(labels, weights))
        out.append(sum(u * v * w / degree * x for v, w, x in zip(labels, weights, atoms)))
    return out


def constant_gain_stage(gain: float, c: float, sigma0: float, var: float, length: float) -> tuple[float, float]:
    """Var' = -2 g Var + s^2 solved in closed form; cost = int (g^2 + c) Var / 2."""
    rate = gain**2 + c
    if gain == 0.0:
        var_end = var + sigma0**2 * length
        integral = var * length + 0.5 * sigma0**2 * length**2
    else:
        eq = sigma0**2 / (2.0 * gain)
        decay = math.exp(-2.0 * gain * length)
        var_end = eq + (var - eq) * decay
        integral = eq * length + (var - eq) * (1.0 - decay) / (2.0 * gain)
    return var_end, 0.5 * rate * integral


def gain_search(c, sigma0, T, var0, gains, stages) -> float:
    best = math.inf
    for combo in itertools.product(gains, repeat=stages):
        var, total = var0, 0.0
        for g in combo:
            var, cost = constant_gain_stage(g, c, sigma0, var, T / stages)
            total += cost
        best = min(best, total)
    return best


def riccati_closed_form(c, sigma0, T, var0) -> float:
    s = math.sqrt(c) * T
    return 0.5 * math.sqrt(c) * math.tanh(s) * var0 + 0.5 * sigma0**2 * math.log(math.cosh(s))


def deterministic_two_label() -> dict:
    """sigma0 = 0, labels 0.5 and 1 with weight 1/2, G(u, v) = u v, c = (1, 2), T = 1.

    The mean dynamics m' = a with cost int sum lam_k (a_k^2 + c_k (m_k - (W m)_k)^2) / 2
    has adjoint y = Lam a-costate; the Hamiltonian flow z' = H z with
    H = [[0, -Lam^-1], [-Q, 0]] and y(T) = 0 gives y(0) and the value m0 . y(0) / 2.
    """
    labels = np.array([0.5, 1.0])
    lam = np.array([0.5, 0.5])
    c = np.array([1.0, 2.0])
    G = np.outer(labels, labels)
    W = G * lam[None, :] / (G @ lam)[:, None]
    I_W = np.eye(2) - W
    Q = I_W.T @ np.diag(lam * c) @ I_W
    H = np.block([[np.zeros((2, 2)), -np.diag(1.0 / lam)], [-Q, np.zeros((2, 2))]])
    phi = expm(H * 1.0)
    m0 = np.array([1.0, -0.5])
    y0 = -np.linalg.solve(phi[2:, 2:], phi[2:, :2] @ m0)
    return {"labels": labels.tolist(), "weights": lam.tolist(), "c": c.tolist(), "T": 1.0, "m0": m0.tolist(),
            "value": float(0.5 * m0 @ y0)}


def main():
    gen = np.random.default_rng(20240601)
    xa, xb = gen.normal(size=(6, 2)), gen.normal(size=(6, 2)) + np.array([0.7, -0.3])
    gains = np.linspace(0.0, 2.0, 41).tolist()
    lq = {"c": 2.0, "sigma0": 0.5, "T": 1.0, "var0": 1.0, "gains": gains}
    lq["riccati_value"] = riccati_closed_form(2.0, 0.5, 1.0, 1.0)
    lq["gain_search"] = {str(s): gain_search(2.0, 0.5, 1.0, 1.0, gains, s) for s in (1, 2, 3)}
    data = {
        "w2_six_atoms_2d": {"a": xa.tolist(), "b": xb.tolist(), "value": w2_by_permutations(xa, xb)},
        "product_graphon_mixture_means": mixture_mean_product_graphon(),
        "lq_single_label": lq,
        "lq_deterministic_two_labels": deterministic_two_label(),
    }
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: v for k, v in data.items() if k != "w2_six_atoms_2d"}, indent=1)[:1500])


if __name__ == "__main__":
    main()
