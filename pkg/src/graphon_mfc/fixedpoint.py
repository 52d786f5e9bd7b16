"""Picard iteration for the law-consistency fixed point.

``Psi(nu)`` is the law flow of the system whose measure arguments are read
from the frozen flow ``nu``; every call at a given seed reuses the same noise
streams, so distances between iterates are free of Monte Carlo noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .dynamics import CoefficientSet, ParticleEnsemble, Policy, SimulationResult, simulate
from .measure_space import MeasureFlow, path_distance
from .probes import contraction_constant, contraction_window


class PicardDivergenceError(RuntimeError):
    """Distances between iterates keep growing; the horizon is likely too long for contraction."""


@dataclass
class PicardState:
    iterate_index: int = 0
    current_flow: Optional[MeasureFlow] = None
    distance_history: list = field(default_factory=list)
    contraction_ratios: list = field(default_factory=list)
    converged: bool = False
    converged_at_iteration: Optional[int] = None
    tol: float = 1e-3
    windows: list = field(default_factory=list)

    def record(self, distance: float):
        if self.distance_history:
            prev = self.distance_history[-1]
            self.contraction_ratios.append(distance / prev if prev > 0 else 0.0)
        self.distance_history.append(float(distance))
        self.iterate_index += 1

    def to_dict(self) -> dict:
        return {
            "iterate_index": self.iterate_index,
            "distance_history": self.distance_history,
            "contraction_ratios": self.contraction_ratios,
            "converged": self.converged,
            "converged_at_iteration": self.converged_at_iteration,
            "tol": self.tol,
            "windows": self.windows,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _grid_params(nu: MeasureFlow) -> tuple[float, float, int]:
    times = nu.times
    steps = times.size - 1
    if steps < 1:
        raise ValueError("flow needs at least two times")
    expected = times[0] + (times[-1] - times[0]) * np.arange(steps + 1) / steps
    if not np.allclose(times, expected, rtol=0, atol=1e-9 * max(1.0, abs(times[-1]))):
        raise ValueError("frozen flow must live on a uniform time grid")
    return float(times[0]), float(times[-1]), steps


def psi_result(coeffs: CoefficientSet, policy: Policy, init: ParticleEnsemble, nu: MeasureFlow, seed: int, *,
               step_offset: int = 0, threads: int = 1) -> SimulationResult:
    """Simulation of the decoupled system driven by the frozen flow ``nu``."""
    if not nu.grid.same_as(init.grid):
        raise ValueError("frozen flow and ensemble use different label grids")
    t0, T, steps = _grid_params(nu)
    return simulate(coeffs, policy, init, t0, T, steps, seed, frozen_flow=nu, step_offset=step_offset,
                    threads=threads)


def apply_psi(coeffs: CoefficientSet, policy: Policy, init: ParticleEnsemble, nu: MeasureFlow, seed: int, *,
              step_offset: int = 0, threads: int = 1) -> MeasureFlow:
    """The path-coupled law flow ``Psi(nu)``."""
    return psi_result(coeffs, policy, init, nu, seed, step_offset=step_offset, threads=threads).flow


def _diverging(history: list) -> bool:
    if len(history) < 4:
        return False
    last = history[-4:]
    increasing = all(b > a for a, b in zip(last, last[1:]))
    return increasing and history[-1] > 10.0 * history[0]


def _solve_window(coeffs, policy, init, t0, T, steps, max_iters, tol, seed, step_offset, threads):
    times = t0 + (T - t0) * np.arange(steps + 1) / steps
    nu = MeasureFlow.constant(init.measure, times)
    state = PicardState(tol=tol)
    result = None
    for k in range(max_iters):
        result = psi_result(coeffs, policy, init, nu, seed, step_offset=step_offset, threads=threads)
        dist = path_distance(result.flow, nu)
        state.record(dist)
        nu = result.flow
        if dist < tol:
            state.converged = True
            state.converged_at_iteration = k
            break
        if _diverging(state.distance_history):
            raise PicardDivergenceError(
                f"Picard distances increased for 3 consecutive iterations to {dist:.3g} (> 10x the first); "
                "the horizon may exceed the contraction window")
    state.current_flow = nu
    return state, result


def picard_solve(coeffs: CoefficientSet, policy: Policy, init: ParticleEnsemble, t0: float, T: float, steps: int,
                 max_iters: int, tol: float = 1e-3, seed: int = 0, *, window: Union[None, float, str] = None,
                 threads: int = 1) -> tuple[MeasureFlow, PicardState]:
    """Iterate ``nu <- Psi(nu)`` from the time-constant initial law.

    Stops at the first path-coupled distance below ``tol``.  With ``window``
    (a length, or ``"auto"`` for the analytic contraction window) the horizon
    is split into consecutive windows solved in turn, each starting from the
    terminal ensemble of the previous one and continuing its noise streams.
    """
    if max_iters < 1 or not tol > 0:
        raise ValueError("need max_iters >= 1 and tol > 0")
    if steps < 1 or not T > t0:
        raise ValueError("need steps >= 1 and T > t0")
    if window is None:
        state, _ = _solve_window(coeffs, policy, init, t0, T, steps, max_iters, tol, seed, 0, threads)
        return state.current_flow, state

    if window == "auto":
        window = contraction_window(coeffs.L, init.grid.total_mass)
    dt = (T - t0) / steps
    per_window = max(1, min(steps, int(np.floor(window / dt + 1e-9))))
    bounds = list(range(0, steps, per_window)) + [steps]
    total = PicardState(tol=tol, converged=True)
    ensemble = init
    paths = []
    for start, stop in zip(bounds[:-1], bounds[1:]):
        ws, result = _solve_window(coeffs, policy, ensemble, t0 + start * dt, t0 + stop * dt, stop - start,
                                   max_iters, tol, seed, start, threads)
        for dist in ws.distance_history:
            total.record(dist)
        total.converged &= ws.converged
        total.windows.append({"t_start": t0 + start * dt, "t_stop": t0 + stop * dt, **ws.to_dict()})
        flow = ws.current_flow
        paths.append(flow.paths if not paths else flow.paths[1:])
        ensemble = ensemble.with_positions(flow.paths[-1])
    if total.converged:
        total.converged_at_iteration = max(w["converged_at_iteration"] for w in total.windows)
    times = t0 + (T - t0) * np.arange(steps + 1) / steps
    total.current_flow = MeasureFlow(init.grid, times, paths=np.concatenate(paths))
    return total.current_flow, total


def contraction_estimate(coeffs: CoefficientSet, policy: Policy, init: ParticleEnsemble, nu1: MeasureFlow,
                         nu2: MeasureFlow, seed: int) -> float:
    """``d(Psi nu1, Psi nu2) / d(nu1, nu2)`` with synchronous noise (path-coupled distances)."""
    denom = path_distance(nu1, nu2)
    if denom == 0:
        raise ValueError("the two flows coincide; the ratio is undefined")
    return path_distance(apply_psi(coeffs, policy, init, nu1, seed), apply_psi(coeffs, policy, init, nu2, seed)) / denom


def predicted_ratio(coeffs: CoefficientSet, horizon: float, total_mass: float) -> float:
    """Upper bound ``sqrt(C(h) h)`` on the contraction ratio over a horizon ``h``."""
    return float(np.sqrt(contraction_constant(coeffs.L, horizon, total_mass) * horizon))
