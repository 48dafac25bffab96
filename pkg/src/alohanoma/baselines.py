"""Derivative-free baseline maximizers over the policy box [eps_p, 1]^N."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class OptimizerBudget:
    max_evaluations: int = 1000
    seed: int = 0
    initial_policy: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.max_evaluations < 1:
            raise ValueError("max_evaluations must be >= 1")


class _BudgetExhausted(Exception):
    pass


class _Tracker:
    """Counts evaluations, records (index, value, best-so-far)."""

    def __init__(self, env, limit: int):
        self.env = env
        self.limit = limit
        self.trace = []
        self.best_value = -np.inf
        self.best_policy = None

    def __call__(self, x: np.ndarray) -> float:
        if len(self.trace) >= self.limit:
            raise _BudgetExhausted
        value = self.env.objective(x)
        if value > self.best_value:
            self.best_value = value
            self.best_policy = x.copy()
        self.trace.append((len(self.trace) + 1, value, self.best_value))
        return value


def nelder_mead_maximize(env, budget: OptimizerBudget):
    """Textbook simplex search (reflection 1, expansion 2, contraction 1/2,
    shrink 1/2) on the objective, with proposals projected onto the box.

    Stops at the evaluation budget or once the simplex diameter falls under
    1e-9. Returns (best policy, trace of (eval_index, objective, best)).
    """
    n = env.n_devices
    eps_p = env.eps_p
    rng = np.random.default_rng(budget.seed)
    if budget.initial_policy is not None:
        x0 = np.asarray(budget.initial_policy, dtype=float).copy()
    else:
        x0 = rng.uniform(eps_p, 1.0, size=n)

    def project(x):
        return np.clip(x, eps_p, 1.0)

    track = _Tracker(env, budget.max_evaluations)

    # initial simplex: x0 plus +0.1 per coordinate (flipped to -0.1 when the
    # clip would duplicate x0)
    vertices = [project(x0)]
    for i in range(n):
        v = x0.copy()
        v[i] = v[i] + 0.1 if v[i] + 0.1 <= 1.0 else v[i] - 0.1
        vertices.append(project(v))
    vertices = np.asarray(vertices)

    try:
        values = np.array([track(v) for v in vertices])
        while True:
            order = np.argsort(-values)
            vertices, values = vertices[order], values[order]
            diameter = max(
                np.linalg.norm(vertices[i] - vertices[0]) for i in range(1, n + 1)
            )
            if diameter < 1e-9:
                break
            centroid = vertices[:-1].mean(axis=0)
            worst = vertices[-1]
            xr = project(centroid + (centroid - worst))
            fr = track(xr)
            if fr > values[0]:
                xe = project(centroid + 2.0 * (centroid - worst))
                fe = track(xe)
                if fe > fr:
                    vertices[-1], values[-1] = xe, fe
                else:
                    vertices[-1], values[-1] = xr, fr
            elif fr > values[-2]:
                vertices[-1], values[-1] = xr, fr
            else:
                xc = project(centroid + 0.5 * (worst - centroid))
                fc = track(xc)
                if fc > values[-1]:
                    vertices[-1], values[-1] = xc, fc
                else:
                    for i in range(1, n + 1):
                        vertices[i] = project(
                            vertices[0] + 0.5 * (vertices[i] - vertices[0])
                        )
                        values[i] = track(vertices[i])
    except _BudgetExhausted:
        pass

    return track.best_policy, track.trace


def random_search_maximize(env, budget: OptimizerBudget):
    """Best of budget-many uniform samples over the box."""
    n = env.n_devices
    rng = np.random.default_rng(budget.seed)
    track = _Tracker(env, budget.max_evaluations)
    try:
        if budget.initial_policy is not None:
            track(np.clip(np.asarray(budget.initial_policy, dtype=float), env.eps_p, 1.0))
        while True:
            track(rng.uniform(env.eps_p, 1.0, size=n))
    except _BudgetExhausted:
        pass
    return track.best_policy, track.trace
