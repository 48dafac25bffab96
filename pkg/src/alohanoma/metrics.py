"""Evaluation metrics: fairness, approximation ratios, NOMA gain."""

from __future__ import annotations

import numpy as np


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value for the given input."""


def jain_fairness(rates) -> float:
    """Jain index (sum r)^2 / (N sum r^2): 1 at perfect equality, 1/N when a
    single device monopolizes the channel. Scale invariant."""
    r = np.asarray(rates, dtype=float)
    if r.ndim != 1 or len(r) < 1:
        raise ValueError("rates must be a nonempty vector")
    if np.any(r < 0):
        raise ValueError("rates must be nonnegative")
    denom = len(r) * float((r**2).sum())
    if denom == 0.0:
        raise UndefinedMetricError("Jain index undefined for all-zero rates")
    return float(r.sum()) ** 2 / denom


def approximation_ratio(objective_trace, reference_objective: float) -> np.ndarray:
    """Per-evaluation best-so-far ratios against a reference optimum.

    Both inputs are log-geometric-mean objectives; ratios are taken on the
    exp scale (geometric-mean rate), where ratio-of-values is meaningful:
    ratio_t = exp(best_so_far_t - reference).
    """
    trace = np.asarray(objective_trace, dtype=float)
    if trace.ndim != 1 or len(trace) < 1:
        raise ValueError("objective trace must be a nonempty vector")
    best = np.maximum.accumulate(trace)
    return np.exp(best - reference_objective)


def evaluations_to_ratio(ratios, threshold: float):
    """First 1-based evaluation index whose ratio reaches threshold, or None."""
    ratios = np.asarray(ratios, dtype=float)
    hits = np.nonzero(ratios >= threshold)[0]
    return int(hits[0]) + 1 if len(hits) else None


def noma_gain(policy_with, policy_without, env_with, env_without) -> float:
    """Relative geometric-mean rate gain of SIC decoding.

    Each policy is evaluated in its own decode mode; the gain is
    exp(objective_with) / exp(objective_without) - 1.
    """
    obj_with = env_with.objective(np.asarray(getattr(policy_with, "p", policy_with)))
    obj_without = env_without.objective(
        np.asarray(getattr(policy_without, "p", policy_without))
    )
    return noma_gain_from_objectives(obj_with, obj_without)


def noma_gain_from_objectives(objective_with: float, objective_without: float) -> float:
    return float(np.expm1(objective_with - objective_without))
