"""Distributed best-response dynamics with action aggregation.

Each update probes how sensitive every other device k is to the updating
device i (the ratio Q_k of rate lost when i transmits), compresses those
sensitivities into the five power sums J_n = sum_k Q_k^n, and moves p_i to
the fixed point of

    p = min( 1 / <J, (1, p, p^2, p^3, p^4)>, 1 ),

the stationarity condition of the common log-geometric-mean payoff under a
fifth-order expansion. Devices update one at a time; the loop stops when the
objective stalls or the iteration cap is hit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .channel import RATE_FLOOR, objective_geomean

K_AGGREGATOR = 5


@dataclass
class AggregatorVector:
    """Power sums J_n = sum_k Q_k^n for n = 1..5, plus per-user diagnostics.

    `excluded` lists neighbors whose baseline rate was under the floor (their
    sensitivity is undefined; they are starved regardless of the updating
    device).
    """

    j: np.ndarray
    q: dict
    excluded: tuple = ()

    def __post_init__(self):
        self.j = np.asarray(self.j, dtype=float)
        if self.j.shape != (K_AGGREGATOR,):
            raise ValueError(f"aggregator must have {K_AGGREGATOR} entries")
        if np.any(self.j < 0):
            raise ValueError("aggregator entries must be nonnegative")

    @property
    def is_zero(self) -> bool:
        return bool(np.all(self.j == 0.0))


@dataclass
class BrConfig:
    """Knobs for the best-response loop.

    eps_t is the objective-stall tolerance for termination; probe_slots the
    per-half-window slot count for Monte-Carlo probing (ignored by the exact
    oracle); selection is "random" (uniform with replacement, seeded) or
    "round-robin" for deterministic tests.
    """

    eps_t: float = 1e-6
    eps_p: float = 1e-3
    probe_slots: Optional[int] = 20000
    max_outer_iters: int = 500
    eps_fp: float = 1e-9
    fp_max_iters: int = 1000
    selection: str = "random"
    rate_floor: float = RATE_FLOOR

    def __post_init__(self):
        if self.eps_t <= 0 or self.eps_p <= 0 or self.eps_fp <= 0:
            raise ValueError("tolerances must be positive")
        if self.selection not in ("random", "round-robin"):
            raise ValueError(f"unknown selection mode {self.selection!r}")


class ProbeResult(NamedTuple):
    v: np.ndarray          # conditional expected rates given i transmits
    u: np.ndarray          # conditional expected rates given i silent
    device: int
    degenerate: tuple      # neighbors with baseline rate under the floor
    slots_used: int


def probe_conditional_rates(env, device: int, policy, probe_slots=None) -> ProbeResult:
    """Two-phase probe of every neighbor's conditional rates w.r.t. `device`.

    Phase 1 estimates rates at the current policy; phase 2 re-estimates with
    the device muted (p_i = 0). Then U_k is the phase-2 rate and
    V_k = (Rbar_k(p_i) - (1 - p_i) U_k) / p_i. Entry `device` of v holds the
    device's own transmit-conditional rate; its u entry is 0.
    """
    p = np.asarray(getattr(policy, "p", policy), dtype=float)
    p_i = float(p[device])
    if p_i < env.eps_p - 1e-15:
        raise ValueError(f"probing device must transmit with p >= {env.eps_p}")
    est_with, est_without = env.probe_pair(p, device, probe_slots)
    u = est_without.mean_rate.copy()
    v = (est_with.mean_rate - (1.0 - p_i) * u) / p_i
    u[device] = 0.0
    v[device] = est_with.mean_rate[device] / p_i
    degenerate = tuple(
        int(k) for k in range(len(p)) if k != device and u[k] <= RATE_FLOOR
    )
    slots = getattr(est_with, "slots", 0)
    return ProbeResult(v, u, device, degenerate, slots)


def compute_aggregator(
    v: np.ndarray,
    u: np.ndarray,
    exclude=(),
    rate_floor: float = RATE_FLOOR,
) -> AggregatorVector:
    """Aggregate neighbor sensitivities Q_k = (U_k - V_k)/U_k into J.

    Q is clamped to [0, 1]: estimation noise can produce V_k > U_k or
    negative values, while the model says interference only degrades rates.
    Neighbors with U_k at or under the floor are excluded (reported), not
    divided by ~0. An all-excluded probe yields the zero aggregator, treated
    downstream as "no interference".
    """
    v = np.asarray(v, dtype=float)
    u = np.asarray(u, dtype=float)
    q = {}
    excluded = []
    for k in range(len(u)):
        if k in exclude:
            continue
        if not np.isfinite(u[k]) or u[k] <= rate_floor:
            excluded.append(k)
            continue
        q[k] = float(np.clip((u[k] - v[k]) / u[k], 0.0, 1.0))
    q_vals = np.array(list(q.values()))
    if len(q_vals):
        j = np.array([(q_vals**n).sum() for n in range(1, K_AGGREGATOR + 1)])
    else:
        j = np.zeros(K_AGGREGATOR)
    return AggregatorVector(j, q, tuple(excluded))


class FixedPointResult(NamedTuple):
    p: float
    iterations: int
    converged: bool
    damped: bool


def fixed_point_best_response(
    aggregator,
    p_init: float,
    eps_fp: float = 1e-9,
    max_iters: int = 1000,
) -> FixedPointResult:
    """Iterate p <- min(1 / <J, (1, p, .., p^4)>, 1) until |delta p| < eps_fp.

    A zero aggregator means no interference and returns 1 immediately. The
    map is a contraction when at least two neighbors contribute; with a
    single dominant neighbor it can stop contracting, so persistent
    non-shrinking sign-alternating steps switch the update to the damped form
    p <- (p + min(F(p), 1))/2. The iteration cap is a safety net; a cap hit
    is reported via converged=False.
    """
    j = np.asarray(getattr(aggregator, "j", aggregator), dtype=float)
    if np.all(j <= 0.0):
        return FixedPointResult(1.0, 0, True, False)

    p = float(p_init)
    damped = False
    prev_delta = None
    osc_count = 0
    for it in range(1, max_iters + 1):
        powers = p ** np.arange(K_AGGREGATOR)
        f = 1.0 / float(j @ powers)
        target = min(f, 1.0)
        step = 0.5 * (p + target) if damped else target
        delta = step - p
        if prev_delta is not None and not damped:
            if delta * prev_delta < 0 and abs(delta) >= abs(prev_delta) * (1 - 1e-3):
                osc_count += 1
                if osc_count >= 2:
                    damped = True
            else:
                osc_count = 0
        prev_delta = delta
        p = step
        if abs(delta) < eps_fp:
            return FixedPointResult(p, it, True, damped)
    return FixedPointResult(p, max_iters, False, damped)


@dataclass
class BrIteration:
    iteration: int
    user: int
    p_new: float
    objective: float
    fp_iterations: int
    probe_slots_used: int


@dataclass
class BrTrace:
    initial_objective: float
    iterations: list = field(default_factory=list)

    def objectives(self) -> np.ndarray:
        return np.array(
            [self.initial_objective] + [row.objective for row in self.iterations]
        )

    def csv_rows(self):
        header = ("iter", "user", "p_new", "objective", "fp_iters", "probe_slots_used")
        rows = [
            (r.iteration, r.user, r.p_new, r.objective, r.fp_iterations, r.probe_slots_used)
            for r in self.iterations
        ]
        return header, rows


@dataclass
class BrResult:
    policy: np.ndarray
    trace: BrTrace
    converged: bool
    best_objective: float


def run_best_response(env, policy0, config: BrConfig, seed=0) -> BrResult:
    """Sequential best-response loop: probe, aggregate, fixed-point update.

    One device updates per iteration (seeded uniform picks, or round-robin).
    Terminates once every device has been re-picked since the last
    objective change above eps_t without improving (a single quiet iteration
    is not enough: with exact rates, re-picking the just-updated device
    always changes nothing), or at max_outer_iters, in which case the best
    policy seen so far is returned with converged=False.

    With exact rates (env.exact) an update that strictly lowers the objective
    is reverted: the fifth-order stationarity condition can bias the fixed
    point off the true per-user argmax by a hair, and a deviation must
    improve the common payoff to count. Noisy estimates are accepted as-is.
    """
    n = env.n_devices
    p = np.asarray(getattr(policy0, "p", policy0), dtype=float).copy()
    if p.shape != (n,):
        raise ValueError(f"initial policy must have {n} entries")
    if np.any(p < config.eps_p - 1e-15) or np.any(p > 1.0 + 1e-15):
        raise ValueError("initial policy outside the action space")
    if n >= 2 and config.eps_p > 1.0 / (K_AGGREGATOR * (n - 1)) + 1e-15:
        raise ValueError(
            f"eps_p must be <= 1/(K(N-1)) = {1.0 / (K_AGGREGATOR * (n - 1)):.3g}"
        )
    rng = np.random.default_rng(seed)

    est = env.estimate_rates(p)
    obj = objective_geomean(est.mean_rate, config.rate_floor).value
    trace = BrTrace(initial_objective=obj)
    best_obj, best_p = obj, p.copy()
    quiet_users: set = set()
    converged = False

    exact_env = bool(getattr(env, "exact", False))
    for it in range(config.max_outer_iters):
        if config.selection == "round-robin":
            i = it % n
        else:
            i = int(rng.integers(n))
        probe = probe_conditional_rates(env, i, p, config.probe_slots)
        agg = compute_aggregator(
            probe.v, probe.u, exclude=(i,), rate_floor=config.rate_floor
        )
        fp = fixed_point_best_response(agg, p[i], config.eps_fp, config.fp_max_iters)
        old_pi = p[i]
        p[i] = float(np.clip(fp.p, config.eps_p, 1.0))

        est = env.estimate_rates(p)
        new_obj = objective_geomean(est.mean_rate, config.rate_floor).value
        if exact_env and new_obj < obj:
            p[i] = old_pi
            new_obj = obj
        trace.iterations.append(
            BrIteration(it, i, p[i], new_obj, fp.iterations, probe.slots_used)
        )
        if new_obj > best_obj:
            best_obj, best_p = new_obj, p.copy()
        if abs(new_obj - obj) <= config.eps_t:
            quiet_users.add(i)
        else:
            quiet_users = set()
        obj = new_obj
        if len(quiet_users) == n:
            converged = True
            break

    final = p if converged else best_p
    return BrResult(final, trace, converged, best_obj)
