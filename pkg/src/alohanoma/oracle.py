"""Brute-force expected-rate oracle for small device counts.

Enumerates all transmitter subsets, tabulates each device's conditional
expected rate per subset, and evaluates expected rates exactly as the
polynomial

    Rbar_i(p) = sum_{S : i in S} rate_i(S) * prod_{j in S} p_j
                                          * prod_{k not in S} (1 - p_k).

Also runs numerical (finite-difference) checks of the log-concavity structure
of log Rbar_i and of the geometric-mean objective on 2- and 3-device
instances.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .channel import (
    RATE_FLOOR,
    ChannelModel,
    GeomeanObjective,
    objective_geomean,
    slot_rates_for_masks,
)
from .topology import Topology

ORACLE_MAX_DEVICES = 12


class CapacityExceededError(ValueError):
    """Raised when a subset enumeration would exceed the oracle size cap."""


@dataclass
class ConditionalRateTable:
    """Per-device conditional expected rates, indexed by transmitter subset.

    rates[S, i] is E[rate of device i | exactly the devices in bitmask S
    transmit] (bit i of S corresponds to device i); entries with i not in S
    are zero.
    """

    rates: np.ndarray

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=float)
        size, n = self.rates.shape
        if size != 2**n:
            raise ValueError("rates must have shape (2^N, N)")
        if np.any(self.rates < 0):
            raise ValueError("conditional rates must be nonnegative")

    @property
    def n_devices(self) -> int:
        return self.rates.shape[1]

    def entry(self, device: int, subset) -> float:
        """Conditional expected rate of `device` for an iterable subset."""
        mask = 0
        for j in subset:
            mask |= 1 << int(j)
        if not mask & (1 << device):
            raise ValueError("device must belong to the subset")
        return float(self.rates[mask, device])

    def solo_rate(self, device: int) -> float:
        return float(self.rates[1 << device, device])

    def pair_rate(self, device: int, other: int) -> float:
        return float(self.rates[(1 << device) | (1 << other), device])

    def to_json(self) -> str:
        entries = {}
        for mask in range(1, 2**self.n_devices):
            row = {
                str(i): self.rates[mask, i]
                for i in range(self.n_devices)
                if mask & (1 << i)
            }
            entries[str(mask)] = row
        return json.dumps({"n_devices": self.n_devices, "entries": entries})

    @classmethod
    def from_json(cls, text: str) -> "ConditionalRateTable":
        doc = json.loads(text)
        n = int(doc["n_devices"])
        rates = np.zeros((2**n, n))
        for mask_str, row in doc["entries"].items():
            for dev_str, rate in row.items():
                rates[int(mask_str), int(dev_str)] = float(rate)
        return cls(rates)


def build_conditional_table(
    model: ChannelModel,
    topology: Topology,
    fading_samples: int,
    seed=None,
) -> ConditionalRateTable:
    """Tabulate conditional expected rates by enumerating transmitter subsets.

    For random fading each subset's rates are averaged over `fading_samples`
    i.i.d. draws; the deterministic h=1 channel needs a single pass
    (fading_samples=1 is only allowed in that case).
    """
    n = topology.n_devices
    if n > ORACLE_MAX_DEVICES:
        raise CapacityExceededError(
            f"subset enumeration capped at N={ORACLE_MAX_DEVICES}, got N={n}"
        )
    if fading_samples < 1:
        raise ValueError("fading_samples must be >= 1")
    deterministic = model.fading == "none"
    if not deterministic and fading_samples < 2:
        raise ValueError("fading_samples=1 is only valid for deterministic fading")
    samples = 1 if deterministic else fading_samples
    rng = np.random.default_rng(seed)

    masks = np.arange(1, 2**n, dtype=np.int64)
    bits = ((masks[:, None] >> np.arange(n)[None, :]) & 1).astype(bool)

    rates = np.zeros((2**n, n))
    block = max(1, 4096 // samples)
    for start in range(0, len(masks), block):
        chunk_bits = bits[start : start + block]
        tx_mask = np.repeat(chunk_bits, samples, axis=0)
        slot_rates = slot_rates_for_masks(model, topology, tx_mask, rng=rng)
        per_subset = slot_rates.reshape(len(chunk_bits), samples, n).mean(axis=1)
        rates[masks[start : start + block]] = per_subset
    return ConditionalRateTable(rates)


def _subset_weights(policies: np.ndarray) -> np.ndarray:
    """Subset probabilities for a (K, N) batch of policies, shape (K, 2^N)."""
    k, n = policies.shape
    w = np.ones((k, 1))
    for i in range(n):
        pi = policies[:, i : i + 1]
        w = np.concatenate([w * (1.0 - pi), w * pi], axis=1)
    return w


def exact_expected_rate_batch(table: ConditionalRateTable, policies: np.ndarray) -> np.ndarray:
    """Expected rates for a (K, N) batch of policies, shape (K, N)."""
    policies = np.asarray(policies, dtype=float)
    if policies.ndim != 2 or policies.shape[1] != table.n_devices:
        raise ValueError("policies must have shape (K, N)")
    return _subset_weights(policies) @ table.rates


def exact_expected_rate(table: ConditionalRateTable, policy) -> np.ndarray:
    """Exact expected rate vector for one policy."""
    p = np.asarray(getattr(policy, "p", policy), dtype=float)
    return exact_expected_rate_batch(table, p[None, :])[0]


def exact_objective(table: ConditionalRateTable, policy, floor: float = RATE_FLOOR) -> GeomeanObjective:
    return objective_geomean(exact_expected_rate(table, policy), floor=floor)


def conditional_split(table: ConditionalRateTable, policy, j: int):
    """Condition the expected rates on device j's transmission.

    Returns (V, U): V[i] = E[rate_i | j transmits], U[i] = E[rate_i | j
    silent], both at the given probabilities for everyone else, so that
    Rbar_i = p_j V_i + (1 - p_j) U_i exactly.
    """
    p = np.asarray(getattr(policy, "p", policy), dtype=float).copy()
    p_on, p_off = p.copy(), p.copy()
    p_on[j], p_off[j] = 1.0, 0.0
    both = exact_expected_rate_batch(table, np.stack([p_on, p_off]))
    return both[0], both[1]


def _stencil_offsets(n: int, step: float):
    """Offsets for batched central-difference Hessians in n dimensions."""
    offsets = [np.zeros(n)]
    diag_at = {}
    for a in range(n):
        diag_at[a] = (len(offsets), len(offsets) + 1)
        e = np.zeros(n)
        e[a] = step
        offsets.extend([e, -e])
    cross_at = {}
    for a in range(n):
        for b in range(a + 1, n):
            ea, eb = np.zeros(n), np.zeros(n)
            ea[a], eb[b] = step, step
            cross_at[(a, b)] = len(offsets)
            offsets.extend([ea + eb, ea - eb, -ea + eb, -ea - eb])
    return np.stack(offsets), diag_at, cross_at


def _hessians_from_stencil(values: np.ndarray, diag_at, cross_at, n: int, step: float):
    """Assemble (K, N, N) Hessians from stencil values of shape (K, n_off)."""
    k = values.shape[0]
    hess = np.zeros((k, n, n))
    center = values[:, 0]
    for a in range(n):
        ip, im = diag_at[a]
        hess[:, a, a] = (values[:, ip] - 2 * center + values[:, im]) / step**2
    for (a, b), idx in cross_at.items():
        mixed = (
            values[:, idx]
            - values[:, idx + 1]
            - values[:, idx + 2]
            + values[:, idx + 3]
        ) / (4 * step**2)
        hess[:, a, b] = mixed
        hess[:, b, a] = mixed
    return hess


def finite_difference_hessians(
    f_batch: Callable[[np.ndarray], np.ndarray],
    points: np.ndarray,
    step: float = 1e-4,
):
    """Central-difference Hessians of a batched scalar function.

    f_batch maps (Q, N) points to (Q,) values. Returns (hessians (K, N, N),
    stencil_values (K, n_offsets)); column 0 of the stencil holds the center
    values.
    """
    points = np.asarray(points, dtype=float)
    k, n = points.shape
    offsets, diag_at, cross_at = _stencil_offsets(n, step)
    stencil = points[:, None, :] + offsets[None, :, :]
    values = f_batch(stencil.reshape(-1, n)).reshape(k, len(offsets))
    return _hessians_from_stencil(values, diag_at, cross_at, n, step), values


def _leading_minors(hessians: np.ndarray) -> np.ndarray:
    """Leading principal minors D_1..D_N for a (K, N, N) batch."""
    k, n, _ = hessians.shape
    minors = np.zeros((k, n))
    for order in range(1, n + 1):
        sub = hessians[:, :order, :order]
        minors[:, order - 1] = np.linalg.det(sub) if order > 1 else sub[:, 0, 0]
    return minors


@dataclass
class ConcavityCheck:
    """Minor-sign test results for one scalar function over the grid."""

    label: str
    minors: np.ndarray          # (K, N)
    passed: np.ndarray          # (K,) bool
    hessians: np.ndarray        # (K, N, N)
    skipped: np.ndarray         # (K,) bool, rate under floor somewhere in stencil


@dataclass
class ConcavityReport:
    """Numerical log-concavity verification over a probability grid."""

    grid_points: np.ndarray
    checks: list
    c_values: Optional[np.ndarray] = None       # N=3 interference conditions, per device
    pair_bounds: Optional[np.ndarray] = None    # (N, N): bound on p_col from device row's condition
    box_upper: Optional[np.ndarray] = None      # effective per-coordinate upper bounds
    c_condition_met: bool = True
    notes: list = field(default_factory=list)

    @property
    def all_pass(self) -> bool:
        return all(check.passed[~check.skipped].all() for check in self.checks)

    @property
    def n_skipped(self) -> int:
        return int(sum(check.skipped.sum() for check in self.checks))

    def rows(self):
        """Flat (label, point..., minors..., passed) rows for CSV export."""
        out = []
        for check in self.checks:
            for idx in range(len(self.grid_points)):
                if check.skipped[idx]:
                    continue
                out.append(
                    (check.label,)
                    + tuple(self.grid_points[idx])
                    + tuple(check.minors[idx])
                    + (bool(check.passed[idx]),)
                )
        return out


def theorem_bounds_three_users(table: ConditionalRateTable):
    """Interference conditions and probability bounds for a 3-device table.

    For each device i with the other two labelled j, k:
      C_i   = A_i - B_i^j - B_i^k + C_i^{jk}
      disc  = sqrt(|A_i C_i^{jk} - B_i^j B_i^k|)
      bound on p_j = (A_i - B_i^k - disc) / C_i
      bound on p_k = (A_i - B_i^j - disc) / C_i

    Returns (c_values (3,), pair_bounds (3, 3) with NaN on the diagonal).
    """
    if table.n_devices != 3:
        raise ValueError("three-device table required")
    c_values = np.zeros(3)
    bounds = np.full((3, 3), np.nan)
    for i in range(3):
        j, k = [d for d in range(3) if d != i]
        a = table.solo_rate(i)
        b_j = table.pair_rate(i, j)
        b_k = table.pair_rate(i, k)
        c_jk = table.entry(i, (i, j, k))
        c_i = a - b_j - b_k + c_jk
        c_values[i] = c_i
        if c_i > 0:
            disc = np.sqrt(abs(a * c_jk - b_j * b_k))
            bounds[i, j] = (a - b_k - disc) / c_i
            bounds[i, k] = (a - b_j - disc) / c_i
    return c_values, bounds


def verify_concavity(
    table: ConditionalRateTable,
    grid_resolution: int = 25,
    fd_step: float = 1e-4,
    rate_floor: float = RATE_FLOOR,
) -> ConcavityReport:
    """Check negative definiteness of the log-rate and objective Hessians.

    For 2 devices the grid covers (0, 1]^2. For 3 devices the grid covers the
    box where strict log-concavity is declared: each coordinate is capped by
    the interference-condition bounds of the other two devices (when every
    C_i > 0; otherwise the report carries c_condition_met=False and no grid
    checks). The declared box is open and the bounds can be tight (the
    determinant crosses zero exactly at a corner), so capped axes keep half a
    grid cell of interior margin. Each grid point must satisfy the
    alternating-sign test (-1)^k D_k > 0 on the leading principal minors, for
    every log Rbar_i and for the objective. Points where any stencil rate
    falls at or under the floor are skipped and counted.
    """
    n = table.n_devices
    if n not in (2, 3):
        raise ValueError("concavity verification supports 2 or 3 devices")
    if grid_resolution < 2:
        raise ValueError("grid_resolution must be >= 2")

    report = ConcavityReport(grid_points=np.zeros((0, n)), checks=[])
    upper = np.ones(n)
    if n == 3:
        c_values, pair_bounds = theorem_bounds_three_users(table)
        report.c_values = c_values
        report.pair_bounds = pair_bounds
        if np.any(c_values <= 0):
            report.c_condition_met = False
            report.notes.append(
                "interference condition C_i > 0 fails for some device; no declared box"
            )
            return report
        margin = 1.0 - 0.5 / grid_resolution
        for c in range(3):
            upper[c] = min(1.0, np.nanmin(pair_bounds[:, c]) * margin)
        report.box_upper = upper.copy()
        if np.any(upper <= 0):
            report.c_condition_met = False
            report.notes.append("declared box is empty (a bound is nonpositive)")
            return report

    lo = 1.0 / grid_resolution
    axes = [np.linspace(min(lo, upper[c] / 2.0), upper[c], grid_resolution) for c in range(n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.column_stack([m.ravel() for m in mesh])
    report.grid_points = points

    # one rate evaluation over the shared stencil serves every check
    offsets, diag_at, cross_at = _stencil_offsets(n, fd_step)
    stencil = (points[:, None, :] + offsets[None, :, :]).reshape(-1, n)
    rates = exact_expected_rate_batch(table, stencil).reshape(
        len(points), len(offsets), n
    )
    log_rates = np.log(np.maximum(rates, rate_floor))
    under_floor = rates <= rate_floor  # (K, n_off, N)

    signs = np.array([(-1.0) ** k for k in range(1, n + 1)])
    labelled = [(f"log_rate_{i}", log_rates[:, :, i], under_floor[:, :, i].any(axis=1))
                for i in range(n)]
    labelled.append(("objective", log_rates.mean(axis=2), under_floor.any(axis=(1, 2))))
    for label, values, skipped in labelled:
        hess = _hessians_from_stencil(values, diag_at, cross_at, n, fd_step)
        minors = _leading_minors(hess)
        passed = (minors * signs[None, :] > 0).all(axis=1)
        report.checks.append(ConcavityCheck(label, minors, passed, hess, skipped))
    return report


def midpoint_concavity_check(
    table: ConditionalRateTable,
    n_samples: int = 1000,
    seed=0,
    eps_p: float = 1e-3,
    tol: float = 1e-9,
):
    """Sampled midpoint-concavity probe of the exact objective for any N.

    Returns (violations, n_samples). This is evidence, not a guarantee; the
    concavity of the objective beyond 3 devices is only conjectured.
    """
    rng = np.random.default_rng(seed)
    n = table.n_devices
    x = rng.uniform(eps_p, 1.0, size=(n_samples, n))
    y = rng.uniform(eps_p, 1.0, size=(n_samples, n))
    mid = 0.5 * (x + y)
    rates = exact_expected_rate_batch(table, np.vstack([x, y, mid]))
    vals = np.log(np.maximum(rates, RATE_FLOOR)).mean(axis=1)
    fx, fy, fm = np.split(vals, 3)
    violations = int(np.sum(fm < 0.5 * (fx + fy) - tol))
    return violations, n_samples
