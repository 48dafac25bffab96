"""Objective-evaluation environments shared by the optimizers.

Both environments expose the same surface: `estimate_rates` (one estimation
window = one evaluation), `probe_pair` (the two-half-window probe used by
best-response dynamics; two evaluations), and `objective`. Every evaluation
appends the window's log-geometric-mean objective to `objective_history`,
which is what approximation-ratio traces are built from.
"""

from __future__ import annotations

import numpy as np

from .channel import (
    RATE_FLOOR,
    SLOT_CHUNK,
    ChannelModel,
    RateEstimate,
    decode_received_powers,
    objective_geomean,
    received_power_matrix,
)
from .oracle import ConditionalRateTable, exact_expected_rate
from .topology import Topology


class _EnvBase:
    def __init__(self, eps_p: float):
        self.eps_p = eps_p
        self.objective_history: list[float] = []

    @property
    def evaluations(self) -> int:
        return len(self.objective_history)

    def _record(self, estimate: RateEstimate) -> RateEstimate:
        self.objective_history.append(objective_geomean(estimate.mean_rate).value)
        return estimate

    def objective(self, policy) -> float:
        return objective_geomean(self.estimate_rates(policy).mean_rate).value

    def objective_with_error(self, policy):
        """Objective estimate and its delta-method standard error."""
        est = self.estimate_rates(policy)
        value = objective_geomean(est.mean_rate).value
        rel = est.std_error / np.maximum(est.mean_rate, RATE_FLOOR)
        return value, float(np.sqrt((rel**2).sum()) / len(est.mean_rate))


class OracleEnv(_EnvBase):
    """Exact expected rates from a conditional rate table (noise-free)."""

    exact = True

    def __init__(self, table: ConditionalRateTable, eps_p: float = 1e-3):
        super().__init__(eps_p)
        self.table = table

    @property
    def n_devices(self) -> int:
        return self.table.n_devices

    def estimate_rates(self, policy, num_slots=None) -> RateEstimate:
        p = np.asarray(getattr(policy, "p", policy), dtype=float)
        mean = exact_expected_rate(self.table, p)
        return self._record(RateEstimate(mean, 0, np.zeros_like(mean)))

    def probe_pair(self, policy, device: int, probe_slots=None):
        p = np.asarray(getattr(policy, "p", policy), dtype=float).copy()
        with_i = self.estimate_rates(p)
        p_off = p.copy()
        p_off[device] = 0.0
        without_i = self.estimate_rates(p_off)
        return with_i, without_i


class MonteCarloEnv(_EnvBase):
    """Seeded Monte-Carlo rate estimation over simulated slots.

    Each call draws a fresh child RNG stream from the environment seed, so a
    fixed seed and call sequence reproduce results exactly. `probe_pair`
    shares random numbers between its two half-windows (same access and
    fading draws, the probed device muted in the second window), which keeps
    the probe's linear-system solve well conditioned at small p_i.
    """

    exact = False

    def __init__(
        self,
        model: ChannelModel,
        topology: Topology,
        num_slots: int = 20000,
        seed=0,
        eps_p: float = 1e-3,
    ):
        super().__init__(eps_p)
        if num_slots < 1:
            raise ValueError("num_slots must be >= 1")
        self.model = model
        self.topology = topology
        self.num_slots = num_slots
        self._seed_seq = (
            seed
            if isinstance(seed, np.random.SeedSequence)
            else np.random.SeedSequence(seed)
        )

    @property
    def n_devices(self) -> int:
        return self.topology.n_devices

    def _next_rng(self) -> np.random.Generator:
        return np.random.default_rng(self._seed_seq.spawn(1)[0])

    def estimate_rates(self, policy, num_slots=None) -> RateEstimate:
        from .channel import estimate_expected_rates

        slots = int(num_slots or self.num_slots)
        p = np.asarray(getattr(policy, "p", policy), dtype=float)
        est = estimate_expected_rates(
            self.model, self.topology, p, slots, self._next_rng()
        )
        return self._record(est)

    def probe_pair(self, policy, device: int, probe_slots=None):
        slots = int(probe_slots or self.num_slots)
        p = np.asarray(getattr(policy, "p", policy), dtype=float)
        n = self.topology.n_devices
        rng = self._next_rng()

        sums = np.zeros((2, n))
        sq = np.zeros((2, n))
        done = 0
        while done < slots:
            chunk = min(SLOT_CHUNK, slots - done)
            tx_with = rng.random((chunk, n)) < p
            # the second window reuses every access and fading draw with the
            # probed device muted, keeping the half-windows slot-aligned
            rx = received_power_matrix(self.model, self.topology, tx_with, rng=rng)
            for row in (0, 1):
                if row == 1:
                    rx[:, device, :] = 0.0
                rates = decode_received_powers(self.model, self.topology, rx)
                sums[row] += rates.sum(axis=0)
                sq[row] += (rates**2).sum(axis=0)
            done += chunk

        results = []
        for row in range(2):
            mean = sums[row] / slots
            if slots > 1:
                var = np.maximum(sq[row] - slots * mean**2, 0.0) / (slots - 1)
                se = np.sqrt(var / slots)
            else:
                se = np.zeros(n)
            results.append(self._record(RateEstimate(mean, slots, se)))
        return results[0], results[1]
