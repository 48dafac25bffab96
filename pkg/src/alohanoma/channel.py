"""Slotted-Aloha uplink simulation with NOMA/SIC decoding.

A slot works as follows: each device transmits independently with its own
probability; every base station ranks all network-wide received signals by
power, attempts to decode the strongest one (if the sender is associated with
it and the signal-to-noise-plus-interference ratio clears the threshold), then
with NOMA enabled cancels it and attempts the second strongest under the same
rules. Decoded signals earn Shannon-bound rates W*log2(1+SNIR) for that slot.

Monte-Carlo expected rates and the log-geometric-mean objective are estimated
by `estimate_expected_rates` / `objective_geomean`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np

from .topology import Topology

SPEED_OF_LIGHT = 2.998e8  # m/s

#: Chunk of slots simulated per vectorized pass; fixed so that results are
#: independent of memory limits and reproducible for a given seed.
SLOT_CHUNK = 4096

RATE_FLOOR = 1e-12


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0) * 1e-3


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


@dataclass(frozen=True)
class ChannelModel:
    """Physical-layer constants and the fading/decode configuration.

    `snir_threshold` is the linear (dimensionless) decode threshold. `fading`
    is "rayleigh" for i.i.d. unit-mean exponential power fading per
    (device, BS, slot), or "none" for the deterministic h=1 channel used by
    exact-oracle cross-checks.
    """

    tx_power_w: float = 1.0                 # 30 dBm
    noise_floor_w: float = 1e-13            # -100 dBm
    path_loss_exponent: float = 2.0
    carrier_frequency_hz: float = 900e6
    reference_distance_m: float = 1.0
    bandwidth_hz: float = 1.0
    snir_threshold: float = db_to_linear(-5.1)
    fading: str = "rayleigh"
    noma_enabled: bool = True

    def __post_init__(self):
        for name in (
            "tx_power_w",
            "noise_floor_w",
            "path_loss_exponent",
            "carrier_frequency_hz",
            "reference_distance_m",
            "bandwidth_hz",
            "snir_threshold",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.fading not in ("rayleigh", "none"):
            raise ValueError(f"unknown fading model {self.fading!r}")

    @property
    def wavelength_m(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency_hz

    def base_rx_power(self, distance):
        """Received power in watts at unit fading for the given distance(s).

        Free-space form (lambda/4pi)^alpha * P_TX * max(d, d0)^-alpha; the
        clamp at the reference distance keeps the near field bounded.
        """
        d = np.maximum(np.asarray(distance, dtype=float), self.reference_distance_m)
        c0 = (self.wavelength_m / (4.0 * math.pi)) ** self.path_loss_exponent
        return c0 * self.tx_power_w * d ** (-self.path_loss_exponent)


def received_power(model: ChannelModel, distance: float, fading: float) -> float:
    """Received power for one link: path loss at `distance` scaled by `fading`."""
    if distance < 0:
        raise ValueError("distance must be nonnegative")
    if fading < 0:
        raise ValueError("fading must be nonnegative")
    return float(model.base_rx_power(distance)) * fading


@dataclass
class TransmissionPolicy:
    """Per-device transmission probabilities, floored at eps_p to keep the
    action space compact."""

    p: np.ndarray
    eps_p: float = 1e-3

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        if self.eps_p <= 0:
            raise ValueError("eps_p must be positive")
        if self.p.ndim != 1 or len(self.p) < 1:
            raise ValueError("policy must be a nonempty vector")
        if np.any(self.p < self.eps_p - 1e-15) or np.any(self.p > 1.0 + 1e-15):
            raise ValueError(f"probabilities must lie in [{self.eps_p}, 1]")

    def __len__(self) -> int:
        return len(self.p)


def _policy_vector(policy, n: int) -> np.ndarray:
    p = policy.p if isinstance(policy, TransmissionPolicy) else np.asarray(policy, dtype=float)
    if p.shape != (n,):
        raise ValueError(f"policy has shape {p.shape}, expected ({n},)")
    return p


@dataclass
class SlotOutcome:
    """Result of decoding one slot.

    rx_order[m] lists the transmitting devices sorted by received power at BS
    m, strongest first (ties broken by device index). decoded/rates are
    per-device over the whole network.
    """

    transmitters: tuple
    rx_order: list
    decoded: np.ndarray
    rates: np.ndarray


class RateEstimate(NamedTuple):
    mean_rate: np.ndarray
    slots: int
    std_error: np.ndarray


def decode_slot(
    model: ChannelModel,
    topology: Topology,
    transmitter_set: Sequence[int],
    fading_draws: Optional[Mapping] = None,
) -> SlotOutcome:
    """Decode one slot for a fixed transmitter set.

    `fading_draws` maps (device, bs) to the fading realization for every
    transmitter; pass None for the deterministic h=1 channel. At each BS the
    interference sum runs over all transmitters network-wide. The strongest
    signal decodes iff its sender is associated with that BS and SNIR_1 clears
    the threshold; the second decodes iff NOMA is enabled, the first decoded,
    its sender is associated, and SNIR_2 clears the threshold. Without NOMA
    only the strongest signal may decode.
    """
    n, m_count = topology.n_devices, topology.n_base_stations
    tx = sorted(set(int(i) for i in transmitter_set))
    if any(i < 0 or i >= n for i in tx):
        raise ValueError("transmitter set contains an unknown device index")

    dist = topology.distances()
    power = {}
    for i in tx:
        for m in range(m_count):
            if fading_draws is None:
                h = 1.0
            else:
                if (i, m) not in fading_draws:
                    raise ValueError(f"missing fading draw for device {i}, BS {m}")
                h = float(fading_draws[(i, m)])
            power[(i, m)] = received_power(model, float(dist[i, m]), h)

    decoded = np.zeros(n, dtype=bool)
    rates = np.zeros(n, dtype=float)
    rx_order = []
    for m in range(m_count):
        order = sorted(tx, key=lambda i: (-power[(i, m)], i))
        rx_order.append(order)
        if not order:
            continue
        total = sum(power[(i, m)] for i in tx)
        first = order[0]
        p1 = power[(first, m)]
        snir1 = p1 / (model.noise_floor_w + total - p1)
        first_ok = (
            topology.association[first] == m and snir1 >= model.snir_threshold
        )
        if first_ok:
            decoded[first] = True
            rates[first] = model.bandwidth_hz * math.log2(1.0 + snir1)
        if model.noma_enabled and first_ok and len(order) > 1:
            second = order[1]
            p2 = power[(second, m)]
            snir2 = p2 / (model.noise_floor_w + total - p1 - p2)
            if topology.association[second] == m and snir2 >= model.snir_threshold:
                decoded[second] = True
                rates[second] = model.bandwidth_hz * math.log2(1.0 + snir2)
    return SlotOutcome(tuple(tx), rx_order, decoded, rates)


def simulate_slot(
    model: ChannelModel,
    topology: Topology,
    policy: Union[TransmissionPolicy, np.ndarray],
    rng,
) -> SlotOutcome:
    """Draw one slot: Bernoulli channel access, fading per (transmitter, BS)."""
    rng = np.random.default_rng(rng)
    p = _policy_vector(policy, topology.n_devices)
    tx = np.nonzero(rng.random(len(p)) < p)[0]
    draws = {}
    for i in tx:
        for m in range(topology.n_base_stations):
            h = rng.standard_exponential() if model.fading == "rayleigh" else 1.0
            draws[(int(i), m)] = h
    return decode_slot(model, topology, tx, draws)


def received_power_matrix(
    model: ChannelModel,
    topology: Topology,
    tx_mask: np.ndarray,
    rng=None,
    fading: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Per-slot received powers (S, N, M) for a batch of transmitter sets.

    Fading is drawn per transmitting (slot, device, BS) from `rng` unless an
    explicit (S, N, M) array is supplied.
    """
    tx_mask = np.asarray(tx_mask, dtype=bool)
    s_count, n = tx_mask.shape
    m_count = topology.n_base_stations
    if n != topology.n_devices:
        raise ValueError("tx_mask width must equal the device count")
    base = model.base_rx_power(topology.distances())  # (N, M)

    if fading is not None:
        return tx_mask[:, :, None] * fading * base[None, :, :]
    if model.fading == "none":
        return tx_mask[:, :, None] * base[None, :, :]
    if rng is None:
        raise ValueError("rng required for random fading")
    rx = np.zeros((s_count, n, m_count))
    rows, cols = np.nonzero(tx_mask)
    if len(rows):
        h = rng.standard_exponential((len(rows), m_count))
        rx[rows, cols, :] = h * base[cols, :]
    return rx


def decode_received_powers(model: ChannelModel, topology: Topology, rx: np.ndarray) -> np.ndarray:
    """Per-slot rates (S, N) from received powers (S, N, M); mirrors
    decode_slot exactly."""
    s_count, n, m_count = rx.shape
    total = rx.sum(axis=1)  # (S, M)
    first = rx.argmax(axis=1)  # ties -> lowest device index
    p1 = np.take_along_axis(rx, first[:, None, :], axis=1)[:, 0, :]
    masked = rx.copy()
    np.put_along_axis(masked, first[:, None, :], -1.0, axis=1)
    second = masked.argmax(axis=1)
    p2 = np.take_along_axis(rx, second[:, None, :], axis=1)[:, 0, :]

    noise = model.noise_floor_w
    with np.errstate(divide="ignore", invalid="ignore"):
        snir1 = p1 / (noise + total - p1)
        snir2 = p2 / (noise + total - p1 - p2)

    bs_index = np.arange(m_count)[None, :]
    assoc = topology.association
    dec1 = (assoc[first] == bs_index) & (snir1 >= model.snir_threshold) & (p1 > 0)
    if model.noma_enabled:
        dec2 = (
            dec1
            & (assoc[second] == bs_index)
            & (snir2 >= model.snir_threshold)
            & (p2 > 0)
        )
    else:
        dec2 = np.zeros_like(dec1)

    w = model.bandwidth_hz
    rates = np.zeros((s_count, n))
    slot_idx = np.arange(s_count)
    for m in range(m_count):
        sel = dec1[:, m]
        rates[slot_idx[sel], first[sel, m]] = w * np.log2(1.0 + snir1[sel, m])
        sel = dec2[:, m]
        rates[slot_idx[sel], second[sel, m]] = w * np.log2(1.0 + snir2[sel, m])
    return rates


def slot_rates_for_masks(
    model: ChannelModel,
    topology: Topology,
    tx_mask: np.ndarray,
    rng=None,
    fading: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Vectorized per-slot rates for a batch of transmitter sets."""
    rx = received_power_matrix(model, topology, tx_mask, rng=rng, fading=fading)
    return decode_received_powers(model, topology, rx)


def estimate_expected_rates(
    model: ChannelModel,
    topology: Topology,
    policy: Union[TransmissionPolicy, np.ndarray],
    num_slots: int,
    rng,
) -> RateEstimate:
    """Monte-Carlo per-device expected rates over `num_slots` slots.

    std_error is the per-device sample standard deviation divided by
    sqrt(num_slots) (zero when num_slots < 2).
    """
    if num_slots < 1:
        raise ValueError("num_slots must be >= 1")
    rng = np.random.default_rng(rng)
    p = _policy_vector(policy, topology.n_devices)
    n = len(p)
    total = np.zeros(n)
    total_sq = np.zeros(n)
    done = 0
    while done < num_slots:
        chunk = min(SLOT_CHUNK, num_slots - done)
        tx_mask = rng.random((chunk, n)) < p
        rates = slot_rates_for_masks(model, topology, tx_mask, rng=rng)
        total += rates.sum(axis=0)
        total_sq += (rates**2).sum(axis=0)
        done += chunk
    mean = total / num_slots
    if num_slots > 1:
        var = np.maximum(total_sq - num_slots * mean**2, 0.0) / (num_slots - 1)
        std_error = np.sqrt(var / num_slots)
    else:
        std_error = np.zeros(n)
    return RateEstimate(mean, num_slots, std_error)


class GeomeanObjective(NamedTuple):
    value: float
    floored: bool

    def __float__(self) -> float:
        return self.value


def objective_geomean(rates, floor: float = RATE_FLOOR) -> GeomeanObjective:
    """Log of the geometric mean of the rates: (1/N) sum log max(rate, floor).

    The floor keeps the value finite when a device is starved; `floored` flags
    that the floor was applied somewhere.
    """
    r = np.asarray(rates, dtype=float)
    if r.ndim != 1 or len(r) < 1:
        raise ValueError("rates must be a nonempty vector")
    if np.any(r < 0):
        raise ValueError("rates must be nonnegative")
    floored = bool(np.any(r < floor))
    value = float(np.log(np.maximum(r, floor)).mean())
    return GeomeanObjective(value, floored)
