"""Shared builders for network instances used across the test suite."""

import math

import numpy as np
import pytest

from alohanoma import (
    ChannelModel,
    ConditionalRateTable,
    Topology,
    build_conditional_table,
    generate_uniform_deployment,
    place_bs_lloyd,
)


def unit_power_model(**overrides) -> ChannelModel:
    """Model where the received power at d <= d0 equals the fading value.

    Handy for decode tests: a fading draw of 10.0 means 10 W received. Noise
    floor 1 W, threshold ~0.309, unit bandwidth.
    """
    lam = 2.998e8 / 900e6
    c0 = (lam / (4 * math.pi)) ** 2
    defaults = dict(
        tx_power_w=1.0 / c0,
        noise_floor_w=1.0,
        bandwidth_hz=1.0,
        fading="none",
        noma_enabled=True,
    )
    defaults.update(overrides)
    return ChannelModel(**defaults)


def colocated_topology(n: int) -> Topology:
    """n devices within the reference distance of a single BS at the origin."""
    devices = np.column_stack([np.linspace(0.1, 0.5, n), np.zeros(n)])
    return Topology(devices, np.array([[0.0, 0.0]]))


def random_instance(n: int, m: int, seed: int, noma: bool = True, fading_samples: int = 400):
    """Random deployment + Lloyd BS + fading-averaged conditional table.

    The table freezes one exact expected-rate polynomial instance; the
    returned model carries the Rayleigh-fading flag used to build it.
    """
    ss = np.random.SeedSequence(seed)
    dev_seed, bs_seed, fade_seed = ss.spawn(3)
    devices = generate_uniform_deployment(n, 500.0, dev_seed)
    bs = place_bs_lloyd(devices, m, bs_seed)
    topo = Topology(devices, bs)
    model = ChannelModel(fading="rayleigh", noma_enabled=noma)
    table = build_conditional_table(model, topo, fading_samples, seed=fade_seed)
    return topo, model, table


def synthetic_table(n: int, values: dict) -> ConditionalRateTable:
    """Conditional table from {(device, frozenset): rate}; missing entries 0."""
    rates = np.zeros((2**n, n))
    for (device, subset), rate in values.items():
        mask = 0
        for j in subset:
            mask |= 1 << j
        rates[mask, device] = rate
    return ConditionalRateTable(rates)


def symmetric_three_user_table(a=4.0, b=1.5, c=0.3) -> ConditionalRateTable:
    values = {}
    for i in range(3):
        others = [j for j in range(3) if j != i]
        values[(i, frozenset([i]))] = a
        for j in others:
            values[(i, frozenset([i, j]))] = b
        values[(i, frozenset([i] + others))] = c
    return synthetic_table(3, values)


def two_user_table(a1=2.0, b1=1.0, a2=2.0, b2=1.0) -> ConditionalRateTable:
    return synthetic_table(
        2,
        {
            (0, frozenset([0])): a1,
            (0, frozenset([0, 1])): b1,
            (1, frozenset([1])): a2,
            (1, frozenset([0, 1])): b2,
        },
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
