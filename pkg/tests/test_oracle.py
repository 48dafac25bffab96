import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alohanoma import (
    CapacityExceededError,
    ChannelModel,
    ConditionalRateTable,
    build_conditional_table,
    conditional_split,
    estimate_expected_rates,
    exact_expected_rate,
    exact_expected_rate_batch,
    exact_objective,
    finite_difference_hessians,
    midpoint_concavity_check,
    theorem_bounds_three_users,
    verify_concavity,
)
from alohanoma.oracle import _subset_weights
from conftest import (
    colocated_topology,
    random_instance,
    symmetric_three_user_table,
    synthetic_table,
    two_user_table,
    unit_power_model,
)


class TestBuildTable:
    def test_single_device_solo_rate(self):
        model = ChannelModel(fading="none")
        topo = colocated_topology(1)
        table = build_conditional_table(model, topo, 1)
        snr = model.base_rx_power(topo.distances()[0, 0]) / model.noise_floor_w
        assert table.solo_rate(0) == pytest.approx(math.log2(1 + snr))

    def test_interference_never_helps_deterministic(self):
        model = ChannelModel(fading="none")
        topo = colocated_topology(4)
        table = build_conditional_table(model, topo, 1)
        for i in range(4):
            for mask in range(2**4):
                if not mask & (1 << i):
                    continue
                for j in range(4):
                    if mask & (1 << j) or j == i:
                        continue
                    bigger = mask | (1 << j)
                    assert table.rates[bigger, i] <= table.rates[mask, i] + 1e-12

    def test_subset_combinatorics(self):
        model = ChannelModel(fading="none")
        topo = colocated_topology(3)
        table = build_conditional_table(model, topo, 1)
        for i in range(3):
            containing = [m for m in range(8) if m & (1 << i)]
            assert len(containing) == 4  # 2^(N-1) subsets contain device i

    def test_capacity_guard(self):
        model = ChannelModel(fading="none")
        topo = colocated_topology(13)
        with pytest.raises(CapacityExceededError):
            build_conditional_table(model, topo, 1)

    def test_single_sample_only_for_deterministic_fading(self):
        topo = colocated_topology(2)
        with pytest.raises(ValueError):
            build_conditional_table(ChannelModel(fading="rayleigh"), topo, 1)

    def test_deterministic_given_seed(self):
        topo = colocated_topology(3)
        model = ChannelModel(fading="rayleigh")
        a = build_conditional_table(model, topo, 50, seed=4)
        b = build_conditional_table(model, topo, 50, seed=4)
        np.testing.assert_array_equal(a.rates, b.rates)

    def test_json_round_trip(self):
        topo = colocated_topology(3)
        table = build_conditional_table(ChannelModel(fading="none"), topo, 1)
        again = ConditionalRateTable.from_json(table.to_json())
        np.testing.assert_allclose(table.rates, again.rates, rtol=1e-15)


class TestExactExpectedRate:
    def test_two_user_hand_value(self):
        table = two_user_table(a1=2.0, b1=1.0)
        rates = exact_expected_rate(table, np.array([0.5, 0.5]))
        assert rates[0] == pytest.approx(2.0 * 0.25 + 1.0 * 0.25)

    def test_vanishes_linearly_in_own_probability(self):
        table = symmetric_three_user_table()
        p = np.array([1e-4, 0.6, 0.3])
        r1 = exact_expected_rate(table, p)[0]
        p2 = p.copy()
        p2[0] *= 2
        r2 = exact_expected_rate(table, p2)[0]
        assert r2 == pytest.approx(2 * r1, rel=1e-9)

    def test_matches_monte_carlo(self, rng):
        topo, _, _ = random_instance(3, 1, seed=90)
        model = ChannelModel(fading="none")
        table = build_conditional_table(model, topo, 1)
        p = rng.uniform(0.1, 0.9, size=3)
        exact = exact_expected_rate(table, p)
        est = estimate_expected_rates(model, topo, p, 60_000, 17)
        assert (np.abs(est.mean_rate - exact) <= 4 * est.std_error + 1e-12).all()

    @given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=6))
    @settings(max_examples=100, deadline=None)
    def test_subset_weights_form_a_distribution(self, probs):
        p = np.array(probs)[None, :]
        w = _subset_weights(p)
        assert w.min() >= -1e-15
        assert w.sum() == pytest.approx(1.0, abs=1e-9)

    def test_conditioning_identity(self, rng):
        _, _, table = random_instance(3, 1, seed=31, fading_samples=60)
        p = rng.uniform(0.05, 1.0, size=3)
        rates = exact_expected_rate(table, p)
        for j in range(3):
            v, u = conditional_split(table, p, j)
            np.testing.assert_allclose(p[j] * v + (1 - p[j]) * u, rates, rtol=1e-12)


class TestExactObjective:
    def test_symmetric_instance(self):
        table = symmetric_three_user_table()
        res = exact_objective(table, np.full(3, 0.4))
        rates = exact_expected_rate(table, np.full(3, 0.4))
        assert np.allclose(rates, rates[0])
        assert res.value == pytest.approx(math.log(rates[0]))

    def test_grid_optimum_beats_floor_policy(self):
        _, _, table = random_instance(2, 1, seed=77, fading_samples=100)
        axis = np.linspace(1e-3, 1.0, 100)
        xx, yy = np.meshgrid(axis, axis)
        grid = np.column_stack([xx.ravel(), yy.ravel()])
        rates = exact_expected_rate_batch(table, grid)
        vals = np.log(np.maximum(rates, 1e-12)).mean(axis=1)
        best = vals.max()
        low = exact_objective(table, np.full(2, 1e-3)).value
        assert best > low


class TestFiniteDifferenceHessians:
    def test_quadratic_recovered(self):
        a = np.array([[2.0, 0.3], [0.3, 1.0]])

        def f(points):
            return 0.5 * np.einsum("ki,ij,kj->k", points, a, points)

        pts = np.array([[0.2, 0.7], [0.9, 0.1]])
        hess, _ = finite_difference_hessians(f, pts, step=1e-4)
        for h in hess:
            np.testing.assert_allclose(h, a, atol=1e-5)


class TestConcavityVerification:
    def test_two_user_analytic_hessian(self):
        table = two_user_table(a1=2.0, b1=1.0, a2=2.0, b2=1.0)
        report = verify_concavity(table, grid_resolution=5, fd_step=1e-4)
        check = report.checks[0]  # log rate of device 0
        target = np.array([0.5, 0.5])
        idx = np.argmin(np.abs(report.grid_points - target).sum(axis=1))
        pt = report.grid_points[idx]
        h = check.hessians[idx]
        a, b = 2.0, 1.0
        h11 = -1.0 / pt[0] ** 2
        h22 = -((a - b) ** 2) / ((1 - pt[1]) * a + b * pt[1]) ** 2
        assert h[0, 0] == pytest.approx(h11, abs=1e-4)
        assert h[1, 1] == pytest.approx(h22, abs=1e-4)
        assert abs(h[0, 1]) < 1e-6

    def test_two_user_grid_all_pass(self):
        _, _, table = random_instance(2, 1, seed=5, fading_samples=200)
        report = verify_concavity(table, grid_resolution=25)
        assert report.all_pass
        assert len(report.grid_points) == 625

    def test_three_user_bounds_worked_example(self):
        # equal pair rates 2, solo 4, triple 1: C_i = 1, discriminant 0,
        # raw bound (4 - 2 - 0)/1 = 2, so the effective box cap is 1
        table = symmetric_three_user_table(a=4.0, b=2.0, c=1.0)
        c_values, bounds = theorem_bounds_three_users(table)
        np.testing.assert_allclose(c_values, 1.0)
        np.testing.assert_allclose(bounds[~np.isnan(bounds)], 2.0)
        report = verify_concavity(table, grid_resolution=7)
        np.testing.assert_allclose(report.box_upper, 1.0, rtol=1e-6)

    def test_degenerate_equal_rates_fail_strictness(self):
        # a far interferer leaves B = A; the second diagonal entry collapses
        # to zero and strict definiteness must fail
        table = two_user_table(a1=2.0, b1=2.0, a2=2.0, b2=1.0)
        report = verify_concavity(table, grid_resolution=5)
        check = report.checks[0]
        assert not check.passed.all()

    def test_c_condition_violation_reported_not_asserted(self):
        # pair rates close to the solo rate flip C_i negative
        table = symmetric_three_user_table(a=4.0, b=2.5, c=0.5)
        c_values, _ = theorem_bounds_three_users(table)
        assert (c_values < 0).any()
        report = verify_concavity(table)
        assert not report.c_condition_met
        assert len(report.checks) == 0

    def test_starved_device_points_skipped(self):
        values = {
            (0, frozenset([0])): 2.0,
            (0, frozenset([0, 1])): 1.0,
            # device 1 has zero rate everywhere
        }
        table = synthetic_table(2, values)
        report = verify_concavity(table, grid_resolution=5)
        assert report.n_skipped > 0
        skipped_check = report.checks[1]
        assert skipped_check.skipped.all()

    def test_three_user_random_instance_passes_inside_box(self):
        _, _, table = random_instance(3, 1, seed=12, fading_samples=300)
        c_values, _ = theorem_bounds_three_users(table)
        report = verify_concavity(table, grid_resolution=9)
        if report.c_condition_met:
            assert report.all_pass
        else:
            assert (c_values <= 0).any()

    def test_rows_export_shape(self):
        _, _, table = random_instance(2, 1, seed=55, fading_samples=100)
        report = verify_concavity(table, grid_resolution=4)
        rows = report.rows()
        assert len(rows) == 3 * 16  # two log-rate checks + objective
        assert all(len(r) == 1 + 2 + 2 + 1 for r in rows)


class TestMidpointConcavityProbe:
    def test_no_violations_on_random_four_user_table(self):
        _, _, table = random_instance(4, 2, seed=3, fading_samples=150)
        violations, total = midpoint_concavity_check(table, n_samples=400, seed=1)
        assert total == 400
        assert violations == 0
