import logging
import math

import numpy as np
import pytest
from scipy import optimize

from conftest import random_mint_class, random_mono_class, random_two_class
from macfield import fpe
from macfield.model import ClassParams, SolverError, homogeneous, mean_attempt_rate, two_class
from macfield.scenarios import REFERENCE


class TestEnumerateRoots:
    def test_cubic(self):
        roots = fpe.enumerate_roots(lambda x: (x - 0.2) * (x - 0.5) * (x - 0.7))
        np.testing.assert_allclose(roots, [0.2, 0.5, 0.7], atol=1e-10)

    def test_tangential_minimum_is_only_a_warning(self, caplog):
        with caplog.at_level(logging.WARNING, logger="macfield.fpe"):
            roots = fpe.enumerate_roots(lambda x: (x - 0.3) ** 2 + 1e-9)
        assert roots == []
        assert any("tangential" in r.message for r in caplog.records)

    def test_scalar_only_residual(self):
        roots = fpe.enumerate_roots(lambda x: math.cos(3.0 * x), M=500)
        assert roots == pytest.approx([math.pi / 6])


class TestHomogeneous:
    def test_k1_root_matches_bisection_oracle(self, k1_class):
        (root,) = fpe.enumerate_roots(lambda g: fpe.homogeneous_residual(g, k1_class))
        oracle = optimize.bisect(lambda g: fpe.homogeneous_residual(g, k1_class), 0.0, 1 - 1e-9, xtol=1e-14)
        assert root == pytest.approx(oracle, abs=1e-11)

    def test_example1_three_roots(self, example1):
        sols = fpe.solve(example1)
        ref = REFERENCE["example1"]
        assert len(sols) == 3
        for sol, expected in zip(sols, ref["roots"]):
            assert abs(sol.gamma - expected) <= ref["root_tol"]
            assert sol.residual_norm < 1e-10
        assert [s.index for s in sols] == [0, 1, 2]

    def test_raw_residual_matches_scaled(self, example1):
        (raw,) = example1.classes
        (scaled,) = example1.scaled_classes()
        g = np.linspace(0.0, 0.99, 50)
        np.testing.assert_allclose(fpe.homogeneous_residual(g, raw, N=example1.N),
                                   fpe.homogeneous_residual(g, scaled), atol=1e-12)

    def test_rate_form_agrees(self, example1):
        (c,) = example1.scaled_classes()
        for sol in fpe.solve(example1):
            assert fpe.homogeneous_rate_residual(sol.qbar[0], c) == pytest.approx(0.0, abs=1e-9)

    def test_bianchi_root_approaches_mean_field(self):
        q = np.array([0.9, 0.5, 0.2])
        (mfl,) = fpe.enumerate_roots(lambda g: fpe.homogeneous_residual(g, ClassParams.from_rates(q)))
        n = 10_000
        p = ClassParams.from_rates(q / n)
        (finite,) = fpe.enumerate_roots(lambda g: fpe.bianchi_residual(g, p, n))
        assert abs(finite - mfl) < 1e-3

    def test_residual_signs_at_ends(self, rng):
        for _ in range(20):
            c = random_mono_class(rng)
            assert fpe.homogeneous_residual(0.0, c) > 0
            assert fpe.homogeneous_residual(fpe.GAMMA_MAX, c) < 0

    @pytest.mark.parametrize("count", [20, pytest.param(100, marks=pytest.mark.slow)])
    def test_mono_gives_unique_root(self, rng, count):
        for _ in range(count):
            c = random_mono_class(rng)
            assert len(fpe.solve(homogeneous(c.q))) == 1

    @pytest.mark.parametrize("count", [20, pytest.param(100, marks=pytest.mark.slow)])
    def test_mint_gives_unique_root(self, rng, count):
        for _ in range(count):
            c = random_mint_class(rng)
            assert len(fpe.solve(homogeneous(c.q))) == 1


class TestOccupancy:
    def test_zero_gamma_puts_everything_in_stage_zero(self):
        phi = fpe.equilibrium_occupancy(0.0, ClassParams.from_rates([1.0, 0.5, 0.25], sigma=0.4))
        np.testing.assert_allclose(phi, [0.4, 0.0, 0.0])

    def test_uniform_rates_give_geometric_profile(self):
        phi = fpe.equilibrium_occupancy(0.5, ClassParams.from_rates([0.7] * 4))
        np.testing.assert_allclose(phi / phi[0], [1.0, 0.5, 0.25, 0.125])
        assert phi.sum() == pytest.approx(1.0)

    def test_zero_rate_rejected(self):
        with pytest.raises(SolverError, match="q_k > 0"):
            fpe.equilibrium_occupancy(0.3, ClassParams.from_rates([1.0, 0.0]))

    def test_self_consistency(self, example1, example2):
        for s in (example1, example2):
            for sol in fpe.solve(s):
                for phi, c, qbar in zip(fpe.equilibrium_state(s, sol), s.scaled_classes(), sol.qbar):
                    assert mean_attempt_rate(phi, c) == pytest.approx(qbar, abs=1e-10)


class TestSlotTypes:
    def test_no_gap_means_all_common(self):
        assert fpe.pi_coeffs(0.3, 0.6, 0) == (0.0, 1.0)

    def test_infinite_gap_means_all_reserved(self):
        assert fpe.pi_coeffs(0.5, 0.6, math.inf) == (1.0, 0.0)

    def test_single_reserved_slot(self):
        pi_r, pi_c = fpe.pi_coeffs(0.5, 0.5, 1)
        assert (pi_r, pi_c) == pytest.approx((0.5, 0.5))

    def test_vanishing_common_collisions(self):
        pi_r, pi_c = fpe.pi_coeffs(0.0, 0.0, 4)
        assert (pi_r, pi_c) == (0.0, 1.0)

    def test_shares_sum_to_one(self, rng):
        gR = rng.random(1000)
        gC = gR + (1.0 - gR) * rng.random(1000)
        for delta in (0, 1, 3, 10, math.inf):
            pi_r, pi_c = fpe.pi_coeffs(gR, gC, delta)
            np.testing.assert_allclose(pi_r + pi_c, 1.0, atol=1e-12)

    def test_compact_form_identity(self, rng):
        qH = rng.uniform(1e-3, 3.0, 10_000)
        qL = rng.uniform(0.0, 3.0, 10_000)
        deltas = rng.integers(0, 12, 10_000)
        for delta in np.unique(deltas):
            sel = deltas == delta
            compact = fpe.gamma_h_compact(qH[sel], qL[sel], int(delta))
            weighted = fpe.slot_gammas(qH[sel], qL[sel], int(delta))["gamma_h"]
            np.testing.assert_allclose(compact, weighted, atol=1e-12)

    def test_compact_form_degenerations(self):
        qH, qL = np.array([0.3, 1.2]), np.array([0.5, 0.1])
        np.testing.assert_allclose(fpe.gamma_h_compact(qH, qL, 0), -np.expm1(-(qH + qL)), atol=1e-15)
        for delta in (1, 5, math.inf):
            np.testing.assert_allclose(fpe.gamma_h_compact(qH, 0.0, delta), -np.expm1(-qH), atol=1e-14)


class TestExtended:
    def test_example2_unique_solution(self, example2):
        (sol,) = fpe.solve(example2)
        ref = REFERENCE["example2"]
        assert abs(sol.gamma_c - ref["roots"][0]) <= ref["root_tol"]
        assert sol.residual_norm < 1e-8
        assert sol.pi_c == 1.0
        assert sol.gamma_h == pytest.approx(sol.gamma_c)

    def test_example2_pooled_residual_agrees(self, example2):
        (sol,) = fpe.solve(example2)
        (root,) = fpe.enumerate_roots(lambda g: fpe.pooled_residual(g, example2.scaled_classes()))
        assert root == pytest.approx(sol.gamma, abs=1e-9)

    def test_empty_high_class_reduces_to_homogeneous(self):
        s = two_class([0.8, 0.4], [1.5, 0.9, 0.3], sigma_h=0.0, delta=0)
        _, cL = s.scaled_classes()
        for qL in np.linspace(0.0, 1.5, 7):
            _, rL = fpe.extended_residual(0.0, qL, s)
            assert rL == pytest.approx(fpe.homogeneous_rate_residual(qL, cL), abs=1e-15)

    def test_identical_classes_share_rate(self):
        v = [0.9, 0.6, 0.3]
        (sol,) = fpe.solve(two_class(v, v, sigma_h=0.5, delta=0))
        assert sol.qbar[0] == pytest.approx(sol.qbar[1], abs=1e-9)

    def test_grid_method_matches_reduced(self, rng):
        for _ in range(5):
            s = random_two_class(rng, random_mint_class, delta=int(rng.integers(0, 5)))
            (reduced,) = fpe.solve(s)
            grid = fpe.solve(s, method="grid", grid=60)
            assert len(grid) == 1
            np.testing.assert_allclose(grid[0].qbar, reduced.qbar, atol=1e-6)

    @pytest.mark.parametrize("delta", [0, 1, 3, 10, math.inf])
    @pytest.mark.parametrize("make", [random_mono_class, random_mint_class], ids=["mono", "mint"])
    @pytest.mark.parametrize("count", [10, pytest.param(100, marks=pytest.mark.slow)])
    def test_conditions_give_unique_solution(self, rng, make, delta, count):
        for _ in range(count):
            s = random_two_class(rng, make, delta)
            assert len(fpe.solve(s)) == 1

    def test_unknown_method(self, example2):
        with pytest.raises(ValueError):
            fpe.solve(example2, method="newton")

    def test_needs_two_classes(self, example1):
        with pytest.raises(ValueError):
            fpe.solve_extended(example1)


def test_residual_curve_tables(example1, example2):
    one = fpe.residual_curve(example1, M=500)
    assert list(one.columns) == ["gamma", "f_gamma"]
    assert len(one) == 500
    two = fpe.residual_curve(example2, M=500)
    signs = np.sign(two["f_gamma"].to_numpy())
    assert np.count_nonzero(np.diff(signs)) == 1
