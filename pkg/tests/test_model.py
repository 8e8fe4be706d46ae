import math

import numpy as np
import pytest

from macfield.model import (INF, ClassParams, OccupancyState, ScalingMode, Scenario, ScenarioError,
                            check_conditions, check_scenario_conditions, collision_finite, collision_mfl,
                            homogeneous, largest_remainder, mean_attempt_rate, scenario_from_dict,
                            scenario_to_dict, two_class, validate)


class TestValidate:
    def test_accepts_simple_class(self):
        s = validate(Scenario(classes=(ClassParams.from_rates([1.0, 0.5]),), N=10))
        assert s.classes[0].K == 1
        assert s.delta == INF

    def test_dimension_mismatch(self):
        bad = ClassParams(q=(1.0, 0.5, 0.25), K=1)
        with pytest.raises(ScenarioError) as err:
            validate(Scenario(classes=(bad,), N=10))
        assert err.value.field == "classes[0].q"
        assert "dimension mismatch" in str(err.value)

    def test_shares_must_sum_to_one(self):
        classes = (ClassParams.from_rates([1.0], sigma=0.5, label="H"),
                   ClassParams.from_rates([1.0], sigma=0.6, label="L"))
        with pytest.raises(ScenarioError) as err:
            validate(Scenario(classes=classes, N=10, delta=0))
        assert err.value.field == "classes.sigma"
        assert "1.1" in str(err.value)

    def test_negative_rate(self):
        with pytest.raises(ScenarioError, match="negative rate"):
            homogeneous([1.0, -0.1])

    def test_raw_probability_above_one(self):
        with pytest.raises(ScenarioError, match="raw-mode probability"):
            homogeneous([0.5, 1.5], N=4, mode=ScalingMode.RAW)

    def test_one_class_delta_normalized(self):
        s = validate(Scenario(classes=(ClassParams.from_rates([1.0]),), N=5, delta=3))
        assert s.delta == INF

    @pytest.mark.parametrize("delta", [1.5, -1, math.nan, -math.inf])
    def test_two_class_delta_must_be_nonnegative_integer(self, delta):
        with pytest.raises(ScenarioError) as err:
            two_class([1.0], [1.0], delta=delta)
        assert err.value.field == "delta"

    def test_population_must_be_positive(self):
        with pytest.raises(ScenarioError) as err:
            homogeneous([1.0], N=0)
        assert err.value.field == "N"


class TestConditions:
    def test_bmp_class(self):
        r = check_conditions(ClassParams.from_rates([0.6, 0.3, 0.15]))
        assert (r.mono, r.mint, r.bmp) == (True, True, True)
        assert r.uniq_hint

    def test_flat_unit_rates(self):
        r = check_conditions(ClassParams.from_rates([1.0, 1.0, 1.0]))
        assert (r.mono, r.mint, r.bmp) == (True, True, False)

    def test_example1_rates(self, example1):
        r = check_scenario_conditions(example1)
        assert not r.mono
        assert not r.mint
        assert not r.uniq_hint

    def test_halving_tolerates_decimal_rounding(self):
        r = check_conditions(ClassParams.from_rates([0.6, 0.3, 0.15000000000000002]))
        assert r.bmp

    def test_bmp_implies_mono_and_mint(self, rng):
        for _ in range(50):
            q0 = float(rng.uniform(0.01, math.log(2.0) - 1e-6))
            q = [q0 / 2 ** k for k in range(int(rng.integers(1, 10)))]
            r = check_conditions(ClassParams.from_rates(q))
            assert r.bmp and r.mono and r.mint


class TestPrimitives:
    def test_mean_attempt_rate(self, k1_class):
        assert mean_attempt_rate([1.0, 0.0], k1_class) == pytest.approx(1.0)
        assert mean_attempt_rate([0.5, 0.5], k1_class) == pytest.approx(0.75)
        assert mean_attempt_rate([0.3, 0.7], ClassParams(q=(0.0, 0.0), K=1)) == 0.0

    def test_mean_attempt_rate_batches(self, k1_class):
        out = mean_attempt_rate(np.array([[1.0, 0.0], [0.5, 0.5]]), k1_class)
        np.testing.assert_allclose(out, [1.0, 0.75])

    def test_collision_mfl_values(self):
        assert collision_mfl(0.0) == 0.0
        assert collision_mfl(1.0) == pytest.approx(1.0 - math.exp(-1.0))
        assert collision_mfl(math.log(2.0)) == pytest.approx(0.5)

    def test_collision_mfl_increasing(self):
        x = np.linspace(0.0, 1.0, 1001)
        y = collision_mfl(x)
        assert np.all(np.diff(y) > 0)
        assert y[-1] <= 1.0 - math.exp(-1.0) + 1e-15

    def test_collision_finite_single_node(self):
        assert collision_finite([1], [0.7], 0) == 0.0

    def test_collision_finite_two_nodes(self):
        assert collision_finite([2], [0.5], 0) == pytest.approx(0.5)

    def test_collision_finite_empty_tagged_stage(self):
        with pytest.raises(ValueError, match="tagged stage"):
            collision_finite([3, 0], [0.1, 0.2], 1)

    def test_collision_finite_example1_start(self):
        value = collision_finite([1200], [1 / 3200], 0)
        assert value == pytest.approx(1.0 - (1.0 - 1 / 3200) ** 1199)
        assert abs(value - collision_mfl(1200 / 3200)) < 5 / 1200

    def test_collision_finite_converges_to_mean_field(self):
        phi = np.array([0.5, 0.3, 0.2])
        q = np.array([1.0, 0.6, 0.3])
        limit = collision_mfl(float(phi @ q))
        gaps = []
        for n in (100, 1000, 10000):
            counts = np.rint(phi * n).astype(int)
            gap = abs(collision_finite(counts, q / n, 0) - limit)
            assert gap < 5.0 / n
            gaps.append(gap)
        assert gaps[0] > gaps[1] > gaps[2]


class TestOccupancy:
    def test_largest_remainder(self):
        np.testing.assert_array_equal(largest_remainder([0.5, 0.5], 10), [5, 5])
        np.testing.assert_array_equal(largest_remainder([0.55, 0.45], 10), [6, 4])
        assert largest_remainder([0.2, 0.3, 0.5], 7).sum() == 7

    def test_random_simplex_respects_shares(self, rng):
        s = two_class([1.0, 0.5], [0.8, 0.4, 0.2], sigma_h=0.3, delta=2)
        state = OccupancyState.random_simplex(s, rng)
        state.check(s.sigmas)
        assert state.vector().shape == (5,)

    def test_check_rejects_negative(self):
        state = OccupancyState((np.array([1.1, -0.1]),))
        with pytest.raises(ScenarioError, match="negative occupancy"):
            state.check((1.0,))

    def test_from_vector(self):
        state = OccupancyState.from_vector(np.array([0.2, 0.3, 0.1, 0.4]), (2, 2))
        np.testing.assert_allclose(state.phi[1], [0.1, 0.4])


class TestDocuments:
    def test_round_trip_keeps_scenario(self):
        s = two_class([0.9, 0.4], [0.7, 0.35], sigma_h=0.25, delta=3, N=40, name="demo")
        again = scenario_from_dict(scenario_to_dict(s))
        assert again == s

    def test_unknown_key_rejected(self):
        doc = {"classes": [{"q": [1.0], "K": 0, "sigma": 1.0}], "N": 3, "foo": 1}
        with pytest.raises(ScenarioError) as err:
            scenario_from_dict(doc)
        assert err.value.field == "foo"

    def test_unknown_class_key_rejected(self):
        doc = {"classes": [{"q": [1.0], "K": 0, "sigma": 1.0, "cw": 16}], "N": 3}
        with pytest.raises(ScenarioError) as err:
            scenario_from_dict(doc)
        assert err.value.field == "classes[0].cw"

    def test_bad_mode(self):
        doc = {"classes": [{"q": [1.0], "K": 0, "sigma": 1.0}], "N": 3, "mode": "fast"}
        with pytest.raises(ScenarioError, match="mode"):
            scenario_from_dict(doc)

    def test_delta_inf_string(self):
        doc = {"classes": [{"q": [1.0], "K": 0, "sigma": 0.5}, {"q": [1.0], "K": 0, "sigma": 0.5}],
               "N": 4, "delta": "inf"}
        assert scenario_from_dict(doc).delta == INF

    def test_scaled_views(self):
        s = homogeneous([0.01, 0.02], N=100, mode=ScalingMode.RAW)
        np.testing.assert_allclose(s.scaled_classes()[0].rates, [1.0, 2.0])
        np.testing.assert_allclose(s.slot_probabilities(0), [0.01, 0.02])
        assert s.time_scale == 100.0
        assert s.time_unit == "slots"
