"""Economic primitive tests: worked two-state vectors and fuzzed properties."""

import numpy as np
import pytest

from datamarket import dists
from datamarket.econ import (
    BuyerType,
    Experiment,
    MarketEnv,
    ShapeError,
    best_response,
    best_response_value,
    belief_from_scalar,
    constant_signal_experiment,
    identity_experiment,
    is_obedient,
    match_prob,
    obedient_match_prob,
    outside_option_utility,
    profile_utility,
)

SKEWED = Experiment(np.array([[0.1, 0.9], [0.8, 0.2]]))
THETA = np.array([0.3, 0.7])


def random_experiments(count: int, m: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    raw = rng.random((count, m, m))
    return raw / raw.sum(axis=-1, keepdims=True)


class TestWorkedVectors:
    def test_obedient_match_prob(self):
        assert abs(obedient_match_prob(SKEWED, THETA) - 0.17) < 1e-12
        assert obedient_match_prob(identity_experiment(2), THETA) == 1.0
        uniform = Experiment(np.full((2, 2), 0.5))
        assert obedient_match_prob(uniform, THETA) == 0.5

    def test_best_response_value(self):
        value, dev = best_response_value(SKEWED, THETA)
        assert abs(value - 0.83) < 1e-12
        np.testing.assert_array_equal(dev, [1, 0])
        value, dev = best_response_value(identity_experiment(2), THETA)
        assert value == 1.0
        np.testing.assert_array_equal(dev, [0, 1])
        always_first = Experiment(np.array([[1.0, 0.0], [1.0, 0.0]]))
        value, dev = best_response_value(always_first, THETA)
        assert abs(value - 0.7) < 1e-12
        assert dev[0] == 1

    def test_is_obedient(self):
        assert is_obedient(identity_experiment(2), THETA)
        assert not is_obedient(SKEWED, THETA)

    def test_outside_option(self):
        assert abs(outside_option_utility(1.0, THETA, 0.5) - 0.2) < 1e-12
        assert outside_option_utility(1.0, (0.5, 0.5), 0.0) == 0.5
        assert outside_option_utility(2.0, (0.75, 0.25), 2.0) == -2.5

    def test_profile_utility(self):
        env = MarketEnv(2, 2, 0.5, (dists.PointMass(1.0),) * 2, (dists.PointMass(0.5),) * 2)
        types = [BuyerType(1.0, np.array([0.5, 0.5])), BuyerType(1.0, np.array([0.5, 0.5]))]
        exps = [identity_experiment(2), identity_experiment(2)]
        assert abs(profile_utility(env, types, exps, [0.0, 0.0], 0) - 0.5) < 1e-12

        env1 = MarketEnv(1, 2, 0.0, (dists.PointMass(1.0),), (dists.PointMass(0.5),))
        assert abs(profile_utility(env1, types[:1], exps[:1], [0.25], 0) - 0.75) < 1e-12

        env2 = MarketEnv(2, 2, 2.0, (dists.PointMass(1.0),) * 2, (dists.PointMass(0.5),) * 2)
        uninformative = constant_signal_experiment(2)
        assert abs(profile_utility(env2, types, [uninformative, identity_experiment(2)], [0.0, 0.0], 0) + 1.5) < 1e-12

    def test_profile_utility_validation(self):
        env = MarketEnv(2, 2, 0.5, (dists.PointMass(1.0),) * 2, (dists.PointMass(0.5),) * 2)
        types = [BuyerType(1.0, np.array([0.5, 0.5]))] * 2
        exps = [identity_experiment(2)] * 2
        with pytest.raises(IndexError):
            profile_utility(env, types, exps, [0.0, 0.0], 5)
        with pytest.raises(ShapeError):
            profile_utility(env, types[:1], exps, [0.0, 0.0], 0)


class TestValidation:
    def test_experiment_rows(self):
        with pytest.raises(ValueError):
            Experiment(np.array([[0.5, 0.6], [0.5, 0.5]]))
        with pytest.raises(ShapeError):
            Experiment(np.ones((2, 3)) / 3)

    def test_buyer_type(self):
        with pytest.raises(ValueError):
            BuyerType(-1.0, np.array([0.5, 0.5]))
        with pytest.raises(ValueError):
            BuyerType(1.0, np.array([0.5, 0.6]))

    def test_env_alpha_bar(self):
        env = MarketEnv(3, 2, 1.0, (dists.PointMass(1.0),) * 3, (dists.PointMass(0.5),) * 3)
        assert abs(env.alpha_bar * (env.n - 1) - env.alpha) < 1e-12
        single = MarketEnv(1, 2, 0.0, (dists.PointMass(1.0),), (dists.PointMass(0.5),))
        assert single.alpha_bar == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            obedient_match_prob(identity_experiment(3), np.array([0.5, 0.5]))


class TestSerialization:
    def test_csv_roundtrip(self):
        exp = SKEWED
        again = Experiment.from_csv(exp.to_csv())
        np.testing.assert_allclose(again.pi, exp.pi)

    def test_json(self):
        assert SKEWED.to_json() == [[0.1, 0.9], [0.8, 0.2]]


class TestProperties:
    def test_best_response_dominates_obedience(self):
        pis = random_experiments(10**4, 2, seed=21)
        thetas = belief_from_scalar(np.random.default_rng(22).random(10**4))
        br, _ = best_response(pis, thetas)
        assert np.all(br >= match_prob(pis, thetas) - 1e-12)
        pis3 = random_experiments(2000, 3, seed=23)
        rng = np.random.default_rng(24)
        t3 = rng.random((2000, 3))
        t3 /= t3.sum(axis=1, keepdims=True)
        br3, _ = best_response(pis3, t3)
        assert np.all(br3 >= match_prob(pis3, t3) - 1e-12)

    def test_obedient_implies_identity_deviation(self):
        pis = random_experiments(4000, 2, seed=31)
        thetas = belief_from_scalar(np.random.default_rng(32).random(4000))
        for pi, th in zip(pis[:500], thetas[:500]):
            exp = Experiment(pi)
            if is_obedient(exp, th):
                _, dev = best_response_value(exp, th)
                np.testing.assert_array_equal(dev, [0, 1])

    def test_binary_obedience_matches_match_prob_threshold(self):
        """For m=2 fixed common belief, obedience <=> match prob >= max theta."""
        pis = random_experiments(10**4, 2, seed=41)
        thetas = belief_from_scalar(np.random.default_rng(42).random(10**4))
        x = match_prob(pis, thetas)
        threshold_test = x >= thetas.max(axis=1)
        direct = np.array(
            [is_obedient(Experiment(pi), th) for pi, th in zip(pis, thetas)]
        )
        assert np.array_equal(direct, threshold_test)

    def test_outside_option_equals_constructed_profile(self):
        rng = np.random.default_rng(51)
        for _ in range(50):
            n = int(rng.integers(2, 4))
            alpha = float(rng.uniform(0, 2))
            theta1 = float(rng.random())
            env = MarketEnv(n, 2, alpha, (dists.PointMass(1.0),) * n, (dists.PointMass(theta1),) * n)
            v = float(rng.uniform(0, 2))
            theta = belief_from_scalar(theta1)
            types = [BuyerType(v, theta) for _ in range(n)]
            exps = [constant_signal_experiment(2, int(theta.argmax()))] + [
                identity_experiment(2) for _ in range(n - 1)
            ]
            got = profile_utility(env, types, exps, [0.0] * n, 0)
            want = outside_option_utility(v, theta, alpha)
            assert abs(got - want) < 1e-12
