"""Multi-buyer learner tests: payment formulas, regret identities, IR by
construction over random weights, the discrete regret<->IC equivalence, and
small deterministic training smokes."""

import numpy as np
import pytest
from dataclasses import dataclass, replace

import datamarket.autodiff as ad
from datamarket import dists, market
from datamarket.econ import BuyerType, Experiment, MarketEnv, belief_from_scalar, identity_experiment, profile_utility
from datamarket.market import (
    DESK_EXPOST,
    LagrangianState,
    LearnedMechanism,
    MarketTrainConfig,
    MarketWeights,
    estimate_regret_test,
    evaluate_revenue,
    expost_regret,
    forward_market,
    interim_regret,
    lagrangian_loss,
    payment_expost,
    payment_interim,
    payment_scale,
    train_market,
)


def env_two(alpha=0.5, theta1=0.5, dist=None):
    dist = dist or dists.Uniform(0, 1)
    return MarketEnv(2, 2, alpha, (dist, dist), (dists.PointMass(theta1),) * 2)


def saturated_weights(env, mode, diag_logit=60.0, pay_logit=60.0, seed=0):
    """Weights whose nets ignore inputs: identity experiments, t_norm ~ 1."""
    w = MarketWeights.build(env, mode, (8, 8), seed=seed)
    w.params.data[:] = 0.0
    last = len(w.arch_exp) - 2
    b = w.params.view(f"exp.b{last}").reshape(env.n, env.m, env.m)
    for k in range(env.m):
        b[:, k, k] = diag_logit
    if mode == "ex_post":
        w.params.view(f"pay.b{len(w.arch_pay) - 2}")[:] = pay_logit
    else:
        for i in range(env.n):
            w.params.view(f"pay{i}.b{len(w.arch_pay) - 2}")[:] = pay_logit
    return w


def random_weights(env, mode, seed, scale=1.0):
    w = MarketWeights.build(env, mode, (8, 8), seed=seed)
    rng = np.random.default_rng(seed + 1)
    w.params.data[:] = rng.normal(scale=scale, size=w.params.data.shape)
    return w


class TestForward:
    def test_zero_weights_uniform_rows_and_half_tnorm(self):
        env = env_two()
        w = MarketWeights.build(env, "ex_post", (8, 8), seed=3)
        w.params.data[:] = 0.0
        v, theta = env.sample_profiles(5, seed=1)
        pi, tnorm = forward_market(w, v, theta, env)
        np.testing.assert_allclose(pi, 0.5)
        np.testing.assert_allclose(tnorm, 0.5)

    def test_rows_stochastic_for_random_weights(self):
        env = env_two()
        w = random_weights(env, "ex_post", seed=5)
        v, theta = env.sample_profiles(64, seed=2)
        pi, _ = forward_market(w, v, theta, env)
        np.testing.assert_allclose(pi.sum(axis=-1), 1.0, atol=1e-9)
        assert pi.min() >= 0

    def test_no_buyer_symmetry_imposed(self):
        env = env_two()
        w = random_weights(env, "ex_post", seed=6)
        v = np.array([[0.2, 0.9]])
        theta = np.broadcast_to(belief_from_scalar(0.5), (1, 2, 2)).copy()
        pi_a, _ = forward_market(w, v, theta, env)
        pi_b, _ = forward_market(w, v[:, ::-1], theta, env)
        assert not np.allclose(pi_a[0, 0], pi_b[0, 1], atol=1e-6)


class TestPayments:
    def test_expost_identity_example(self):
        env = env_two(alpha=0.5)
        w = saturated_weights(env, "ex_post")
        v = np.array([[1.0, 1.0]])
        theta = np.broadcast_to(belief_from_scalar(0.5), (1, 2, 2)).copy()
        pi, tnorm = forward_market(w, v, theta, env)
        t = payment_expost(v, theta, pi, tnorm, env)
        np.testing.assert_allclose(t, 0.5, atol=1e-3)

    def test_zero_tnorm_zero_payment(self):
        env = env_two()
        v, theta = env.sample_profiles(7, seed=3)
        pi = np.broadcast_to(np.eye(2), (7, 2, 2, 2)).copy()
        t = payment_expost(v, theta, pi, np.zeros((7, 2)), env)
        np.testing.assert_array_equal(t, 0.0)

    def test_scale_collapses_when_own_matches_outside(self):
        # buyer 1 uninformative (x=0.5), buyer 2 identity, alpha=0.5: scale_1 = 0
        env = env_two(alpha=0.5)
        pi = np.stack([np.stack([np.full((2, 2), 0.5), np.eye(2)])])
        theta = np.broadcast_to(belief_from_scalar(0.5), (1, 2, 2)).copy()
        v = np.array([[2.0, 1.0]])
        t = payment_expost(v, theta, pi, np.ones((1, 2)), env)
        assert abs(t[0, 0]) < 1e-12

    def test_interim_identity_example(self):
        env = env_two(alpha=0.5)
        w = saturated_weights(env, "interim")
        other_v = np.full((16, 1), 0.4)
        other_theta = np.broadcast_to(belief_from_scalar(0.5), (16, 1, 2)).copy()
        t = payment_interim(w, 0, 1.0, belief_from_scalar(0.5), other_v, other_theta, env)
        assert abs(t - 0.5) < 1e-3

    def test_interim_single_buyer_degenerate(self):
        env = MarketEnv(1, 2, 0.0, (dists.Uniform(0, 1),), (dists.PointMass(0.5),))
        w = saturated_weights(env, "interim")
        t = payment_interim(w, 0, 0.8, belief_from_scalar(0.5), np.empty((4, 0)), np.empty((4, 0, 2)), env)
        assert abs(t - 0.8 * (1.0 - 0.5)) < 1e-3


@dataclass
class FixedMechanism:
    """Identity experiments; payment 0.5 to buyers reporting v >= 0.5."""

    env: MarketEnv

    def respond(self, v, theta):
        b = v.shape[0]
        pi = np.broadcast_to(np.eye(2), (b, self.env.n, 2, 2)).copy()
        return pi, np.where(v >= 0.5, 0.5, 0.0)


class TestRegret:
    def test_truth_identity_zero(self):
        env = env_two()
        w = saturated_weights(env, "ex_post")
        v, theta = env.sample_profiles(1, seed=9)
        r = expost_regret(w, v[0], theta[0], v[0, 0], theta[0, 0], 0, env)
        assert abs(r) < 1e-9

    def test_truthful_report_nonnegative_fuzz(self):
        env = env_two()
        count = 0
        for seed in range(100):
            w = random_weights(env, "ex_post", seed=seed)
            v, theta = env.sample_profiles(100, seed=seed)
            pi, tnorm = forward_market(w, v, theta, env)
            br = (pi * theta[:, :, :, None]).max(axis=2).sum(axis=2)
            d = np.einsum("bnkk,bnk->bn", pi, theta)
            gap = v * (br - d)  # regret of the truthful-report candidate
            assert np.all(gap >= -1e-12)
            count += gap.size
        assert count == 2 * 10**4

    def test_hand_built_payment_drop(self):
        env = env_two(alpha=0.5)
        mech = FixedMechanism(env)
        v = np.array([0.7, 0.9])
        theta = np.stack([belief_from_scalar(0.5)] * 2)
        r = expost_regret(mech, v, theta, 0.0, theta[0], 0, env)
        assert abs(r - 0.5) < 1e-12

    def test_interim_truth_identity_zero(self):
        env = env_two()
        w = saturated_weights(env, "interim")
        other_v = np.full((8, 1), 0.3)
        other_theta = np.broadcast_to(belief_from_scalar(0.5), (8, 1, 2)).copy()
        r = interim_regret(w, 0, 0.6, belief_from_scalar(0.5), 0.6, belief_from_scalar(0.5), other_v, other_theta, env)
        assert abs(r) < 1e-9

    def test_interim_truthful_nonnegative(self):
        env = env_two()
        rng = np.random.default_rng(1)
        for seed in range(40):
            w = random_weights(env, "interim", seed=seed)
            v_i = float(rng.uniform(0, 1))
            other_v = rng.uniform(0, 1, size=(32, 1))
            other_theta = np.broadcast_to(belief_from_scalar(0.5), (32, 1, 2)).copy()
            r = interim_regret(w, 0, v_i, belief_from_scalar(0.5), v_i, belief_from_scalar(0.5), other_v, other_theta, env)
            assert r >= -1e-12

    def test_interim_k1_matches_single_profile_formula(self):
        env = env_two(alpha=0.7)
        theta_vec = belief_from_scalar(0.5)
        rng = np.random.default_rng(4)
        for seed in range(10):
            w = random_weights(env, "interim", seed=seed)
            v_i, mis_v = rng.uniform(0, 1, 2)
            other_v = rng.uniform(0, 1, size=(1, 1))
            other_theta = np.broadcast_to(theta_vec, (1, 1, 2)).copy()
            got = interim_regret(w, 0, v_i, theta_vec, mis_v, theta_vec, other_v, other_theta, env)

            def bits(report):
                x = market.encode_profile(env, np.array([[report, other_v[0, 0]]]),
                                          np.stack([np.stack([theta_vec, theta_vec])]))
                pi = w.experiments_at(x)[0]
                own = pi[0]
                ext_k = pi[1, np.arange(2), np.arange(2)] * theta_vec
                scale = float((np.diag(own) * theta_vec).sum() - env.alpha_bar * ext_k.sum() - (0.5 - env.alpha))
                tnorm = w.tnorm_own_at(0, np.array([[report]]))[0]
                return own, ext_k, tnorm * report * scale

            own_m, ext_m, t_m = bits(mis_v)
            own_t, ext_t, t_t = bits(v_i)
            bracket = own_m * theta_vec[:, None] - env.alpha_bar * ext_m[None, :]
            gain = v_i * bracket.max(axis=0).sum() - t_m
            truthful = v_i * ((np.diag(own_t) * theta_vec).sum() - env.alpha_bar * ext_t.sum()) - t_t
            assert abs(got - (gain - truthful)) < 1e-9


class TestIrByConstruction:
    def test_expost_ir_over_random_weights(self):
        env = env_two(alpha=1.5)
        theta_vec = belief_from_scalar(0.5)
        total = 0
        for seed in range(100):
            w = random_weights(env, "ex_post", seed=seed, scale=2.0)
            v, theta = env.sample_profiles(100, seed=seed + 1000)
            pi, tnorm = forward_market(w, v, theta, env)
            t = payment_expost(v, theta, pi, tnorm, env)
            d = np.einsum("bnkk,bnk->bn", pi, theta)
            util = v * (d - env.alpha_bar * (d.sum(axis=1, keepdims=True) - d)) - t
            outside = v * (theta.max(axis=2) - env.alpha)
            assert np.all(util >= outside - 1e-9)
            total += util.size
        assert total == 2 * 10**4

    def test_payment_scale_pointwise_nonnegative(self):
        env = env_two(alpha=2.0)
        rng = np.random.default_rng(3)
        raw = rng.random((500, 2, 2, 2))
        pi = raw / raw.sum(axis=-1, keepdims=True)
        theta = np.broadcast_to(belief_from_scalar(0.5), (500, 2, 2)).copy()
        assert np.all(payment_scale(pi, theta, env) >= -1e-12)

    def test_interim_ir_with_shared_samples(self):
        env = env_two(alpha=0.5)
        theta_vec = belief_from_scalar(0.5)
        rng = np.random.default_rng(9)
        for seed in range(30):
            w = random_weights(env, "interim", seed=seed)
            v_i = float(rng.uniform(0, 1))
            other_v = rng.uniform(0, 1, size=(64, 1))
            other_theta = np.broadcast_to(theta_vec, (64, 1, 2)).copy()
            t = payment_interim(w, 0, v_i, theta_vec, other_v, other_theta, env)
            a, e, _ = market._interim_quantities(w, 0, v_i, theta_vec, other_v, other_theta, env)
            util = v_i * ((np.diag(a) * theta_vec).sum() - env.alpha_bar * e.sum()) - t
            outside = v_i * (0.5 - env.alpha)
            assert util >= outside - 1e-9


class TestLagrangian:
    def test_zero_regret_reduces_to_revenue(self):
        lagr = LagrangianState(lam=np.array([3.0, 7.0]), penalty_coeff=2.0, update_period=10)
        loss = lagrangian_loss(ad.Tensor(np.asarray(0.4)), [ad.Tensor(np.asarray(0.0))] * 2, lagr)
        assert abs(float(loss.data) + 0.4) < 1e-12

    def test_penalty_arithmetic(self):
        lagr = LagrangianState(lam=np.array([10.0, 10.0]), penalty_coeff=1.0, update_period=10)
        r = 0.3
        loss = lagrangian_loss(ad.Tensor(np.asarray(0.0)), [ad.Tensor(np.asarray(r))] * 2, lagr)
        assert abs(float(loss.data) - 2 * (10 * r + r * r / 2)) < 1e-12

    def test_multiplier_update_rule(self):
        env = env_two()
        cfg = MarketTrainConfig(mode="ex_post", iterations=10, batch=32, misreport_inits=4,
                                hidden=(8, 8), update_period=5, log_every=5)
        _, log = train_market(env, cfg, seed=3)
        row5 = next(r for r in log if r["iteration"] == 5)
        # lambda after the iteration-5 update equals init + penalty * batch regret
        assert abs(row5["lambda_0"] - (10.0 + 1.0 * row5["regret_0"])) < 1e-9


class TestDiscreteRegretEquivalence:
    """On a 3-type grid, enumerated regret is zero exactly when every
    misreport/deviation inequality holds."""

    GRID = np.array([0.2, 0.5, 0.8])
    THETA = belief_from_scalar(0.55)

    @dataclass
    class TableMechanism:
        env: MarketEnv
        pis: np.ndarray  # (3, 3, 2, 2, 2)
        ts: np.ndarray  # (3, 3, 2)

        def _idx(self, v):
            return np.abs(v[:, :, None] - TestDiscreteRegretEquivalence.GRID[None, None]).argmin(axis=2)

        def respond(self, v, theta):
            idx = self._idx(v)
            return self.pis[idx[:, 0], idx[:, 1]], self.ts[idx[:, 0], idx[:, 1]]

    def _random_mechanism(self, env, rng, ic=False):
        if ic:
            pis = np.broadcast_to(np.eye(2), (3, 3, 2, 2, 2)).copy()
            ts = np.zeros((3, 3, 2))
        else:
            raw = rng.random((3, 3, 2, 2, 2))
            pis = raw / raw.sum(axis=-1, keepdims=True)
            ts = rng.uniform(-0.1, 0.3, size=(3, 3, 2))
        return self.TableMechanism(env, pis, ts)

    def _ic_by_enumeration(self, env, mech) -> bool:
        devs = [(0, 1), (1, 0), (0, 0), (1, 1)]
        th = self.THETA
        for a in range(3):
            for b in range(3):
                v = np.array([self.GRID[a], self.GRID[b]])
                for i in range(2):
                    pi_t, t_t = mech.respond(v[None, :], None)
                    d = np.einsum("nkk,k->n", pi_t[0], th)
                    truth = v[i] * (d[i] - env.alpha_bar * (d.sum() - d[i])) - t_t[0, i]
                    for mis in range(3):
                        v_m = v.copy()
                        v_m[i] = self.GRID[mis]
                        pi_m, t_m = mech.respond(v_m[None, :], None)
                        d_m = np.einsum("nkk,k->n", pi_m[0], th)
                        for delta in devs:
                            dev_val = sum(th[delta[k]] * pi_m[0, i, delta[k], k] for k in (0, 1))
                            alt = v[i] * (dev_val - env.alpha_bar * (d_m.sum() - d_m[i])) - t_m[0, i]
                            if alt > truth + 1e-12:
                                return False
        return True

    def _max_regret(self, env, mech) -> float:
        worst = -np.inf
        for a in range(3):
            for b in range(3):
                v = np.array([self.GRID[a], self.GRID[b]])
                theta = np.stack([self.THETA, self.THETA])
                for i in range(2):
                    for mis in range(3):
                        r = expost_regret(mech, v, theta, self.GRID[mis], self.THETA, i, env)
                        worst = max(worst, r)
        return worst

    def test_equivalence(self):
        env = env_two(alpha=0.8)
        rng = np.random.default_rng(0)
        seen_violation = False
        for trial in range(40):
            mech = self._random_mechanism(env, rng, ic=(trial == 0))
            ic = self._ic_by_enumeration(env, mech)
            regret = self._max_regret(env, mech)
            assert ic == (regret <= 1e-9), f"trial {trial}: ic={ic}, regret={regret}"
            seen_violation |= not ic
        assert seen_violation


class TestEstimateRegret:
    def test_constant_mechanism_zero(self):
        env = env_two()
        w = saturated_weights(env, "ex_post", pay_logit=-60.0)  # payments ~ 0
        r = estimate_regret_test(w, env, 500, seed=2, mode="ex_post", candidates=16, ascent_steps=3)
        assert np.max(np.abs(r)) < 1e-6

    def test_forced_payment_closed_form(self):
        # t_norm ~ 1, identity experiments, alpha = 0: misreporting 0 keeps the
        # information but zeroes the payment, so regret = E[v] (1 - max theta)
        env = env_two(alpha=0.0)
        w = saturated_weights(env, "ex_post")
        r = estimate_regret_test(w, env, 2000, seed=3, mode="ex_post", candidates=100, ascent_steps=25)
        assert abs(np.max(r) - 0.25) < 0.02


class TestTraining:
    SMOKE_EXPOST = MarketTrainConfig(mode="ex_post", iterations=40, batch=64, misreport_inits=6,
                                     hidden=(8, 8), log_every=20)
    SMOKE_INTERIM = MarketTrainConfig(mode="interim", iterations=30, batch=16, interim_samples=8,
                                      hidden=(8, 8), log_every=15)

    def test_expost_smoke_and_determinism(self):
        env = env_two()
        w1, log1 = train_market(env, self.SMOKE_EXPOST, seed=5)
        w2, _ = train_market(env, self.SMOKE_EXPOST, seed=5)
        assert np.array_equal(w1.params.data, w2.params.data)
        assert np.isfinite(log1[-1]["loss"])
        rev, se = evaluate_revenue(w1, env, 500, seed=9)
        assert np.isfinite(rev) and se > 0

    def test_interim_smoke_and_determinism(self):
        env = env_two()
        w1, _ = train_market(env, self.SMOKE_INTERIM, seed=6)
        w2, _ = train_market(env, self.SMOKE_INTERIM, seed=6)
        assert np.array_equal(w1.params.data, w2.params.data)
        rev, se = evaluate_revenue(w1, env, 300, seed=9, interim_samples=16)
        assert np.isfinite(rev)

    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError):
            MarketTrainConfig(mode="nope")
