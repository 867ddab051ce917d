import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twistsmc import (
    TwistFunction,
    backward_recursion,
    base_path_log_prob,
    build_twisted,
    enumerate_target,
    exact_log_Z,
    incremental_log_weights,
    one_hot_features,
    potential_path_log,
    residual_log_weight,
    sample_twisted_paths,
    twisted_path_log_prob,
)
from twistsmc.twist import enumerate_twisted_log_probs, residual_log_weights_batch
from conftest import all_trajectories, random_model

LOG_Z_C1 = math.log((math.e + 1.0) / 2.0)


def random_twist(model, seed, scale=1.0):
    gen = np.random.default_rng(seed)
    return TwistFunction.tabular(
        [gen.uniform(-scale, scale, size=s) for s in model.state_sizes]
    )


class TestBuildTwisted:
    def test_identity_twist_reduces_to_base(self, c1):
        tm = build_twisted(c1, TwistFunction.identity(c1.state_sizes))
        assert tm.log_c_psi == pytest.approx(0.0, abs=1e-14)
        for v in tm.log_tilde_psi:
            np.testing.assert_allclose(v, 0.0, atol=1e-14)
        np.testing.assert_allclose(tm.log_initial, c1.initial_log_probs, atol=1e-14)
        for got, want in zip(tm.log_kernels, c1.transition_log_probs):
            np.testing.assert_allclose(got, want, atol=1e-14)

    def test_optimal_twist_normalizer_is_log_Z(self, c1):
        tm = build_twisted(c1, backward_recursion(c1).psi_star)
        assert tm.log_c_psi == pytest.approx(LOG_Z_C1, abs=1e-12)

    def test_tilde_psi_definition(self, c1):
        tw = random_twist(c1, 5)
        tm = build_twisted(c1, tw)
        for t in range(c1.horizon):
            expected = np.exp(c1.transition_log_probs[t]) @ np.exp(tw.log_psi_table(t + 1))
            np.testing.assert_allclose(np.exp(tm.log_tilde_psi[t]), expected, atol=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_kernel_rows_normalize(self, c1, seed):
        tm = build_twisted(c1, random_twist(c1, seed))
        assert np.exp(tm.log_initial).sum() == pytest.approx(1.0, abs=1e-12)
        for m in tm.log_kernels:
            np.testing.assert_allclose(np.exp(m).sum(axis=1), 1.0, atol=1e-12)

    def test_shape_mismatch_rejected(self, c1):
        bad = TwistFunction.tabular([np.zeros(2), np.zeros(3), np.zeros(2)])
        with pytest.raises(ValueError):
            build_twisted(c1, bad)
        short = TwistFunction.tabular([np.zeros(2), np.zeros(2)])
        with pytest.raises(ValueError):
            build_twisted(c1, short)


class TestTwistedPathLogProb:
    def test_identity_equals_base(self, c1):
        tm = build_twisted(c1, TwistFunction.identity(c1.state_sizes))
        for traj in all_trajectories(c1):
            assert twisted_path_log_prob(tm, traj) == pytest.approx(
                base_path_log_prob(c1, traj), abs=1e-12
            )

    def test_optimal_twist_matches_target(self, c1):
        tm = build_twisted(c1, backward_recursion(c1).psi_star)
        oracle = enumerate_target(c1)
        for traj in all_trajectories(c1):
            assert twisted_path_log_prob(tm, traj) == pytest.approx(
                oracle.path_log_prob(traj), abs=1e-11
            )

    def test_decomposition_matches_definition(self, c1):
        # recompute through the raw normalizer tables
        tw = random_twist(c1, 9)
        tm = build_twisted(c1, tw)
        traj = (0, 1, 0)
        expected = (
            c1.initial_log_probs[0] + tw.log_psi(0, 0) - tm.log_c_psi
            + c1.transition_log_probs[0][0, 1] + tw.log_psi(1, 1) - tm.log_tilde_psi[0][0]
            + c1.transition_log_probs[1][1, 0] + tw.log_psi(2, 0) - tm.log_tilde_psi[1][1]
        )
        assert twisted_path_log_prob(tm, traj) == pytest.approx(float(expected), abs=1e-12)

    @pytest.mark.parametrize("seed", [3, 4])
    def test_normalizes_over_paths(self, seed):
        m = random_model(seed, (3, 4, 2, 3), potentials="random")
        tm = build_twisted(m, random_twist(m, seed + 50))
        total = sum(math.exp(twisted_path_log_prob(tm, traj)) for traj in all_trajectories(m))
        assert total == pytest.approx(1.0, abs=1e-10)
        enum = enumerate_twisted_log_probs(tm)
        assert np.exp(enum).sum() == pytest.approx(1.0, abs=1e-10)


class TestResidualWeight:
    def test_identity_twist_gives_potential_product(self, c1):
        tm = build_twisted(c1, TwistFunction.identity(c1.state_sizes))
        for traj in all_trajectories(c1):
            assert residual_log_weight(tm, traj) == pytest.approx(
                potential_path_log(c1, traj), abs=1e-13
            )

    def test_optimal_twist_constant_at_log_Z(self, c1):
        tm = build_twisted(c1, backward_recursion(c1).psi_star)
        for traj in all_trajectories(c1):
            assert residual_log_weight(tm, traj) == pytest.approx(LOG_Z_C1, abs=1e-12)

    def test_mean_weight_estimates_Z(self, c1):
        tw = random_twist(c1, 17)
        tm = build_twisted(c1, tw)
        n = 10**5
        paths = sample_twisted_paths(tm, n, seed=123)
        w = np.exp(residual_log_weights_batch(tm, paths))
        se = w.std(ddof=1) / math.sqrt(n)
        assert w.mean() == pytest.approx(math.exp(LOG_Z_C1), abs=3 * se)

    def test_equals_gamma_minus_proposal(self, c1):
        tw = random_twist(c1, 21)
        tm = build_twisted(c1, tw)
        for traj in all_trajectories(c1):
            gamma = base_path_log_prob(c1, traj) + potential_path_log(c1, traj)
            assert residual_log_weight(tm, traj) == pytest.approx(
                gamma - twisted_path_log_prob(tm, traj), abs=1e-10
            )


class TestIncrementalWeights:
    def test_optimal_twist_all_mass_at_step_zero(self, c1):
        tm = build_twisted(c1, backward_recursion(c1).psi_star)
        for traj in all_trajectories(c1):
            incr = incremental_log_weights(tm, traj)
            assert incr[0] == pytest.approx(LOG_Z_C1, abs=1e-12)
            np.testing.assert_allclose(incr[1:], 0.0, atol=1e-12)

    def test_identity_twist_terminal_only(self, c1):
        tm = build_twisted(c1, TwistFunction.identity(c1.state_sizes))
        incr = incremental_log_weights(tm, (0, 1, 0))
        np.testing.assert_allclose(incr[:-1], 0.0, atol=1e-14)
        assert incr[-1] == pytest.approx(1.0, abs=1e-14)

    @pytest.mark.parametrize("seed", [6, 7])
    def test_sum_equals_residual(self, seed):
        m = random_model(seed, (2, 3, 4, 2), potentials="random")
        tm = build_twisted(m, random_twist(m, seed + 10))
        for traj in all_trajectories(m):
            incr = incremental_log_weights(tm, traj)
            assert incr.sum() == pytest.approx(residual_log_weight(tm, traj), abs=1e-12)


class TestFactorization:
    @pytest.mark.parametrize("seed", range(4))
    def test_gamma_splits_into_proposal_times_weight(self, seed):
        m = random_model(seed + 40, (3, 2, 3, 4), potentials="random")
        tm = build_twisted(m, random_twist(m, seed + 60))
        for traj in all_trajectories(m):
            gamma = base_path_log_prob(m, traj) + potential_path_log(m, traj)
            split = twisted_path_log_prob(tm, traj) + residual_log_weight(tm, traj)
            assert gamma == pytest.approx(split, abs=1e-10)


class TestScaleInvariance:
    @settings(max_examples=20, deadline=None)
    @given(
        st.lists(
            st.floats(min_value=-3.0, max_value=3.0, allow_nan=False),
            min_size=3,
            max_size=3,
        )
    )
    def test_per_step_constants_cancel(self, shifts):
        m = random_model(77, (3, 3, 3), potentials="random")
        tw = random_twist(m, 78)
        scaled = TwistFunction.tabular(
            [tw.tables[t] + shifts[t] for t in range(len(shifts))]
        )
        tm, tm_scaled = build_twisted(m, tw), build_twisted(m, scaled)
        np.testing.assert_allclose(tm_scaled.log_initial, tm.log_initial, atol=1e-10)
        for a, b in zip(tm_scaled.log_kernels, tm.log_kernels):
            np.testing.assert_allclose(a, b, atol=1e-10)
        for traj in all_trajectories(m):
            assert twisted_path_log_prob(tm_scaled, traj) == pytest.approx(
                twisted_path_log_prob(tm, traj), abs=1e-10
            )
            assert residual_log_weight(tm_scaled, traj) == pytest.approx(
                residual_log_weight(tm, traj), abs=1e-10
            )


class TestLogLinear:
    def test_one_hot_features_recover_tabular(self, c1):
        tables = [np.array([0.3, -0.2]), np.array([1.0, 0.5]), np.array([-1.0, 0.0])]
        tab = TwistFunction.tabular(tables)
        lin = TwistFunction.log_linear(tables, one_hot_features(c1.state_sizes))
        for t in range(3):
            np.testing.assert_allclose(lin.log_psi_table(t), tab.log_psi_table(t), atol=0)
            assert lin.log_psi(t, 1) == tab.log_psi(t, 1)
        tm_tab, tm_lin = build_twisted(c1, tab), build_twisted(c1, lin)
        for a, b in zip(tm_lin.log_kernels, tm_tab.log_kernels):
            np.testing.assert_allclose(a, b, atol=1e-14)

    def test_feature_map_evaluation(self):
        feats = [np.array([[1.0, 0.0], [1.0, 2.0]])]
        tw = TwistFunction.log_linear([np.array([0.5, 1.5])], feats)
        assert tw.log_psi(0, 0) == pytest.approx(0.5)
        assert tw.log_psi(0, 1) == pytest.approx(0.5 + 3.0)

    def test_validation(self):
        with pytest.raises(ValueError):
            TwistFunction.log_linear([np.array([1.0, 2.0])], [np.ones((3, 1))])
        with pytest.raises(ValueError):
            TwistFunction.tabular([np.array([np.inf, 0.0])])
        with pytest.raises(ValueError):
            TwistFunction("nonsense")
