import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dbmf.core import (
    ChainState,
    ModelConfig,
    RatingsBlock,
    RatingTuple,
    bias_corrector,
    distributed_corrector,
    full_gradient_item,
    full_gradient_item_bias,
    full_gradient_user,
    full_gradient_user_bias,
    g3_estimator,
    minibatch_mean_score,
    predict,
    score_term,
)
from helpers import (
    T1_TUPLES,
    enumerate_minibatches,
    fd_gradient,
    make_state,
    reference_full_gradient_user,
    t1_block,
)


class TestPredict:
    def test_all_zero_state(self):
        state = make_state(1, 1, 2, scale=0.0)
        assert predict(state, 0, 0) == 0.0

    def test_direct_substitution(self):
        state = make_state(1, 1, 1, scale=0.0)
        state.user_factors[0] = [2.0]
        state.item_factors[0] = [1.5]
        state.user_bias[0] = 0.5
        state.item_bias[0] = -0.5
        assert predict(state, 0, 0) == pytest.approx(3.0)

    def test_least_squares_fit_matches_dense_solve(self):
        # Freeze item factors and biases, fit user factors by per-user
        # least squares, and check predictions through the state agree
        # with the oracle's own solve.
        rng = np.random.default_rng(42)
        state = make_state(2, 2, 1, scale=0.0)
        v = rng.uniform(0.5, 2.0, (2, 1))
        state.item_factors = v.copy()
        fitted = np.zeros((2, 1))
        for user in range(2):
            rows = [t for t in T1_TUPLES if t.user == user]
            a = np.array([[v[t.item, 0]] for t in rows])
            y = np.array([t.rating for t in rows])
            sol, *_ = np.linalg.lstsq(a, y, rcond=None)
            fitted[user] = sol
        state.user_factors = fitted
        oracle = fitted[0, 0] * v[0, 0]
        assert predict(state, 0, 0) == pytest.approx(oracle, rel=1e-12)

    def test_out_of_bounds(self):
        state = make_state(2, 2, 1)
        with pytest.raises(IndexError):
            predict(state, 2, 0)
        with pytest.raises(IndexError):
            predict(state, 0, -1)

    @given(st.integers(0, 2), st.integers(0, 2), st.integers(0, 10))
    @settings(max_examples=30, deadline=None)
    def test_symmetry_under_role_exchange(self, i, j, seed):
        state = make_state(3, 3, 2, seed=seed, bias_scale=1.0)
        swapped = ChainState(
            user_factors=state.item_factors.copy(),
            item_factors=state.user_factors.copy(),
            user_bias=state.item_bias.copy(),
            item_bias=state.user_bias.copy(),
            prec_user=state.prec_item.copy(),
            prec_item=state.prec_user.copy(),
            prec_user_bias=state.prec_item_bias,
            prec_item_bias=state.prec_user_bias,
        )
        assert predict(state, i, j) == pytest.approx(predict(swapped, j, i), rel=1e-12)


class TestScoreTerm:
    def test_indicator_zero(self):
        state = make_state(2, 2, 1)
        out = score_term(state, RatingTuple(1, 0, 4.0), 0, tau=1.0)
        assert np.array_equal(out, np.zeros(1))

    def test_direct_value(self):
        state = make_state(1, 1, 1, scale=1.0)
        out = score_term(state, RatingTuple(0, 0, 5.0), 0, tau=1.0)
        assert out == pytest.approx([4.0])

    def test_tau_scales_linearly_and_matches_fd(self):
        state = make_state(2, 2, 3, seed=5, bias_scale=0.5)
        tup = RatingTuple(0, 1, 2.5)
        one = score_term(state, tup, 0, tau=1.0)
        two = score_term(state, tup, 0, tau=2.0)
        np.testing.assert_allclose(two, 2.0 * one, rtol=1e-12)
        # against finite differences of the single-tuple log likelihood
        zero_prior = make_state(2, 2, 3, seed=5, bias_scale=0.5)
        zero_prior.prec_user = np.zeros(3)
        zero_prior.prec_item = np.zeros(3)
        zero_prior.prec_user_bias = 0.0
        zero_prior.prec_item_bias = 0.0
        fd = fd_gradient(zero_prior, [tup], tau=2.0, kind="user", index=0)
        np.testing.assert_allclose(two, fd, rtol=1e-6, atol=1e-8)


class TestFullGradient:
    def test_t1_hand_value(self):
        state = make_state(2, 2, 1, scale=1.0)
        out = full_gradient_user(state, t1_block(), 0, tau=1.0)
        assert out == pytest.approx([5.0])

    def test_no_ratings_at_origin(self):
        state = make_state(3, 2, 2, scale=0.0)
        block = t1_block()
        out = full_gradient_user(state, block, 2, tau=1.0)
        assert np.array_equal(out, np.zeros(2))

    @pytest.mark.parametrize("kind", ["user", "item", "user_bias", "item_bias"])
    def test_matches_finite_differences(self, kind):
        for seed in range(5):
            state = make_state(3, 4, 2, seed=seed, bias_scale=1.0)
            rng = np.random.default_rng(seed + 100)
            tuples = [
                RatingTuple(int(rng.integers(3)), int(rng.integers(4)), float(rng.uniform(1, 5)))
                for _ in range(8)
            ]
            block = RatingsBlock.from_tuples(tuples, (0, 3), (0, 4))
            tau = 1.7
            if kind == "user":
                got = full_gradient_user(state, block, 1, tau)
                want = fd_gradient(state, tuples, tau, "user", 1)
            elif kind == "item":
                got = full_gradient_item(state, block, 2, tau)
                want = fd_gradient(state, tuples, tau, "item", 2)
            elif kind == "user_bias":
                got = np.array([full_gradient_user_bias(state, block, 1, tau)])
                want = fd_gradient(state, tuples, tau, "user_bias", 1)
            else:
                got = np.array([full_gradient_item_bias(state, block, 2, tau)])
                want = fd_gradient(state, tuples, tau, "item_bias", 2)
            np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-7)


class TestMinibatchMeanScore:
    def test_repeated_tuple_equals_score_term(self):
        state = make_state(2, 2, 2, seed=1)
        tup = RatingTuple(0, 1, 3.0)
        mean = minibatch_mean_score(state, [tup] * 4, 0, tau=1.0)
        np.testing.assert_allclose(mean, score_term(state, tup, 0, tau=1.0), rtol=1e-12)

    def test_full_dataset_definition(self):
        state = make_state(2, 2, 1, scale=1.0)
        mean = minibatch_mean_score(state, T1_TUPLES, 0, tau=1.0)
        total = sum(score_term(state, t, 0, tau=1.0) for t in T1_TUPLES)
        np.testing.assert_allclose(mean, total / 3, rtol=1e-12)

    def test_empty_minibatch_rejected(self):
        state = make_state(2, 2, 1)
        with pytest.raises(ValueError):
            minibatch_mean_score(state, [], 0, tau=1.0)

    def test_scaled_mean_is_unbiased_over_enumeration(self):
        state = make_state(2, 2, 1, scale=1.0)
        n = len(T1_TUPLES)
        acc = np.zeros(1)
        count = 0
        for mb in enumerate_minibatches(T1_TUPLES, 2):
            acc += n * minibatch_mean_score(state, mb, 0, tau=1.0)
            count += 1
        assert count == 9
        total = sum(score_term(state, t, 0, tau=1.0) for t in T1_TUPLES)
        np.testing.assert_allclose(acc / count, total, atol=1e-12)


class TestBiasCorrector:
    def test_single_draw(self):
        assert bias_corrector(2, 3, 1) == pytest.approx(2 / 3)

    def test_user_in_every_tuple(self):
        for m in range(1, 5):
            assert bias_corrector(3, 3, m) == pytest.approx(1.0)

    def test_enumerated_value(self):
        # 9 ordered pairs from 3 tuples; the one pair missing both of
        # user 0's two tuples leaves 8/9
        assert bias_corrector(2, 3, 2) == pytest.approx(8 / 9, abs=1e-12)

    def test_zero_count_rejected(self):
        with pytest.raises(ValueError):
            bias_corrector(0, 3, 1)

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3))
    @settings(max_examples=60, deadline=None)
    def test_monotone_in_m_and_count(self, n_i, n, m):
        if n_i > n:
            n_i, n = n, n_i
        h = bias_corrector(n_i, n, m)
        assert 0 < h <= 1
        assert bias_corrector(n_i, n, m + 1) >= h
        if n_i < n:
            assert bias_corrector(n_i + 1, n, m) > h

    def test_exact_inclusion_probability_all_small_cases(self):
        for n in range(1, 7):
            for n_i in range(1, n + 1):
                tuples = [RatingTuple(0 if k < n_i else 1, 0, 1.0) for k in range(n)]
                for m in range(1, 4):
                    hits = 0
                    total = 0
                    for mb in enumerate_minibatches(tuples, m):
                        hits += any(t.user == 0 for t in mb)
                        total += 1
                    assert abs(bias_corrector(n_i, n, m) - hits / total) < 1e-12


class TestDistributedCorrector:
    def test_degenerate_single_block(self):
        assert distributed_corrector([(1.0, 0.75)]) == pytest.approx(0.75)

    def test_two_block_arithmetic(self):
        assert distributed_corrector([(0.5, 1.0), (0.5, 0.0)]) == pytest.approx(0.5)

    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError):
            distributed_corrector([(0.5, 1.0), (0.6, 0.0)])

    def test_matches_two_stage_enumeration_on_t1(self):
        # user-stripe split of the three ratings: {user 0 tuples}, {user 1 tuple}
        block_a = [t for t in T1_TUPLES if t.user == 0]
        block_b = [t for t in T1_TUPLES if t.user == 1]
        m = 1
        for target in (0, 1):
            parts = []
            for blk in (block_a, block_b):
                n_i = sum(t.user == target for t in blk)
                h = bias_corrector(n_i, len(blk), m) if n_i else 0.0
                parts.append((0.5, h))
            got = distributed_corrector(parts)
            # two-stage draw: pick a block uniformly, then a minibatch
            prob = 0.0
            for blk in (block_a, block_b):
                hits = 0
                total = 0
                for mb in enumerate_minibatches(blk, m):
                    hits += any(t.user == target for t in mb)
                    total += 1
                prob += 0.5 * hits / total
            assert got == pytest.approx(prob, abs=1e-12)


class TestG3Estimator:
    def test_full_data_minibatch_arithmetic(self):
        state = make_state(2, 2, 1, scale=1.0)
        block = t1_block()
        h = bias_corrector(2, 3, 3)
        got = g3_estimator(state, block, T1_TUPLES, 0, h_bar=h, tau=1.0)
        total = sum(score_term(state, t, 0, tau=1.0) for t in T1_TUPLES)
        want = total - state.prec_user * state.user_factors[0] / h
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_unbiased_over_enumeration(self):
        state = make_state(2, 2, 1, seed=3)
        block = t1_block()
        m = 2
        h = bias_corrector(2, 3, m)
        acc = np.zeros(1)
        count = 0
        for mb in enumerate_minibatches(T1_TUPLES, m):
            acc += g3_estimator(state, block, mb, 0, h_bar=h, tau=1.0)
            count += 1
        want = reference_full_gradient_user(state, T1_TUPLES, 0, tau=1.0)
        np.testing.assert_allclose(acc / count, want, atol=1e-12)

    def test_zero_precision_reduces_to_scaled_mean(self):
        state = make_state(2, 2, 2, seed=4)
        state.prec_user = np.zeros(2)
        block = t1_block()
        mb = [T1_TUPLES[0], T1_TUPLES[2]]
        got = g3_estimator(state, block, mb, 0, h_bar=0.5, tau=1.0)
        want = block.n * minibatch_mean_score(state, mb, 0, tau=1.0)
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_invalid_h_bar(self):
        state = make_state(2, 2, 1)
        with pytest.raises(ValueError):
            g3_estimator(state, t1_block(), T1_TUPLES, 0, h_bar=0.0, tau=1.0)


class TestUnbiasednessInvariants:
    """Exhaustive enumeration on a six-rating fixture."""

    def _fixture(self):
        tuples = [
            RatingTuple(0, 0, 5.0),
            RatingTuple(0, 1, 3.0),
            RatingTuple(1, 0, 4.0),
            RatingTuple(1, 2, 2.0),
            RatingTuple(2, 1, 1.0),
            RatingTuple(0, 2, 4.5),
        ]
        block = RatingsBlock.from_tuples(tuples, (0, 3), (0, 3))
        state = make_state(3, 3, 2, seed=9, bias_scale=0.5)
        return tuples, block, state

    @pytest.mark.parametrize("m", [1, 2, 3])
    def test_g1_unbiased(self, m):
        tuples, block, state = self._fixture()
        tau = 2.0
        n = len(tuples)
        acc = np.zeros(2)
        count = 0
        for mb in enumerate_minibatches(tuples, m):
            g1 = n * minibatch_mean_score(state, mb, 0, tau) - state.prec_user * state.user_factors[0]
            acc += g1
            count += 1
        want = reference_full_gradient_user(state, tuples, 0, tau)
        np.testing.assert_allclose(acc / count, want, atol=1e-12)

    @pytest.mark.parametrize("m", [1, 2, 3])
    def test_g3_unbiased(self, m):
        tuples, block, state = self._fixture()
        tau = 2.0
        n_i = sum(t.user == 0 for t in tuples)
        h = bias_corrector(n_i, len(tuples), m)
        acc = np.zeros(2)
        count = 0
        for mb in enumerate_minibatches(tuples, m):
            acc += g3_estimator(state, block, mb, 0, h_bar=h, tau=tau)
            count += 1
        want = reference_full_gradient_user(state, tuples, 0, tau)
        np.testing.assert_allclose(acc / count, want, atol=1e-12)


class TestDomainTypes:
    def test_block_invariants(self):
        block = t1_block()
        block.validate()
        assert block.n == 3
        assert block.user_counts == {0: 2, 1: 1}
        assert block.item_counts == {0: 2, 1: 1}

    def test_block_out_of_range_rejected(self):
        block = RatingsBlock.from_tuples(T1_TUPLES, (0, 1), (0, 2))
        with pytest.raises(ValueError):
            block.validate()

    def test_chain_state_invariants(self):
        state = make_state(2, 3, 2, seed=0)
        state.validate()
        state.prec_user[0] = 0.0
        with pytest.raises(ValueError):
            state.validate()

    def test_model_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(n_factors=0)
        with pytest.raises(ValueError):
            ModelConfig(n_factors=1, tau=0.0)
        with pytest.raises(ValueError):
            ModelConfig(n_factors=1, minibatch_size=0)

    def test_state_copy_is_deep(self):
        state = make_state(2, 2, 2, seed=0)
        dup = state.copy()
        dup.user_factors[0, 0] += 1.0
        assert state.user_factors[0, 0] != dup.user_factors[0, 0]
