import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from epimvs.attention import attention_weights, fuse_views, group_correlation, variance_fusion
from epimvs.errors import ConfigurationError, UsageError


class TestAttentionWeights:
    def test_identical_keys_uniform(self):
        w, flag = attention_weights(np.ones(4), np.ones((4, 5)))
        np.testing.assert_allclose(w, 0.2)
        assert not flag

    def test_scalar_hand_computed(self):
        t = 2.0
        w, _ = attention_weights(np.array([1.0]), np.array([[0.0, t]]), t)
        e = np.e
        np.testing.assert_allclose(w, [1 / (1 + e), e / (1 + e)], atol=1e-15)

    def test_default_temperature_is_two(self):
        import inspect

        assert inspect.signature(attention_weights).parameters["t_e"].default == 2.0

    def test_invalid_bins_get_zero(self, rng):
        w, _ = attention_weights(rng.normal(size=4), rng.normal(size=(4, 6)), valid=[1, 0, 1, 1, 0, 1])
        assert w[1] == 0.0 and w[4] == 0.0
        assert w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_all_invalid_uniform_and_flagged(self, rng):
        w, flag = attention_weights(rng.normal(size=4), rng.normal(size=(4, 3)), valid=np.zeros(3, bool))
        np.testing.assert_allclose(w, 1 / 3)
        assert flag

    def test_large_logits_do_not_overflow(self):
        w, _ = attention_weights(np.array([1e4]), np.array([[1e4, -1e4, 0.0]]), 1e-3)
        np.testing.assert_allclose(w, [1.0, 0.0, 0.0])

    def test_bad_temperature(self):
        with pytest.raises(ConfigurationError):
            attention_weights(np.ones(2), np.ones((2, 2)), 0.0)

    @given(st.integers(0, 10_000), st.integers(1, 16), st.integers(1, 12))
    def test_simplex(self, seed, C, D):
        rng = np.random.default_rng(seed)
        valid = rng.uniform(size=(5, D)) > 0.3
        w, flag = attention_weights(rng.normal(size=(5, C)) * 5, rng.normal(size=(5, C, D)) * 5, 2.0, valid)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)
        assert np.array_equal(flag, ~valid.any(axis=-1))

    @given(st.integers(0, 10_000), st.floats(0.01, 100.0))
    def test_argmax_invariant_to_query_scale(self, seed, lam):
        rng = np.random.default_rng(seed)
        q, k = rng.normal(size=8), rng.normal(size=(8, 6))
        logits = q @ k
        if np.sort(logits)[-1] - np.sort(logits)[-2] < 1e-9:
            return
        a, _ = attention_weights(q, k)
        b, _ = attention_weights(lam * q, k)
        assert np.argmax(a) == np.argmax(b)


def brute_group_correlation(q, k, G):
    C, D = k.shape
    size = C // G
    out = np.zeros((G, D))
    for g in range(G):
        for d in range(D):
            total = 0.0
            for c in range(g * size, (g + 1) * size):
                total += q[c] * k[c, d]
            out[g, d] = total / G
    return out


class TestGroupCorrelation:
    def test_single_group_is_inner_product(self, rng):
        q, k = rng.normal(size=6), rng.normal(size=(6, 3))
        np.testing.assert_allclose(group_correlation(q, k, 1)[0], q @ k, atol=1e-12)

    def test_hand_example(self):
        s = group_correlation(np.ones(4), np.array([[1.0], [2.0], [3.0], [4.0]]), 2)
        np.testing.assert_allclose(s[:, 0], [1.5, 3.5])

    def test_zero_query(self, rng):
        assert np.all(group_correlation(np.zeros(4), rng.normal(size=(4, 3)), 2) == 0)

    def test_invalid_bins_zero(self, rng):
        s = group_correlation(rng.normal(size=4), rng.normal(size=(4, 3)), 2, valid=[True, False, True])
        assert np.all(s[:, 1] == 0)

    def test_indivisible(self):
        with pytest.raises(ConfigurationError):
            group_correlation(np.ones(6), np.ones((6, 2)), 4)

    @given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 4))
    def test_matches_brute_force(self, seed, C, D):
        rng = np.random.default_rng(seed)
        q, k = rng.normal(size=C), rng.normal(size=(C, D))
        for G in [g for g in range(1, C + 1) if C % g == 0]:
            np.testing.assert_allclose(group_correlation(q, k, G), brute_group_correlation(q, k, G), atol=1e-12)


class TestFuseViews:
    def test_single_view_identity(self, rng):
        s = rng.normal(size=(2, 4))
        c, _ = fuse_views([s], [rng.uniform(0.1, 1, 4)])
        np.testing.assert_allclose(c, s, atol=1e-15)

    def test_equal_weights_mean(self, rng):
        s1, s2 = rng.normal(size=(2, 2, 4))
        w = rng.uniform(0.1, 1, 4)
        c, _ = fuse_views([s1, s2], [w, w])
        np.testing.assert_allclose(c, (s1 + s2) / 2, atol=1e-12)

    def test_hand_example(self):
        c, _ = fuse_views([np.array([[2.0]]), np.array([[6.0]])], [np.array([0.25]), np.array([0.75])])
        assert c[0, 0] == pytest.approx(5.0)

    def test_empty_bins_flagged(self):
        c, empty = fuse_views([np.ones((1, 2))], [np.array([0.5, 0.0])])
        assert empty.tolist() == [False, True]
        assert c[0, 1] == 0.0

    def test_no_views(self):
        with pytest.raises(UsageError):
            fuse_views([], [])

    @given(st.integers(0, 10_000), st.integers(1, 6))
    def test_convex_combination(self, seed, n):
        rng = np.random.default_rng(seed)
        s = rng.normal(size=(n, 3, 5))
        w = rng.uniform(0, 1, (n, 5))
        m = rng.uniform(size=(n, 5)) > 0.3
        c, empty = fuse_views(list(s), list(w), list(m))
        for d in range(5):
            if empty[d]:
                continue
            contrib = m[:, d] & (w[:, d] > 0)
            lo = s[contrib, :, d].min(axis=0)
            hi = s[contrib, :, d].max(axis=0)
            assert np.all(c[:, d] >= lo - 1e-12) and np.all(c[:, d] <= hi + 1e-12)


class TestVarianceFusion:
    def test_identical_volumes_zero(self, rng):
        q = rng.normal(size=3)
        vol = np.repeat(q[:, None], 4, axis=1)
        var, _ = variance_fusion([vol, vol], q)
        np.testing.assert_allclose(var, 0.0, atol=1e-15)

    def test_two_scalars(self):
        var, _ = variance_fusion([np.array([[3.0]])], np.array([1.0]))
        assert var[0, 0] == pytest.approx(1.0)

    @given(st.integers(0, 10_000), st.floats(-100, 100))
    def test_translation_invariant(self, seed, c):
        rng = np.random.default_rng(seed)
        q, v = rng.normal(size=4), rng.normal(size=(3, 4, 5))
        a, _ = variance_fusion(list(v), q)
        b, _ = variance_fusion(list(v + c), q + c)
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_population_form(self, rng):
        q, v = rng.normal(size=2), rng.normal(size=(3, 2, 4))
        var, _ = variance_fusion(list(v), q)
        stack = np.concatenate([np.repeat(q[None, :, None], 4, axis=2), v])
        np.testing.assert_allclose(var, stack.var(axis=0), atol=1e-12)

    def test_needs_source(self):
        with pytest.raises(UsageError):
            variance_fusion([], np.ones(2))
