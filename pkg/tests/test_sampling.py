import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from entropy_tree.errors import InputError
from entropy_tree.model import TokenDistribution
from entropy_tree.sampling import (
    SamplerConfig,
    apply_temperature,
    derive_seed,
    greedy_select,
    make_rng,
    sample,
    sampling_distribution,
    select_token,
    token_entropy,
    truncate_top_k,
    truncate_top_p,
)

D = TokenDistribution

dists = st.lists(st.floats(0.0, 1.0), min_size=2, max_size=16).filter(lambda w: sum(w) > 1e-6).map(D.normalized)


class TestEntropy:
    def test_examples(self):
        assert token_entropy(D([0.5, 0.5])) == pytest.approx(math.log(2), abs=1e-15)
        assert token_entropy(D([0.0, 1.0, 0.0])) == 0.0
        # -sum p ln p at 30 digits: 0.801818552543337308560798109983
        assert token_entropy(D([0.7, 0.2, 0.1])) == pytest.approx(0.8018185525433373, abs=1e-12)

    @pytest.mark.parametrize("V", [2, 3, 7, 64, 1024])
    def test_uniform(self, V):
        assert abs(token_entropy(D(np.full(V, 1 / V))) - math.log(V)) <= 1e-12

    def test_two_token_concentration_decreases(self):
        eps = np.linspace(0, 0.5, 51)
        hs = [token_entropy(D([0.5 + e, 0.5 - e])) for e in eps]
        assert all(a > b for a, b in zip(hs, hs[1:]))

    @given(dists)
    def test_bounds(self, d):
        h = token_entropy(d)
        assert 0.0 <= h <= math.log(len(d)) + 1e-12


class TestGreedy:
    def test_examples(self):
        assert greedy_select(D([0.1, 0.8, 0.1])) == 1
        assert greedy_select(D([0.5, 0.5])) == 0
        assert greedy_select(D([0.0, 0.0, 1.0])) == 2


class TestTruncation:
    def test_top_k_examples(self):
        np.testing.assert_allclose(truncate_top_k(D([0.5, 0.3, 0.2]), 2).probs, [0.625, 0.375, 0.0], atol=1e-15)
        np.testing.assert_array_equal(truncate_top_k(D([0.4, 0.4, 0.2]), 1).probs, [1.0, 0.0, 0.0])
        d = D([0.2, 0.3, 0.5])
        assert truncate_top_k(d, 3) == d

    def test_top_k_range(self):
        with pytest.raises(InputError):
            truncate_top_k(D([0.5, 0.5]), 3)
        with pytest.raises(InputError):
            truncate_top_k(D([0.5, 0.5]), 0)

    def test_top_p_examples(self):
        np.testing.assert_allclose(truncate_top_p(D([0.5, 0.3, 0.15, 0.05]), 0.8).probs, [0.625, 0.375, 0, 0], atol=1e-15)
        d = D([0.1, 0.6, 0.3])
        assert truncate_top_p(d, 1.0) == d
        one = D([0.0, 1.0, 0.0])
        for p in (0.01, 0.5, 0.99):
            assert truncate_top_p(one, p) == one

    def test_top_p_tie_prefers_low_id(self):
        np.testing.assert_array_equal(truncate_top_p(D([0.25, 0.25, 0.5]), 0.6).probs, [1 / 3, 0, 2 / 3])

    def test_top_p_range(self):
        for p in (0.0, 1.5, -1):
            with pytest.raises(InputError):
                truncate_top_p(D([0.5, 0.5]), p)

    @given(dists, st.floats(0.01, 0.999))
    def test_top_p_minimal(self, d, p):
        out = truncate_top_p(d, p)
        kept = np.flatnonzero(out.probs)
        mass = d.probs[kept].sum()
        assert mass >= p - 1e-9
        smallest = kept[np.argmin(d.probs[kept])]
        assert mass - d.probs[smallest] < p

    @given(dists, st.integers(1, 16))
    def test_top_k_valid(self, d, k):
        k = min(k, len(d))
        out = truncate_top_k(d, k)
        assert abs(out.probs.sum() - 1) <= 1e-9
        assert np.count_nonzero(out.probs) <= k


class TestTemperature:
    def test_identity_and_uniform(self):
        d = D([0.8, 0.2])
        assert apply_temperature(d, 1.0) == d
        u = D(np.full(5, 0.2))
        for T in (0.1, 0.5, 3.0):
            np.testing.assert_allclose(apply_temperature(u, T).probs, 0.2, atol=1e-15)

    def test_cold_limit(self):
        # 0.8**100 / (0.8**100 + 0.2**100) = 1 - 4**-100 to double precision
        np.testing.assert_allclose(apply_temperature(D([0.8, 0.2]), 0.01).probs, [1.0, 0.0], atol=1e-6)

    def test_bad_temperature(self):
        with pytest.raises(InputError):
            apply_temperature(D([0.5, 0.5]), 0.0)

    def test_combined_order(self):
        d = D([0.4, 0.3, 0.2, 0.1])
        cfg = SamplerConfig("top_k_then_top_p", k=3, p=0.7)
        # top-3 -> [4/9, 3/9, 2/9]; cumulative 4/9, 7/9 >= 0.7 keeps two
        np.testing.assert_allclose(sampling_distribution(d, cfg).probs, [4 / 7, 3 / 7, 0, 0], atol=1e-15)


class TestSample:
    def test_one_hot(self):
        rng = make_rng(1)
        d = D([0, 0, 0, 1.0])
        assert {sample(d, rng) for _ in range(200)} == {3}

    def test_reproducible(self):
        d = D([0.5, 0.5])

        def draws():
            rng = make_rng(42)
            return [sample(d, rng) for _ in range(50)]

        assert draws() == draws()
        assert set(draws()) == {0, 1}

    def test_frequency(self):
        rng = make_rng(2024)
        draws = np.array([sample(D([0.9, 0.1]), rng) for _ in range(10_000)])
        # 3 sigma of Binomial(10000, 0.9) / 10000 is 0.009
        assert abs(np.mean(draws == 0) - 0.9) <= 0.01

    @pytest.mark.parametrize("V", [2, 5, 8])
    def test_chi_square(self, V):
        rng = np.random.default_rng(V)
        d = D.normalized(rng.random(V) + 0.05)
        r = make_rng("chi", V)
        counts = np.bincount([sample(d, r) for _ in range(10_000)], minlength=V)
        assert chisquare(counts, 10_000 * d.probs).pvalue > 0.001

    def test_never_zero_probability(self):
        d = D([0.0, 0.5, 0.0, 0.5, 0.0])
        rng = make_rng(5)
        assert {sample(d, rng) for _ in range(500)} == {1, 3}

    def test_greedy_strategy_ignores_rng(self):
        cfg = SamplerConfig("greedy")
        assert select_token(D([0.3, 0.7]), cfg, make_rng(0)) == 1

    def test_config_validation(self):
        with pytest.raises(InputError):
            SamplerConfig("beam")
        with pytest.raises(InputError):
            SamplerConfig(p=0.0)
        with pytest.raises(InputError):
            SamplerConfig(temperature=-1)

    def test_derive_seed_stable(self):
        assert derive_seed(1, "p", 0) == derive_seed(1, "p", np.int64(0))
        assert derive_seed(1, "p", 0) != derive_seed(1, "p", 1)
