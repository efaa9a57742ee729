import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entropy_tree.errors import InputError, ParseError, UndefinedImportanceError, ValidationError
from entropy_tree.model import (
    BOS_ID,
    AttentionImportanceModel,
    NGramModel,
    ScriptedModel,
    StepOutput,
    TokenDistribution,
    ToyAttentionLayer,
    Vocabulary,
    attention_matrix,
    dump_scripted,
    importance_score,
    load_scripted,
    parse_scripted,
    score_next,
    train_ngram,
)


def reference_attention(embed, w_q, w_k, prefix):
    """Scores, causal mask and row softmax done separately with plain loops."""
    x = [embed[t] for t in prefix]
    d_model, d_k = len(w_q), len(w_q[0])
    q = [[sum(r[i] * w_q[i][j] for i in range(d_model)) for j in range(d_k)] for r in x]
    k = [[sum(r[i] * w_k[i][j] for i in range(d_model)) for j in range(d_k)] for r in x]
    T = len(prefix)
    scores = [[sum(q[a][j] * k[b][j] for j in range(d_k)) / math.sqrt(d_k) for b in range(T)] for a in range(T)]
    masked = [[scores[a][b] if b <= a else -math.inf for b in range(T)] for a in range(T)]
    out = []
    for row in masked:
        m = max(row)
        e = [math.exp(v - m) if v != -math.inf else 0.0 for v in row]
        s = sum(e)
        out.append([v / s for v in e])
    return np.array(out)


def random_layer(rng, V=3, d_model=2, d_k=2):
    return ToyAttentionLayer(rng.normal(size=(V, d_model)), rng.normal(size=(d_model, d_k)), rng.normal(size=(d_model, d_k)))


class TestVocabularyAndDistribution:
    def test_vocab_invariants(self):
        with pytest.raises(InputError):
            Vocabulary(("a",), 0)
        with pytest.raises(InputError):
            Vocabulary(("a", "a"), 0)
        with pytest.raises(InputError):
            Vocabulary(("a", "b"), 2)

    def test_encode_decode(self):
        v = Vocabulary.from_tokens(["a", "b", "<eos>"], "<eos>")
        assert v.encode("a b a") == (0, 1, 0)
        assert v.decode((0, 1, 2)) == "a b"
        with pytest.raises(InputError):
            v.encode("zzz")

    def test_distribution_validation(self):
        TokenDistribution([0.25, 0.75])
        with pytest.raises(ValidationError):
            TokenDistribution([0.6, 0.5])
        with pytest.raises(ValidationError):
            TokenDistribution([1.5, -0.5])

    def test_importance_range(self):
        with pytest.raises(ValidationError):
            StepOutput(TokenDistribution([1.0, 0.0]), 1.2)


class TestScripted:
    def test_uniform_root(self):
        v = Vocabulary.from_tokens(["a", "b"], "b")
        m = ScriptedModel(v, {(): StepOutput(TokenDistribution([0.5, 0.5]), 1.0)})
        np.testing.assert_array_equal(score_next(m, ()).dist.probs, [0.5, 0.5])

    def test_fallback_is_one_hot_eos(self):
        v = Vocabulary.from_tokens(["a", "b", "<eos>"], "<eos>")
        m = ScriptedModel(v, {})
        np.testing.assert_array_equal(m.score_next((0, 1, 1)).dist.probs, [0, 0, 1])

    def test_unknown_token_index(self, fork):
        with pytest.raises(InputError):
            fork.score_next((17,))

    def test_single_entry_file_always_eos(self):
        m = parse_scripted(['{"tokens": ["<eos>", "x"], "eos": "<eos>"}', '{"prefix": "", "probs": [1.0, 0.0]}'])
        assert m.score_next(()).dist.probs[m.vocab.eos_id] == 1.0

    def test_sum_violation(self):
        with pytest.raises(ValidationError, match="1.1"):
            parse_scripted(['{"tokens": ["a", "b"], "eos": "b"}', '{"prefix": "", "probs": [0.6, 0.5]}'])

    @pytest.mark.parametrize(
        "record, message",
        [
            ('{"prefix": "", "probs": [1.0]}', "expected 2"),
            ('{"prefix": "zz", "probs": [1.0, 0.0]}', "unknown token"),
            ('{"prefix": "", "prob": [1.0, 0.0]}', "unknown field"),
            ('{"prefix": "", "probs": [1.0, 0.0], "importance": "hi"}', "importance"),
            ("not json", "invalid JSON"),
        ],
    )
    def test_parse_errors_cite_line(self, record, message):
        with pytest.raises(ParseError, match=rf"<string>:2: .*{message}"):
            parse_scripted(['{"tokens": ["a", "b"], "eos": "b"}', record])

    def test_fixture_fork(self, fork):
        v = fork.vocab
        np.testing.assert_allclose(fork.score_next(()).dist.probs[[v.id("L"), v.id("R")]], [0.55, 0.45])
        assert fork.score_next(v.encode("R ANSWER:")).dist.probs[v.id("7")] == 1.0

    def test_round_trip(self, fork, tmp_path):
        path = tmp_path / "copy.model"
        path.write_text(dump_scripted(fork))
        again = load_scripted(path)
        for prefix in list(fork.table) + [(0, 0, 0)]:
            assert again.score_next(prefix) == fork.score_next(prefix)


class TestNGram:
    def test_bigram_example(self):
        m = train_ngram(["a b a b"], 2, 1.0)
        assert m.vocab.tokens == ("a", "b", "<eos>")
        a, b = m.vocab.id("a"), m.vocab.id("b")
        assert m.counts[(a,)] == {b: 2}
        assert m.score_next((a,)).dist.probs[b] == pytest.approx(0.6, abs=1e-15)
        assert m.score_next((a,)).importance == 1.0

    def test_unigram_counts(self):
        m = train_ngram(["a"], 1, 0.5)
        assert m.counts == {(): {m.vocab.id("a"): 1}}

    def test_bos_padding(self):
        m = train_ngram(["x y z"], 3, 1.0)
        x = m.vocab.id("x")
        assert (BOS_ID, BOS_ID) in m.counts and (BOS_ID, x) in m.counts

    def test_empty_corpus(self):
        with pytest.raises(InputError):
            train_ngram([], 2, 1.0)
        with pytest.raises(InputError):
            train_ngram(["a"], 2, 0.0)

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(st.lists(st.sampled_from("abcd"), min_size=1, max_size=12), min_size=1, max_size=8),
        st.integers(1, 3),
        st.floats(0.05, 3.0),
    )
    def test_brute_force_recount(self, sentences, order, alpha):
        m = train_ngram(sentences, order, alpha)
        V = len(m.vocab)
        tokens = m.vocab.tokens
        n = order - 1
        windows = []
        for s in sentences:
            padded = ["<bos>"] * n + s
            windows += [(tuple(padded[i - n : i]), padded[i]) for i in range(n, len(padded))]
        for k in range(n + 1):
            for prefix in itertools.product(tokens, repeat=k):
                ctx = ("<bos>",) * (n - k) + prefix
                total = sum(1 for c, _ in windows if c == ctx)
                dist = m.score_next(tuple(m.vocab.id(t) for t in prefix)).dist.probs
                assert abs(dist.sum() - 1) <= 1e-9
                for j, tok in enumerate(tokens):
                    count = sum(1 for c, w in windows if c == ctx and w == tok)
                    assert dist[j] == pytest.approx((count + alpha) / (total + alpha * V), rel=1e-12)

    def test_json_round_trip_is_byte_stable(self):
        m = train_ngram(["a b a b", "b c"], 2, 1.0)
        text = m.to_json()
        again = NGramModel.from_json(text)
        assert again.to_json() == text
        for prefix in itertools.product(range(len(m.vocab)), repeat=1):
            assert again.score_next(prefix) == m.score_next(prefix)


class TestAttention:
    def test_zero_weights_uniform_rows(self):
        layer = ToyAttentionLayer(np.ones((3, 2)), np.zeros((2, 2)), np.zeros((2, 2)))
        A = attention_matrix(layer, [0, 1, 2, 1])
        for t in range(4):
            np.testing.assert_allclose(A[t, : t + 1], 1 / (t + 1), rtol=0, atol=1e-15)
            assert np.all(A[t, t + 1 :] == 0)

    def test_single_position(self):
        layer = random_layer(np.random.default_rng(0))
        np.testing.assert_array_equal(attention_matrix(layer, [2]), [[1.0]])

    def test_empty_prefix(self):
        with pytest.raises(InputError):
            attention_matrix(random_layer(np.random.default_rng(0)), [])

    def test_matches_reference(self):
        rng = np.random.default_rng(7)
        layer = random_layer(rng)
        prefix = [0, 2, 1]
        ref = reference_attention(layer.embed.tolist(), layer.w_q.tolist(), layer.w_k.tolist(), prefix)
        np.testing.assert_allclose(attention_matrix(layer, prefix), ref, rtol=0, atol=1e-12)

    def test_shape_checks(self):
        with pytest.raises(InputError):
            ToyAttentionLayer(np.ones((3, 2)), np.ones((3, 2)), np.ones((3, 2)))

    @pytest.mark.parametrize(
        "row, expected",
        [([0.25, 0.25, 0.25, 0.25], 0.25), ([0.1, 0.7, 0.2], 0.7), ([0.05, 0.05, 0.9], 0.05)],
    )
    def test_importance_score(self, row, expected):
        assert importance_score(row) == expected

    def test_importance_first_position(self):
        with pytest.raises(UndefinedImportanceError):
            importance_score([1.0])

    def test_attention_importance_model(self):
        base = train_ngram(["a b a b"], 2, 1.0)
        layer = random_layer(np.random.default_rng(3), V=len(base.vocab))
        m = AttentionImportanceModel(base, layer)
        assert m.score_next(()).importance is None
        out = m.score_next((0, 1))
        top = int(np.argmax(out.dist.probs))
        A = reference_attention(layer.embed.tolist(), layer.w_q.tolist(), layer.w_k.tolist(), [0, 1, top])
        assert out.importance == pytest.approx(max(A[-1][:-1]), abs=1e-12)
        assert out.dist == base.score_next((0, 1)).dist
