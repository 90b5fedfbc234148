import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmdelib.evaluation import corpus_bleu, corpus_wer, edit_distance, significance, wer
from oracles import edit_graph_distances, naive_bleu

sentence = st.lists(st.sampled_from("a b c d the cat".split()), min_size=1, max_size=9)


@pytest.fixture(scope="module")
def edit_table():
    return edit_graph_distances(("a", "b", "c"), 5)


class TestBleu:
    def test_identical_is_100(self):
        refs = [["the", "cat", "sat", "on", "the", "mat"], ["a", "b", "c", "d", "e"]]
        assert corpus_bleu(refs, refs).bleu == 100.0

    def test_clipped_unigrams_zero_bigrams(self):
        r = corpus_bleu([["the", "the", "the"]], [["the", "cat"]])
        assert r.precisions[0] == pytest.approx(1 / 3)
        assert r.precisions[1] == 0.0
        assert r.bleu == 0.0

    def test_brevity_penalty(self):
        r = corpus_bleu([["a", "b", "c"]], [["a", "b", "c", "d", "e", "f"]])
        assert r.brevity_penalty == pytest.approx(math.exp(-1.0), rel=1e-15)
        assert r.precisions[:3] == [1.0, 1.0, 1.0]
        # Smoothing turns the empty 4-gram order into 1/1, leaving only BP.
        assert corpus_bleu([["a", "b", "c"]], [["a", "b", "c", "d", "e", "f"]], smooth=True).bleu == \
            pytest.approx(100 * math.exp(-1.0), rel=1e-12)

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.tuples(sentence, sentence), min_size=1, max_size=6), st.booleans())
    def test_matches_naive_implementation(self, pairs, smooth):
        hyps, refs = [h for h, _ in pairs], [r for _, r in pairs]
        assert corpus_bleu(hyps, refs, smooth).bleu == pytest.approx(naive_bleu(hyps, refs, smooth), abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(sentence, sentence), min_size=2, max_size=6), st.randoms())
    def test_order_invariant(self, pairs, rnd):
        shuffled = pairs[:]
        rnd.shuffle(shuffled)
        a = corpus_bleu([h for h, _ in pairs], [r for _, r in pairs]).bleu
        b = corpus_bleu([h for h, _ in shuffled], [r for _, r in shuffled]).bleu
        assert a == pytest.approx(b, abs=1e-9)
        assert 0.0 <= a <= 100.0

    def test_report_lines(self):
        lines = corpus_bleu([["a", "b"]], [["a", "b"]]).lines()
        assert lines[0] == "bleu: 0.00" and any(l.startswith("brevity_penalty:") for l in lines)

    def test_misaligned(self):
        with pytest.raises(ValueError):
            corpus_bleu([["a"]], [["a"], ["b"]])


class TestSignificance:
    refs = [[f"w{i}", "x", f"y{i}", "z", "q"] for i in range(50)]

    def test_self_comparison(self):
        assert significance(self.refs, self.refs, self.refs, 500, seed=3) == 1.0

    def test_maximal_effect(self):
        junk = [["nothing"] * 5 for _ in self.refs]
        assert significance(self.refs, junk, self.refs, 2000, seed=1) < 0.01

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        a = [r if rng.random() < 0.6 else r[:3] for r in self.refs]
        b = [r if rng.random() < 0.4 else r[::-1] for r in self.refs]
        assert significance(a, b, self.refs, 1000, seed=9) == significance(b, a, self.refs, 1000, seed=9)

    def test_reproducible_and_bounded(self):
        a = [r[:4] for r in self.refs]
        p1 = significance(a, self.refs, self.refs, 700, seed=4)
        assert p1 == significance(a, self.refs, self.refs, 700, seed=4)
        assert 0.0 < p1 <= 1.0

    def test_bootstrap_flag(self):
        junk = [["nothing"] * 5 for _ in self.refs]
        assert significance(self.refs, junk, self.refs, 300, seed=1, method="bootstrap") < 0.05
        with pytest.raises(ValueError):
            significance(self.refs, junk, self.refs, 10, method="jackknife")


class TestWer:
    def test_identical(self):
        assert wer(list("abc"), list("abc")) == 0.0

    def test_single_substitution(self):
        assert wer("a x c".split(), "a b c".split()) == pytest.approx(1 / 3)

    def test_empty_reference(self):
        assert wer([], []) == 0.0 and wer(["a"], []) == math.inf

    def test_matches_edit_graph_oracle(self, edit_table):
        strings, dist = edit_table
        for i, h in enumerate(strings):
            for j, r in enumerate(strings):
                assert edit_distance(h, r) == dist[i, j]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.sampled_from("abc"), max_size=6), st.lists(st.sampled_from("abc"), max_size=6),
           st.lists(st.sampled_from("abcd"), min_size=1, max_size=3))
    def test_common_suffix_never_adds_edits(self, h, r, tail):
        assert edit_distance(h + tail, r + tail) <= edit_distance(h, r)

    def test_corpus_wer_pools(self):
        assert corpus_wer([["a"], ["b", "c"]], [["a", "x"], ["b", "c"]]) == pytest.approx(1 / 4)
