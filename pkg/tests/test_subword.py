import warnings
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmdelib.subword import (
    EOS, PAD, UNK, SubwordModel, Vocabulary, apply_bpe, detokenize, learn_bpe, merge_subwords, tokenize,
)

WORDS = ["low", "lower", "lowest", "newer", "wider", "new", "newest", "widest", "slow", "slower",
         "flow", "flower", "owner", "own", "snow", "snowed", "lowered", "renew", "wild", "wilder"]


def replay_oracle(merges, word):
    """Apply each merge in learned order over the whole word (reference BPE replay)."""
    syms = list(word)
    for a, b in merges:
        i, out = 0, []
        while i < len(syms):
            if i + 1 < len(syms) and (syms[i], syms[i + 1]) == (a, b):
                out.append(a + b)
                i += 2
            else:
                out.append(syms[i])
                i += 1
        syms = out
    return tuple(syms)


class TestTokenize:
    def test_punctuation(self):
        assert tokenize("Hello, world!") == ["hello", ",", "world", "!"]

    def test_single(self):
        assert tokenize("abc") == ["abc"]

    @settings(max_examples=100, deadline=None)
    @given(st.text(alphabet="abcXYZ ,.!?'()-", max_size=40))
    def test_idempotent_on_normalized_text(self, text):
        toks = tokenize(text)
        assert tokenize(detokenize(toks)) == toks


class TestLearnBpe:
    def test_first_merge_from_pair_counts(self):
        model = learn_bpe(["low low lower"], 1)
        pairs = Counter()
        for w in "low low lower".split():
            pairs.update(zip(w, w[1:]))
        top = max(pairs.values())
        assert model.merges == [min(p for p, c in pairs.items() if c == top)] == [("l", "o")]

    def test_zero_merges_is_character_level(self):
        model = learn_bpe(["lower newer"], 0)
        assert apply_bpe(model, ["ab"]) == ["a@@", "b"]

    def test_deterministic(self):
        assert learn_bpe([" ".join(WORDS)] * 3, 30).merges == learn_bpe([" ".join(WORDS)] * 3, 30).merges

    def test_merges_unique(self):
        merges = learn_bpe([WORDS] * 2, 200).merges
        assert len(set(merges)) == len(merges)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            learn_bpe(["a"], -1)


class TestApplyBpe:
    def test_fully_merged_word(self):
        model = SubwordModel([("l", "o"), ("lo", "w")])
        assert apply_bpe(model, ["low"]) == ["low"]

    def test_unseen_word_empty_model(self):
        assert apply_bpe(SubwordModel(), ["xyz"]) == ["x@@", "y@@", "z"]

    def test_matches_replay_oracle(self):
        model = learn_bpe([WORDS, WORDS[:10]], 40)
        for w in WORDS + ["lowlow", "snowflower", "wwii"]:
            assert model.segment(w) == replay_oracle(model.merges, w)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.text(alphabet="abc", min_size=1, max_size=8), min_size=1, max_size=12),
           st.integers(0, 15))
    def test_replay_oracle_random(self, corpus, n):
        model = learn_bpe([corpus, corpus], n)
        for w in corpus + ["abcabc", "cba"]:
            assert model.segment(w) == replay_oracle(model.merges, w)

    def test_vocabulary_bound(self):
        model = learn_bpe([WORDS], 25)
        pieces = {p for w in WORDS for p in apply_bpe(model, [w])}
        chars = {c for w in WORDS for c in w}
        assert len(pieces) <= 2 * len(chars) + 2 * len(model.merges)

    def test_save_load(self, tmp_path):
        model = learn_bpe([WORDS], 20)
        model.save(tmp_path / "m.bpe")
        assert SubwordModel.load(tmp_path / "m.bpe").merges == model.merges


class TestMergeSubwords:
    def test_simple(self):
        assert merge_subwords(["lo@@", "w"]) == ["low"]

    def test_dangling_marker_warns(self):
        with pytest.warns(UserWarning, match="dangling"):
            assert merge_subwords(["a@@"]) == ["a"]

    def test_roundtrip_corpus(self):
        model = learn_bpe([WORDS], 30)
        sents = [WORDS[i: i + 5] for i in range(0, 20, 3)]
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            for s in sents:
                assert merge_subwords(apply_bpe(model, s)) == s

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.text(alphabet="lowerns", min_size=1, max_size=9), max_size=8))
    def test_roundtrip_property(self, sent):
        model = learn_bpe([WORDS], 30)
        assert merge_subwords(apply_bpe(model, sent)) == sent


class TestVocabulary:
    def test_reserved_ids(self):
        v = Vocabulary.build([["b", "a", "a"]])
        assert v.itos[:4] == ["<pad>", "<s>", "</s>", "<unk>"]
        assert v.stoi["a"] == 4 and v.stoi["b"] == 5 and len(v) == 6

    def test_encode_decode(self):
        v = Vocabulary.build([["x", "y"]])
        ids = v.encode(["x", "z", "y"])
        assert ids[1] == UNK and ids[-1] == EOS
        assert v.decode(ids) == ["x", "<unk>", "y"]
        assert v.decode([PAD] + v.encode(["y"]) + [v.stoi["x"]]) == ["y"]

    def test_bijective(self):
        v = Vocabulary.build([WORDS])
        assert all(v.stoi[t] == i for i, t in enumerate(v.itos))

    def test_save_load(self, tmp_path):
        v = Vocabulary.build([WORDS])
        v.save(tmp_path / "v.tsv")
        assert Vocabulary.load(tmp_path / "v.tsv").itos == v.itos

    def test_load_rejects_bad_reserved(self, tmp_path):
        (tmp_path / "v.tsv").write_text("a\t0\n<s>\t1\n</s>\t2\n<unk>\t3\n", encoding="utf-8")
        with pytest.raises(ValueError, match="reserved"):
            Vocabulary.load(tmp_path / "v.tsv")
