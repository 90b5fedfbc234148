import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmdelib.features import (
    MAGIC, N_CATEGORIES, AlignmentError, FeatureFormatError, VisualContext, VisualFeature, avgpool_to_matrix,
    conv_to_regions, load_features, read_feature_array, regions_to_conv, ten_hot, to_context, top_k_mask,
    write_features,
)
from mmdelib.tensor_core import Tensor, backward


def brute_top10(scores):
    """Top ten by repeated max extraction; the first index wins ties."""
    s = [float(x) for x in scores]
    kept = set()
    for _ in range(10):
        best = None
        for i, v in enumerate(s):
            if i not in kept and (best is None or v > s[best]):
                best = i
        kept.add(best)
    return kept


class TestAvgPool:
    def test_index_identity(self):
        out = avgpool_to_matrix(np.arange(2048))
        assert out.shape == (32, 64)
        assert (out[0, 0], out[0, 63], out[31, 63]) == (0, 63, 2047)

    def test_zero(self):
        assert not avgpool_to_matrix(np.zeros(2048)).any()

    def test_roundtrip(self):
        f = np.random.default_rng(0).normal(size=2048)
        np.testing.assert_array_equal(avgpool_to_matrix(f).ravel(), f)

    def test_wrong_length(self):
        with pytest.raises(FeatureFormatError):
            avgpool_to_matrix(np.zeros(2047))


class TestConv:
    def test_region_index(self):
        f = np.zeros((7, 7, 2048))
        f[0, 0] = 1.0
        f[6, 6] = 2.0
        rows = conv_to_regions(f)
        assert rows.shape == (49, 2048)
        assert rows[0].min() == 1.0 and rows[48].min() == 2.0

    def test_constant_map(self):
        rows = conv_to_regions(np.full((7, 7, 2048), 0.5))
        assert np.all(rows == rows[0])

    def test_roundtrip(self):
        f = np.random.default_rng(1).normal(size=(7, 7, 2048)).astype(np.float32)
        np.testing.assert_array_equal(regions_to_conv(conv_to_regions(f)), f)


class TestTenHot:
    table = np.random.default_rng(2).normal(size=(N_CATEGORIES, 6))

    def test_strict_top_at_front(self):
        scores = np.zeros(N_CATEGORIES)
        scores[:10] = np.arange(10, 0, -1)
        out = ten_hot(scores, self.table)
        assert not out[10:].any()
        np.testing.assert_array_equal(out[:10], self.table[:10])

    def test_ties_keep_lowest_indices(self):
        mask = top_k_mask(np.full(N_CATEGORIES, 0.3))
        assert set(np.flatnonzero(mask)) == set(range(10))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, N_CATEGORIES, elements=st.sampled_from([0.0, 0.1, 0.2, 0.5, 1.0])))
    def test_matches_brute_force_with_ties(self, scores):
        assert set(np.flatnonzero(top_k_mask(scores))) == brute_top10(scores)

    def test_matches_brute_force_random(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            scores = rng.random(N_CATEGORIES)
            out = ten_hot(scores, self.table)
            assert set(np.flatnonzero(np.any(out != 0, axis=1))) == brute_top10(scores)

    def test_at_most_ten_rows(self):
        out = ten_hot(np.random.default_rng(4).random((3, N_CATEGORIES)), self.table)
        assert out.shape == (3, N_CATEGORIES, 6)
        assert (np.any(out != 0, axis=-1).sum(axis=-1) <= 10).all()

    def test_gradient_reaches_kept_rows_only(self):
        table = Tensor(self.table.copy(), requires_grad=True)
        scores = np.random.default_rng(5).random(N_CATEGORIES)
        backward(ten_hot(scores, table).sum())
        kept = top_k_mask(scores)
        assert np.all(table.grad[kept] == 1.0) and not table.grad[~kept].any()


class TestContext:
    def test_row_counts(self):
        table = np.zeros((N_CATEGORIES, 4))
        assert to_context("AvgPool", np.zeros(2048)).matrix.shape == (32, 64)
        assert to_context("ConvMap", np.zeros((7, 7, 2048))).matrix.shape == (49, 2048)
        assert to_context("ActionScores", np.zeros(N_CATEGORIES), table).matrix.shape == (N_CATEGORIES, 4)

    def test_wrong_rows_rejected(self):
        with pytest.raises(FeatureFormatError):
            VisualContext("ConvMap", np.zeros((32, 64)))

    def test_feature_shape_validated(self):
        with pytest.raises(FeatureFormatError):
            VisualFeature("AvgPool", np.zeros(100))
        with pytest.raises(FeatureFormatError):
            VisualFeature("AvgPool", np.full(2048, np.nan))


class TestFeatureFile:
    def test_two_records(self, tmp_path):
        path = tmp_path / "f.feat"
        with open(path, "wb") as fh:
            fh.write(MAGIC + b"AvgPool 2 2048\n")
            fh.write(np.arange(2 * 2048, dtype="<f4").tobytes())
        feats = load_features(path)
        assert len(feats) == 2 and feats[1].data[0] == 2048.0

    def test_empty(self, tmp_path):
        write_features(tmp_path / "e.feat", "ActionScores", np.zeros((0, N_CATEGORIES)))
        assert load_features(tmp_path / "e.feat") == []

    @pytest.mark.parametrize("tag,shape", [("AvgPool", (3, 2048)), ("ConvMap", (2, 7, 7, 2048)),
                                           ("ActionScores", (4, N_CATEGORIES))])
    def test_roundtrip(self, tmp_path, tag, shape):
        arr = np.random.default_rng(6).normal(size=shape).astype(np.float32)
        write_features(tmp_path / "r.feat", tag, arr)
        got_tag, got = read_feature_array(tmp_path / "r.feat", tag)
        assert got_tag == tag
        np.testing.assert_array_equal(got, arr)
        assert [f.tag for f in load_features(tmp_path / "r.feat")] == [tag] * shape[0]

    def test_truncated_payload(self, tmp_path):
        write_features(tmp_path / "t.feat", "AvgPool", np.zeros((2, 2048)))
        data = (tmp_path / "t.feat").read_bytes()
        (tmp_path / "t.feat").write_bytes(data[:-4])
        with pytest.raises(FeatureFormatError, match="payload"):
            load_features(tmp_path / "t.feat")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "b.feat").write_bytes(b"NOTFEAT\nAvgPool 0 2048\n")
        with pytest.raises(FeatureFormatError, match="magic"):
            load_features(tmp_path / "b.feat")

    def test_tag_mismatch(self, tmp_path):
        write_features(tmp_path / "m.feat", "AvgPool", np.zeros((1, 2048)))
        with pytest.raises(FeatureFormatError):
            load_features(tmp_path / "m.feat", "ConvMap")

    def test_misaligned_count(self, tmp_path):
        write_features(tmp_path / "a.feat", "AvgPool", np.zeros((2, 2048)))
        with pytest.raises(AlignmentError):
            read_feature_array(tmp_path / "a.feat", expected=3)
