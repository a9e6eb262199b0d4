import numpy as np
import pytest

from dmtjepa.data import read_corpus
from dmtjepa.evaluation import (
    ProbeReport,
    encode_features,
    export_attention_maps,
    export_similarity_map,
    knn_probe,
    linear_probe,
    similarity_map,
    write_pgm,
    write_probe_report,
)
from dmtjepa.vit import EncoderConfig, init_encoder_params

CFG = EncoderConfig(depth=2, heads=4, embed_dim=64, patch_size=8, image_size=(32, 32), channels=1)


def toy_params(seed=0):
    return init_encoder_params(CFG, np.random.default_rng(seed))


class TestKnnProbe:
    def test_duplicated_train_point_always_correct(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(20, 8))
        labels = rng.integers(0, 3, size=20)
        report = knn_probe(feats, labels, feats.copy(), labels.copy(), k_nn=1)
        assert report.accuracy == 1.0

    def test_random_features_at_chance(self):
        rng = np.random.default_rng(1)
        train = rng.normal(size=(1000, 16))
        test = rng.normal(size=(1000, 16))
        y_train = rng.integers(0, 2, size=1000)
        y_test = rng.integers(0, 2, size=1000)
        report = knn_probe(train, y_train, test, y_test, k_nn=10)
        assert abs(report.accuracy - 0.5) < 0.05

    def test_linearly_separable_features(self):
        rng = np.random.default_rng(2)
        centers = np.eye(3) * 10
        y = np.repeat(np.arange(3), 50)
        train = centers[y] + rng.normal(scale=0.1, size=(150, 3))
        test = centers[y] + rng.normal(scale=0.1, size=(150, 3))
        report = knn_probe(train, y, test, y, k_nn=5)
        assert report.accuracy == 1.0
        assert set(report.per_class) == {0, 1, 2}

    def test_vote_tie_breaks_to_smaller_class(self):
        train = np.array([[1.0, 0.0], [1.0, 0.0]])
        labels = np.array([2, 1])
        report = knn_probe(train, labels, np.array([[1.0, 0.0]]), np.array([1]), k_nn=2)
        # One vote each for classes 1 and 2 -> class 1 wins.
        assert report.accuracy == 1.0

    def test_empty_split_rejected(self):
        with pytest.raises(ValueError):
            knn_probe(np.zeros((0, 4)), [], np.ones((1, 4)), [0])


class TestLinearProbe:
    def test_one_hot_features_reach_full_accuracy(self):
        y = np.repeat(np.arange(3), 20)
        feats = np.eye(3)[y]
        report = linear_probe(feats, y, feats, y, epochs=50, lr=0.1)
        assert report.accuracy == 1.0

    def test_permuted_labels_near_chance(self):
        rng = np.random.default_rng(3)
        y = np.repeat(np.arange(2), 100)
        feats = np.eye(2)[y] + rng.normal(scale=0.05, size=(200, 2))
        y_perm = rng.permutation(y)
        report = linear_probe(feats, y_perm, feats, rng.permutation(y), epochs=30, lr=0.1)
        assert abs(report.accuracy - 0.5) < 0.15

    def test_report_roundtrip(self, tmp_path):
        report = ProbeReport(kind="linear", accuracy=0.75, per_class={0: 0.5, 1: 1.0},
                             train_count=10, test_count=4)
        path = tmp_path / "report.txt"
        write_probe_report(report, path)
        text = path.read_text(encoding="utf-8")
        assert "kind=linear" in text and "accuracy=0.750000" in text
        assert "acc_class_0=0.500000" in text


class TestFeatureExtraction:
    def test_shape_and_determinism(self):
        params = toy_params()
        images = np.random.default_rng(4).uniform(size=(3, 1, 32, 32))
        a = encode_features(params, CFG, images)
        b = encode_features(params, CFG, images)
        assert a.shape == (3, 64)
        np.testing.assert_array_equal(a, b)

    def test_no_gradients_recorded(self):
        params = toy_params()
        images = np.random.default_rng(5).uniform(size=(1, 1, 32, 32))
        encode_features(params, CFG, images)
        assert all(p.grad is None for p in params.values())


class TestAttentionExport:
    def test_rows_sum_to_one_and_pgm_dims(self, tmp_path):
        params = toy_params(6)
        image = np.random.default_rng(6).uniform(size=(1, 32, 32))
        paths = export_attention_maps(params, CFG, image, tmp_path, queries=(0, 5))
        raw = read_corpus(paths["raw"])[0, 0]
        assert raw.shape == (16, 16)
        np.testing.assert_allclose(raw.sum(axis=1), 1.0, atol=1e-6)
        header = paths["mean"].read_bytes().split(b"\n", 3)
        assert header[0] == b"P5"
        assert header[1] == b"32 32"  # grid scaled by patch size
        assert (tmp_path / "attention_q5.pgm").exists()

    def test_byte_identical_reexport(self, tmp_path):
        params = toy_params(7)
        image = np.random.default_rng(7).uniform(size=(1, 32, 32))
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        pa = export_attention_maps(params, CFG, image, a_dir)
        pb = export_attention_maps(params, CFG, image, b_dir)
        for key in pa:
            assert pa[key].read_bytes() == pb[key].read_bytes()

    def test_layer_out_of_range(self, tmp_path):
        params = toy_params(8)
        image = np.zeros((1, 32, 32))
        with pytest.raises(ValueError):
            export_attention_maps(params, CFG, image, tmp_path, layer=5)


class TestSimilarityMap:
    def test_full_fraction_covers_everything(self):
        feats = np.random.default_rng(9).normal(size=(16, 8))
        result = similarity_map(feats, query_index=3, fraction=1.0)
        assert result.mask.all()

    def test_query_always_selected_even_under_ties(self):
        feats = np.ones((16, 8))  # every score ties at 1.0
        result = similarity_map(feats, query_index=15, fraction=0.10)
        assert result.mask[15]
        assert result.mask.sum() == int(np.ceil(0.10 * 16))

    def test_cardinality_and_range(self):
        rng = np.random.default_rng(10)
        for n in (7, 16, 50):
            feats = rng.normal(size=(n, 6))
            result = similarity_map(feats, query_index=0, fraction=0.10)
            assert result.mask.sum() == int(np.ceil(0.10 * n))
            assert np.all((result.scores >= -1.0) & (result.scores <= 1.0))
            assert result.scores[0] == 1.0

    def test_threshold_ties_break_by_index(self):
        feats = np.zeros((4, 2))
        feats[0] = [1.0, 0.0]
        feats[1] = feats[2] = feats[3] = [0.0, 1.0]  # patches 1..3 tie
        result = similarity_map(feats, query_index=0, fraction=0.5)
        np.testing.assert_array_equal(result.selected(), [0, 1])

    def test_export_files(self, tmp_path):
        params = toy_params(11)
        image = np.random.default_rng(11).uniform(size=(1, 32, 32))
        result = export_similarity_map(params, CFG, image, query_index=4, out_dir=tmp_path)
        assert (tmp_path / "similarity_q4.pgm").exists()
        assert (tmp_path / "similarity_q4_mask.pgm").exists()
        raw = read_corpus(tmp_path / "similarity_q4_raw.dmtj")[0, 0]
        np.testing.assert_allclose(raw.ravel(), result.scores, atol=1e-7)

    def test_invalid_inputs(self):
        feats = np.ones((4, 2))
        with pytest.raises(ValueError):
            similarity_map(feats, query_index=9)
        with pytest.raises(ValueError):
            similarity_map(feats, query_index=0, fraction=0.0)


class TestPgm:
    def test_writer_format(self, tmp_path):
        img = np.arange(6, dtype=np.uint8).reshape(2, 3)
        path = tmp_path / "x.pgm"
        write_pgm(path, img)
        raw = path.read_bytes()
        assert raw == b"P5\n3 2\n255\n" + bytes(range(6))
