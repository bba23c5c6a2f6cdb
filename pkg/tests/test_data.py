import importlib.resources
import json

import numpy as np
import pytest
from scipy import stats as sstats

from kssdiag import data


@pytest.fixture
def tiny_matrix():
    rows = np.array([[1, 0], [0, 1]])
    return data.AttributeMatrix((1, 2), rows, np.array([True, True]), ("att_1", "att_2"))


def write_attr_csv(path, rows, header=None):
    m = len(rows[0])
    header = header or "class," + ",".join(f"att_{i+1}" for i in range(m))
    body = "\n".join(f"{i+1}," + ",".join(str(v) for v in r) for i, r in enumerate(rows))
    path.write_text(header + "\n" + body + "\n")


class TestAttributeMatrix:
    def test_two_class_file(self, tmp_path, tiny_matrix):
        f = tmp_path / "attrs.csv"
        write_attr_csv(f, [[1, 0], [0, 1]])
        m = data.load_attribute_matrix(str(f))
        assert m.n_classes == 2 and m.n_attributes == 2
        assert np.array_equal(m.rows, tiny_matrix.rows)
        assert m.class_ids == (1, 2)

    def test_duplicate_rows_rejected(self, tmp_path):
        f = tmp_path / "attrs.csv"
        write_attr_csv(f, [[1, 0], [1, 0]])
        with pytest.raises(data.DataFormatError, match="duplicate"):
            data.load_attribute_matrix(str(f))

    def test_non_binary_entry_names_row(self, tmp_path):
        f = tmp_path / "attrs.csv"
        f.write_text("class,att_1\n1,2\n")
        with pytest.raises(data.DataFormatError, match="row 2"):
            data.load_attribute_matrix(str(f))

    def test_ragged_row_names_row(self, tmp_path):
        f = tmp_path / "attrs.csv"
        f.write_text("class,att_1,att_2\n1,0,1\n2,0\n")
        with pytest.raises(data.DataFormatError, match="row 3"):
            data.load_attribute_matrix(str(f))

    def test_shipped_benchmark_table(self):
        ref = importlib.resources.files("kssdiag") / "assets" / "tep_attributes.csv"
        m = data.load_attribute_matrix(str(ref))
        assert m.n_classes == 15
        assert m.n_attributes == 18
        assert m.class_ids == tuple(range(1, 16))
        # class 13 is the normal state: no fault attribute is active
        assert m.row(13).sum() == 0
        # every attribute describes at least one fault
        assert (m.rows.sum(axis=0) >= 1).all()

    def test_split_partition(self, tiny_matrix):
        m = tiny_matrix.with_split([1], [2])
        assert m.seen_ids == (1,) and m.unseen_ids == (2,)
        assert np.array_equal(m.seen_rows, [[1, 0]])
        assert np.array_equal(m.unseen_rows, [[0, 1]])

    def test_split_overlap_rejected(self, tiny_matrix):
        with pytest.raises(data.SplitError):
            tiny_matrix.with_split([1, 2], [2])

    def test_split_must_cover(self, tiny_matrix):
        with pytest.raises(data.SplitError):
            tiny_matrix.with_split([1], [])

    def test_rows_immutable(self, tiny_matrix):
        with pytest.raises(ValueError):
            tiny_matrix.rows[0, 0] = 0


class TestDatasetCsv:
    def test_one_row_file(self, tmp_path, tiny_matrix):
        f = tmp_path / "d.csv"
        f.write_text("0.1,0.2,0.3,1\n")
        ds = data.load_dataset_csv(str(f), tiny_matrix)
        assert ds.n_samples == 1 and ds.n_features == 3
        assert np.allclose(ds.samples, [[0.1, 0.2, 0.3]])
        assert ds.labels[0] == 1

    def test_unknown_label_rejected(self, tmp_path, tiny_matrix):
        f = tmp_path / "d.csv"
        f.write_text("0.1,0.2,9\n")
        with pytest.raises(data.DataFormatError, match="row 1"):
            data.load_dataset_csv(str(f), tiny_matrix)

    def test_non_numeric_cell_rejected(self, tmp_path, tiny_matrix):
        f = tmp_path / "d.csv"
        f.write_text("0.1,x,1\n")
        with pytest.raises(data.DataFormatError, match="non-numeric"):
            data.load_dataset_csv(str(f), tiny_matrix)

    def test_inconsistent_width_rejected(self, tmp_path, tiny_matrix):
        f = tmp_path / "d.csv"
        f.write_text("0.1,0.2,1\n0.1,0.2,0.3,1\n")
        with pytest.raises(data.DataFormatError, match="row 2"):
            data.load_dataset_csv(str(f), tiny_matrix)

    def test_attribute_merge(self, tmp_path, tiny_matrix):
        f = tmp_path / "d.csv"
        f.write_text("1.0,2.0,2\n3.0,4.0,1\n5.0,6.0,2\n")
        ds = data.load_dataset_csv(str(f), tiny_matrix, split_tag="test")
        for i in range(ds.n_samples):
            assert np.array_equal(ds.attributes[i], tiny_matrix.row(int(ds.labels[i])))

    def test_train_split_rejects_unseen_labels(self, tmp_path, tiny_matrix):
        m = tiny_matrix.with_split([1], [2])
        f = tmp_path / "d.csv"
        f.write_text("1.0,2.0,2\n")
        with pytest.raises(data.DataFormatError, match="unseen"):
            data.load_dataset_csv(str(f), m, split_tag="train")

    def test_round_trip_exact(self, tmp_path, tiny_matrix):
        rng = np.random.default_rng(0)
        ds = data.build_dataset(rng.normal(size=(20, 4)), rng.integers(1, 3, 20), tiny_matrix, "test")
        f = tmp_path / "out.csv"
        data.save_dataset_csv(str(f), ds)
        back = data.load_dataset_csv(str(f), tiny_matrix, split_tag="test")
        assert np.array_equal(back.samples, ds.samples)
        assert np.array_equal(back.labels, ds.labels)

    def test_denoise_hook_is_identity(self):
        x = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(data.denoise(x), x)


class TestZScore:
    def test_hand_arithmetic(self, tiny_matrix):
        ds = data.build_dataset(np.array([[1.0], [2.0], [3.0]]), [1, 1, 1], tiny_matrix, "train")
        stats = data.zscore_fit(ds)
        assert stats.mean[0] == pytest.approx(2.0)
        assert stats.std[0] == pytest.approx(0.816496580927726, abs=1e-12)
        out = data.zscore_apply(stats, ds)
        assert np.allclose(out.samples.ravel(), [-1.224744871, 0.0, 1.224744871], atol=1e-9)

    def test_constant_column_floored(self, tiny_matrix):
        ds = data.build_dataset(np.array([[5.0], [5.0]]), [1, 1], tiny_matrix, "train")
        stats = data.zscore_fit(ds)
        assert stats.std[0] == data.STD_FLOOR
        out = data.zscore_apply(stats, ds)
        assert np.array_equal(out.samples, np.zeros((2, 1)))

    def test_fit_then_apply_centers(self, tiny_matrix):
        rng = np.random.default_rng(1)
        ds = data.build_dataset(rng.normal(5, 3, size=(100, 5)), np.ones(100, dtype=int), tiny_matrix, "train")
        out = data.zscore_apply(data.zscore_fit(ds), ds)
        assert np.abs(out.samples.mean(axis=0)).max() < 1e-9
        assert np.abs(out.samples.std(axis=0) - 1).max() < 1e-6

    def test_test_split_uses_train_stats(self, tiny_matrix):
        train = data.build_dataset(np.array([[0.0], [2.0]]), [1, 1], tiny_matrix, "train")
        test = data.build_dataset(np.array([[4.0]]), [2], tiny_matrix, "test")
        out = data.zscore_apply(data.zscore_fit(train), test)
        assert out.samples[0, 0] == pytest.approx(3.0)  # (4-1)/1


class TestSplits:
    def test_group_a(self):
        seen, unseen = data.make_split("A", range(1, 16))
        assert unseen == (1, 7, 15)
        assert len(seen) == 12 and not set(seen) & set(unseen)

    def test_group_c(self):
        _, unseen = data.make_split("C", range(1, 16))
        assert unseen == (3, 6, 14)

    def test_all_groups_partition(self):
        for g in "ABCDE":
            seen, unseen = data.make_split(g, range(1, 16))
            assert sorted(seen + unseen) == list(range(1, 16))
            assert len(unseen) == 3

    def test_custom_overlap_rejected(self):
        spec = data.SplitSpec("x", (1, 2), (2, 3))
        with pytest.raises(data.SplitError):
            data.make_split(spec, [1, 2, 3])

    def test_missing_class_rejected(self):
        spec = data.SplitSpec("x", (1,), (2,))
        with pytest.raises(data.SplitError):
            data.make_split(spec, [1, 2, 3])

    def test_split_json_group(self, tmp_path):
        f = tmp_path / "split.json"
        f.write_text(json.dumps({"group": "B"}))
        spec = data.load_split_json(str(f))
        assert spec.unseen == (2, 10, 13)

    def test_split_json_custom(self, tmp_path):
        f = tmp_path / "split.json"
        f.write_text(json.dumps({"group": "mine", "seen": [1, 2], "unseen": [3]}))
        spec = data.load_split_json(str(f))
        assert spec.seen == (1, 2) and spec.unseen == (3,)


class TestBalancedBatch:
    def make_train(self, sizes, matrix):
        xs, ys = [], []
        for cid, n in sizes.items():
            xs.append(np.full((n, 2), float(cid)))
            ys.extend([cid] * n)
        return data.build_dataset(np.concatenate(xs), np.array(ys), matrix, "train")

    def test_batch_shape_and_blocks(self, tiny_matrix):
        train = self.make_train({1: 10, 2: 3}, tiny_matrix)
        batch = data.sample_balanced_batch(train, tiny_matrix, 5, np.random.default_rng(0))
        assert batch.samples.shape == (10, 2)
        assert list(batch.labels) == [1] * 5 + [2] * 5  # block-ordered by class id

    def test_single_sample_per_class(self, tiny_matrix):
        train = self.make_train({1: 4, 2: 4}, tiny_matrix)
        batch = data.sample_balanced_batch(train, tiny_matrix, 1, np.random.default_rng(0))
        assert batch.samples.shape == (2, 2)

    def test_empty_class_rejected(self, tiny_matrix):
        train = data.build_dataset(np.zeros((2, 2)), [1, 1], tiny_matrix, "train")
        with pytest.raises(ValueError, match="class 2"):
            data.sample_balanced_batch(train, tiny_matrix, 2, np.random.default_rng(0))

    def test_selection_uniformity_chi_square(self, tiny_matrix):
        # 10^4 single draws from a 10-sample class; frequencies should be uniform
        xs = np.arange(10, dtype=float).reshape(10, 1).repeat(2, axis=1)
        matrix = tiny_matrix.with_split([1], [2])
        train = data.build_dataset(xs, np.ones(10, dtype=int), matrix, "train")
        rng = np.random.default_rng(7)
        counts = np.zeros(10)
        for _ in range(10_000):
            b = data.sample_balanced_batch(train, matrix, 1, rng)
            counts[int(b.samples[0, 0])] += 1
        chi2 = ((counts - 1000.0) ** 2 / 1000.0).sum()
        pvalue = sstats.chi2.sf(chi2, df=9)
        assert pvalue > 0.001


class TestSynthetic:
    def test_default_spec_decodable_by_linear_probe(self):
        spec = data.SyntheticSpec()
        matrix, train, test = data.synth_generate(spec, seed=3)
        assert matrix.n_classes == 6 and matrix.n_attributes == 5
        assert train.n_samples == 4 * 200 and test.n_samples == 6 * 100
        # least-squares linear probe per attribute, thresholded at 0.5
        X = np.hstack([train.samples, np.ones((train.n_samples, 1))])
        for k in range(matrix.n_attributes):
            t = train.attributes[:, k].astype(float)
            w, *_ = np.linalg.lstsq(X, t, rcond=None)
            pred = (X @ w) > 0.5
            assert (pred == (t > 0.5)).mean() >= 0.99

    def test_zero_noise_collapses_to_prototype(self):
        spec = data.SyntheticSpec(noise_scale=0.0, train_per_class=5, test_per_class=2)
        _, train, _ = data.synth_generate(spec, seed=0)
        for cid in np.unique(train.labels):
            block = train.samples[train.labels == cid]
            assert np.allclose(block, block[0])

    def test_zero_noise_attribute_groups_linearly_separable(self):
        spec = data.SyntheticSpec(noise_scale=0.0, train_per_class=3, test_per_class=1)
        matrix, train, _ = data.synth_generate(spec, seed=5)
        X = np.hstack([train.samples, np.ones((train.n_samples, 1))])
        for k in range(matrix.n_attributes):
            t = train.attributes[:, k].astype(float)
            w, *_ = np.linalg.lstsq(X, t, rcond=None)
            assert ((X @ w > 0.5) == (t > 0.5)).all()

    def test_same_seed_identical(self):
        a = data.synth_generate(data.SyntheticSpec(), 11)
        b = data.synth_generate(data.SyntheticSpec(), 11)
        assert np.array_equal(a[0].rows, b[0].rows)
        assert np.array_equal(a[1].samples, b[1].samples)
        assert np.array_equal(a[2].samples, b[2].samples)

    def test_seen_columns_vary(self):
        matrix, _, _ = data.synth_generate(data.SyntheticSpec(), 13)
        seen = matrix.seen_rows
        assert (seen.min(axis=0) == 0).all() and (seen.max(axis=0) == 1).all()

    def test_more_attributes_than_features_warns(self):
        spec = data.SyntheticSpec(n_attributes=25, n_features=20, n_classes=7, train_per_class=2, test_per_class=1)
        with pytest.warns(UserWarning, match="attributes"):
            data.synth_generate(spec, 1)
