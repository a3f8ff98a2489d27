import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from foglab import data
from foglab.data import ImuDataset, SplitSpec
from foglab.errors import ParseError, SchemaError, StratificationError, ValidationError

HEADER = ",".join(data.DEFAULT_SCHEMA.values())
TABLE1_ROW = "1.359375, 0.105983, -0.32385, 0.838768, 8.897047, -16.8301, 33.93851, 0"


def _csv(tmp_path, *rows, header=HEADER):
    p = tmp_path / "imu.csv"
    p.write_text("\n".join([header, *rows]) + "\n", encoding="utf-8")
    return p


def _toy(n0, n1, user=1, seed=0):
    rng = np.random.default_rng(seed)
    n = n0 + n1
    feats = rng.normal(size=(n, 7))
    feats[:, 0] = np.arange(n) / 128
    labels = np.r_[np.zeros(n0, int), np.ones(n1, int)]
    return ImuDataset(feats, labels, np.full(n, user))


class TestLoadCsv:
    def test_table1_row(self, tmp_path):
        ds = data.load_csv(_csv(tmp_path, TABLE1_ROW))
        (s,) = ds.samples
        assert s == data.ImuSample(1.359375, 0.105983, -0.32385, 0.838768, 8.897047, -16.8301, 33.93851,
                                   label=0, user_id=0)

    def test_header_only_gives_empty_dataset(self, tmp_path):
        assert len(data.load_csv(_csv(tmp_path))) == 0

    def test_flag_two_rejected_with_row(self, tmp_path):
        bad = TABLE1_ROW[:-1] + "2"
        with pytest.raises(ValidationError) as exc:
            data.load_csv(_csv(tmp_path, TABLE1_ROW, bad))
        assert exc.value.row == 2

    def test_missing_column_named(self, tmp_path):
        header = HEADER.replace("GYR SI [deg/s]", "GYR_SI")
        with pytest.raises(SchemaError, match="GYR SI"):
            data.load_csv(_csv(tmp_path, TABLE1_ROW, header=header))

    def test_non_numeric_cell(self, tmp_path):
        with pytest.raises(ParseError, match="row 1") as exc:
            data.load_csv(_csv(tmp_path, TABLE1_ROW.replace("8.897047", "abc")))
        assert exc.value.row == 1

    def test_missing_values_rejected_and_counted(self, tmp_path):
        ds, report = data.load_csv_with_report(_csv(tmp_path, TABLE1_ROW, TABLE1_ROW.replace("8.897047", "")))
        assert len(ds) == 1
        assert report.rows_read == 2 and report.rejected["missing_value"] == 1
        assert "rejected.missing_value = 1" in report.to_text()

    def test_user_column_mapped(self, tmp_path):
        schema = {**data.DEFAULT_SCHEMA, "user_id": "user"}
        ds = data.load_csv(_csv(tmp_path, TABLE1_ROW + ",3", header=HEADER + ",user"), schema)
        assert ds.user_ids.tolist() == [3]

    def test_round_trip(self, tmp_path):
        ds = data.generate_synthetic(2, 50, 0.3, seed=1)
        path = tmp_path / "rt.csv"
        data.write_csv(ds, path)
        back = data.load_csv(path, {**data.DEFAULT_SCHEMA, "user_id": "user_id"})
        np.testing.assert_array_equal(back.features, ds.features)
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_array_equal(back.user_ids, ds.user_ids)


class TestMergeAndBalance:
    def test_merge_sizes(self):
        merged = data.merge_users([_toy(5, 5), _toy(10, 10)], [1, 2])
        assert len(merged) == 30
        assert (merged.user_ids == 1).sum() == 10 and (merged.user_ids == 2).sum() == 20

    def test_merge_single_identity(self):
        ds = _toy(3, 4, user=0)
        merged = data.merge_users([ds], [1])
        np.testing.assert_array_equal(merged.features, ds.features)
        assert set(merged.user_ids) == {1}

    def test_merge_duplicate_ids(self):
        with pytest.raises(ValueError):
            data.merge_users([_toy(1, 1), _toy(1, 1)], [1, 1])

    @pytest.mark.parametrize("n0,n1,ratio,expected", [
        (1000, 250, 1.0, (250, 250)),
        (300, 300, 1.0, (300, 300)),
        (1000, 250, 2.0, (500, 250)),
    ])
    def test_balance_counts(self, n0, n1, ratio, expected):
        assert data.downsample_balance(_toy(n0, n1), ratio, seed=3).class_counts() == expected

    def test_balance_count_by_enumeration(self):
        # brute force: largest majority size m with m / 250 <= 2
        ratio, minority = 2.0, 250
        m = max(k for k in range(1001) if k / minority <= ratio)
        assert data.downsample_balance(_toy(1000, minority), ratio, 0).class_counts() == (m, minority)

    def test_balance_needs_both_classes(self):
        with pytest.raises(ValidationError):
            data.downsample_balance(_toy(10, 0), 1.0, 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 60), st.integers(1, 60), st.floats(1.0, 4.0), st.integers(0, 2**32 - 1))
    def test_balance_properties(self, n0, n1, ratio, seed):
        ds = _toy(n0, n1)
        idx = data.balance_indices(ds.labels, ratio, seed)
        assert len(np.unique(idx)) == len(idx)
        assert np.all(np.diff(idx) > 0)  # order preserved
        minority = 1 if n1 <= n0 else 0
        assert (ds.labels[idx] == minority).sum() == (ds.labels == minority).sum()
        kept = ds.labels[idx]
        major = (kept != minority).sum()
        assert major <= ratio * (kept == minority).sum()
        np.testing.assert_array_equal(idx, data.balance_indices(ds.labels, ratio, seed))


class TestWindows:
    def test_count(self):
        ws = data.make_windows(_toy(10, 0), 5, 5)
        assert len(ws) == 2 and ws.windows.shape == (2, 5, 6)

    def test_label_rules_on_one_window(self):
        labels = [0, 0, 0, 1]
        got = {rule: data.window_label(labels, rule) for rule in data.LABEL_RULES}
        assert got == {"majority": 0, "any_positive": 1, "last_sample": 1}
        assert data.window_label([0, 0, 1, 1], "majority") == 1

    def test_windows_stay_within_user(self):
        ds = data.merge_users([_toy(7, 0), _toy(3, 6, seed=1)], [1, 2])
        ws = data.make_windows(ds, 4, 2)
        assert len(ws) == data.window_count(7, 4, 2) + data.window_count(9, 4, 2)
        first_user2 = ds.features[ds.user_ids == 2][:4, 1:]
        k = data.window_count(7, 4, 2)
        np.testing.assert_array_equal(ws.windows[k], first_user2)

    def test_short_user_contributes_nothing(self):
        ds = data.merge_users([_toy(3, 0), _toy(6, 4)], [1, 2])
        ws = data.make_windows(ds, 5, 1)
        assert set(ws.user_ids) == {2}

    def test_all_users_too_short(self):
        with pytest.raises(ValidationError):
            data.make_windows(_toy(2, 1), 5, 1)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 40), min_size=1, max_size=4), st.integers(1, 8), st.integers(1, 5))
    def test_closed_form_count(self, lengths, w, s):
        parts = [_toy(n, 0) for n in lengths]
        ds = data.merge_users(parts, list(range(1, len(parts) + 1)))
        expected = sum((n - w) // s + 1 for n in lengths if n >= w)
        if expected == 0:
            with pytest.raises(ValidationError):
                data.make_windows(ds, w, s)
        else:
            assert len(data.make_windows(ds, w, s)) == expected


class TestSplits:
    def test_plain_counts(self):
        tr, te = data.split_indices(np.zeros(100), SplitSpec(0.2, 1, stratified=False))
        assert (len(tr), len(te)) == (80, 20)
        assert sorted(np.r_[tr, te]) == list(range(100))

    def test_deterministic(self):
        y = np.r_[np.zeros(60), np.ones(40)]
        a = data.split_indices(y, SplitSpec(0.2, 5))
        b = data.split_indices(y, SplitSpec(0.2, 5))
        for x, z in zip(a, b):
            np.testing.assert_array_equal(x, z)

    def test_table4_supports(self):
        # 8030 rows whose 20% stratified holdout has supports 1324 / 282
        y = np.r_[np.zeros(6620, int), np.ones(1410, int)]
        _, te = data.split_indices(y, SplitSpec(0.2, 42))
        assert len(te) == 1606
        assert abs((y[te] == 0).sum() - 1324) <= 1 and abs((y[te] == 1).sum() - 282) <= 1

    def test_impossible_stratification(self):
        with pytest.raises(StratificationError):
            data.split_indices(np.r_[np.zeros(50), np.ones(1)], SplitSpec(0.2, 0))

    def test_split_windowset(self):
        ws = data.make_windows(data.generate_synthetic(1, 400, 0.5, seed=2), 10, 5)
        tr, te = data.train_test_split(ws, SplitSpec(0.25, 0))
        assert len(tr) + len(te) == len(ws)

    def test_fraction_bounds(self):
        with pytest.raises(ValueError):
            SplitSpec(1.0)


class TestKfold:
    def test_loo(self):
        folds = data.kfold_indices(10, 10, seed=0)
        assert sorted(int(te[0]) for _, te in folds) == list(range(10))
        assert all(len(te) == 1 for _, te in folds)

    def test_sizes_103(self):
        sizes = sorted(len(te) for _, te in data.kfold_indices(103, 10, seed=1))
        assert sizes == [10] * 7 + [11] * 3

    def test_stratified_counts(self):
        y = np.r_[np.zeros(60, int), np.ones(40, int)]
        for _, te in data.kfold_indices(100, 5, labels=y, seed=3):
            assert abs((y[te] == 0).sum() - 12) <= 1 and abs((y[te] == 1).sum() - 8) <= 1

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            data.kfold_indices(3, 4)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 80), st.integers(2, 10), st.booleans(), st.integers(0, 1000))
    def test_partition(self, n, k, strat, seed):
        k = min(k, n)
        labels = (np.arange(n) % 3 == 0).astype(int) if strat else None
        folds = data.kfold_indices(n, k, labels, seed)
        tests = np.concatenate([te for _, te in folds])
        assert sorted(tests.tolist()) == list(range(n))
        for tr, te in folds:
            assert not set(tr) & set(te) and len(tr) + len(te) == n
        sizes = [len(te) for _, te in folds]
        assert max(sizes) - min(sizes) <= 1


class TestPartition:
    def test_table11_sizes(self):
        ds = data.merge_users([_toy(900, 930), _toy(1300, 1242), _toy(1600, 1545)], [1, 2, 3])
        parts = data.partition_by_user(ds, 20)
        assert {u: len(p) for u, p in parts.items()} == {1: 1830, 2: 2542, 3: 3145}

    def test_below_threshold(self):
        with pytest.raises(ValidationError):
            data.partition_by_user(_toy(10, 9), 20)

    def test_inclusive_boundary(self):
        assert list(data.partition_by_user(_toy(10, 10), 20)) == [1]

    def test_excluded_users_logged(self, caplog):
        ds = data.merge_users([_toy(10, 10), _toy(2, 2)], [1, 2])
        assert list(data.partition_by_user(ds, 20)) == [1]
        assert "user 2 excluded" in caplog.text


class TestSynthetic:
    def test_counts(self):
        ds = data.generate_synthetic(3, 2000, 0.5, seed=7)
        assert len(ds) == 6000 and ds.class_counts()[1] == 3000
        assert ds.users() == [1, 2, 3]

    def test_bit_identical(self):
        a = data.generate_synthetic(3, 500, 0.3, seed=7)
        b = data.generate_synthetic(3, 500, 0.3, seed=7)
        assert a.features.tobytes() == b.features.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_time_sorted_per_user(self):
        ds = data.generate_synthetic(2, 300, 0.4, seed=1)
        for u in ds.users():
            assert np.all(np.diff(ds.features[ds.user_ids == u, 0]) > 0)

    def test_linear_classifier_detects_shift(self):
        from foglab.stacking import fit_logistic, logistic_proba
        ds = data.generate_synthetic(3, 2000, 0.5, seed=7)
        tr, te = data.train_test_split(ds, SplitSpec(0.2, 0))
        model = fit_logistic(tr.features[:, 1:], tr.labels, standardize=True, max_iters=2000)
        acc = np.mean((logistic_proba(model, te.features[:, 1:]) > 0.5) == te.labels)
        assert acc > 0.8
