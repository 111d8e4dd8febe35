import gzip
import json

import numpy as np
import pytest

from fedgbm import data
from fedgbm.core.dataset import Dataset
from fedgbm.data import (PartitionSpec, load_csv, load_libsvm, load_table, make_synthetic,
                         partition_files, train_test_split, vertical_partition, write_csv)
from fedgbm.errors import ConfigError, DataError


def test_small_csv(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("id,label,x,y\na,1,0.5,2\nb,0,1.5,\nc,1,NA,3\n")
    ds = load_csv(p)
    assert ds.ids == [b"a", b"b", b"c"]
    assert ds.labels.tolist() == [1, 0, 1]
    assert ds.features.shape == (3, 2) and ds.feature_names == ["x", "y"]
    assert np.isnan(ds.features[1, 1]) and np.isnan(ds.features[2, 0])


@pytest.mark.parametrize("body, row", [("id,label,x\na,1,0.5\nb,0\n", 3),
                                       ("id,label,x\na,1,0.5\nb,0,zz\n", 3),
                                       ("id,label,x\na,2,0.5\n", 2)])
def test_bad_csv_rows_report_row_number(tmp_path, body, row):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(DataError, match=f"row {row}"):
        load_csv(p)


def test_libsvm(tmp_path):
    p = tmp_path / "t.libsvm"
    p.write_text("1 3:0.5\n-1 1:2 2:1\n")
    ds = load_libsvm(p)
    np.testing.assert_array_equal(ds.features, [[0, 0, 0.5], [2, 1, 0]])
    assert ds.labels.tolist() == [1, 0]
    with pytest.raises(DataError):
        load_libsvm(p, n_features=2)
    (tmp_path / "bad.libsvm").write_text("1 0:1\n")
    with pytest.raises(DataError, match="row 1"):
        load_libsvm(tmp_path / "bad.libsvm")


def test_gzip_and_format_guess(tmp_path):
    p = tmp_path / "t.csv.gz"
    with gzip.open(p, "wt") as fh:
        fh.write("id,label,x\na,1,0.5\n")
    assert load_table(p).n_samples == 1
    with pytest.raises(DataError):
        load_table(tmp_path / "missing.csv")
    with pytest.raises(DataError):
        data.guess_format("x.parquet")


def test_adult_shape(adult):
    assert adult.n_features == 123
    assert adult.n_samples > 30000
    assert set(np.unique(adult.labels)) == {0, 1}


def test_adult_61_62_split(adult):
    a, b = vertical_partition(adult, PartitionSpec(a_features=61, seed=0))
    assert (a.n_features, b.n_features) == (61, 62)
    assert a.ids == b.ids and b.labels is None
    assert not set(a.feature_names) & set(b.feature_names)


def test_even_split_of_116_columns():
    ds = make_synthetic(50, 116, seed=1)
    a, b = vertical_partition(ds, PartitionSpec(seed=2))
    assert (a.n_features, b.n_features) == (58, 58)


def test_partition_is_lossless_and_deterministic():
    ds = make_synthetic(100, 10, seed=3)
    spec = PartitionSpec(a_features=4, seed=5)
    a, b = vertical_partition(ds, spec)
    a2, b2 = vertical_partition(ds, spec)
    assert a.ids == a2.ids and np.array_equal(a.features, a2.features)
    cols = {}
    for part in (a, b):
        for j, name in enumerate(part.feature_names):
            cols[name] = part.features[:, j]
    for j, name in enumerate(ds.feature_names):
        np.testing.assert_array_equal(cols[name], ds.features[:, j])
    np.testing.assert_array_equal(a.labels, ds.labels)


def test_drop_rate():
    ds = make_synthetic(1000, 6, seed=4)
    a, b = vertical_partition(ds, PartitionSpec(seed=1, drop_rate=0.0))
    assert a.ids == b.ids
    a, b = vertical_partition(ds, PartitionSpec(seed=1, drop_rate=0.2))
    assert a.ids != b.ids
    # each side keeps 80% independently, so about 0.8 * 0.8 of the rows are shared
    assert 590 < len(set(a.ids) & set(b.ids)) < 690
    assert 760 < a.n_samples < 840
    with pytest.raises(ConfigError):
        vertical_partition(ds, PartitionSpec(drop_rate=1.0))


@pytest.mark.parametrize("spec", [PartitionSpec(a_features=["f0", "f1"], b_features=["f1", "f2"]),
                                  PartitionSpec(a_features=4, b_features=4),
                                  PartitionSpec(a_features=["nope"]),
                                  PartitionSpec(a_features=["f0"], b_features=["f1"])])
def test_bad_specs(spec):
    with pytest.raises(ConfigError):
        vertical_partition(make_synthetic(10, 6), spec)


def test_unlabelled_source_rejected():
    with pytest.raises(DataError):
        vertical_partition(Dataset(["a"], np.zeros((1, 2))), PartitionSpec())


def test_train_test_split_stratified():
    ds = make_synthetic(1001, 4, seed=6)
    tr, te = train_test_split(ds, 0.8, seed=2)
    assert tr.n_samples == round(0.8 * 1001) and tr.n_samples + te.n_samples == 1001
    assert not set(tr.ids) & set(te.ids)
    for c in (0, 1):
        want = 0.8 * (ds.labels == c).sum()
        assert abs((tr.labels == c).sum() - want) <= 1
    tr2, _ = train_test_split(ds, 0.8, seed=2)
    assert tr.ids == tr2.ids
    with pytest.raises(ConfigError):
        train_test_split(ds, 1.0)


def test_csv_roundtrip(tmp_path):
    ds = make_synthetic(30, 3, seed=7)
    ds.features[0, 1] = np.nan
    back = load_csv(write_csv(ds, tmp_path / "d.csv"))
    assert back.ids == ds.ids
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_partition_files_with_manifest(tmp_path):
    src = write_csv(make_synthetic(200, 8, seed=8), tmp_path / "src.csv")
    out_a, out_b = tmp_path / "a.csv", tmp_path / "b.csv"
    man = partition_files(src, out_a, out_b, PartitionSpec(a_features=3, seed=1, id_column="id"),
                          manifest_path=tmp_path / "m.json")
    a, b = load_csv(out_a), load_csv(out_b, label_column=None)
    at, bt = load_csv(data.test_path(out_a)), load_csv(data.test_path(out_b), label_column=None)
    assert a.n_features == 3 and b.n_features == 5 and b.labels is None
    assert a.ids == b.ids and at.ids == bt.ids
    assert a.n_samples + at.n_samples == 200
    obj = json.loads((tmp_path / "m.json").read_text())
    assert obj["source_sha256"] == data.file_digest(src)
    assert set(obj["outputs"]) == {str(out_a), str(out_b), str(data.test_path(out_a)),
                                   str(data.test_path(out_b))}
    assert man.outputs[str(out_a)]["rows"] == a.n_samples
    first = out_a.read_bytes()
    partition_files(src, out_a, out_b, PartitionSpec(a_features=3, seed=1, id_column="id"))
    assert out_a.read_bytes() == first


def test_synthetic_is_deterministic():
    a, b = make_synthetic(50, 5, seed=9), make_synthetic(50, 5, seed=9)
    assert a.ids == b.ids and np.array_equal(a.features, b.features)
    assert 0 < a.labels.mean() < 1
