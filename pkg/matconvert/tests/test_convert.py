"""Converter round-trips against the simulator's native loader, plus
validation of corrupted bundles."""
import numpy as np
import pytest
import scipy.io

import convert
import fixtures
from flsim.data import load_native


@pytest.fixture
def bundle_path(tmp_path):
    path = tmp_path / "bundle.mat"
    raw = fixtures.write_fixture(path, n=20, dim=512, seed=4)
    return path, raw


def test_round_trip_matches_source(bundle_path, tmp_path):
    path, raw = bundle_path
    out_train = tmp_path / "train.flds"
    out_test = tmp_path / "test.flds"
    assert convert.main([str(path), str(out_train), str(out_test)]) == 0

    train = load_native(out_train)
    test = load_native(out_test)
    assert len(train) == 20 and len(test) == 20
    assert train.feature_dim == 512
    assert train.num_classes == 8
    assert np.abs(train.features - raw["Data_train_2"]).max() < 1e-6
    assert np.abs(test.features - raw["Data_test_2"]).max() < 1e-6
    assert np.array_equal(train.labels, raw["label_train_2"].reshape(-1))
    assert np.array_equal(test.labels, raw["label_test_2"].reshape(-1))


def test_permut_flag_reorders_training_rows(bundle_path, tmp_path):
    path, raw = bundle_path
    plain_train = tmp_path / "a.flds"
    permuted_train = tmp_path / "b.flds"
    sink = tmp_path / "t.flds"
    convert.convert(path, plain_train, sink, apply_permut=False)
    convert.convert(path, permuted_train, sink, apply_permut=True)

    plain = load_native(plain_train)
    permuted = load_native(permuted_train)
    order = raw["permut"].reshape(-1)
    assert np.abs(plain.features - raw["Data_train_2"]).max() < 1e-6
    assert np.abs(permuted.features - raw["Data_train_2"][order]).max() < 1e-6
    assert np.array_equal(permuted.labels,
                          raw["label_train_2"].reshape(-1)[order])


def test_missing_array_named(tmp_path):
    raw = fixtures.make_bundle(n=8)
    del raw["label_test_2"]
    path = tmp_path / "broken.mat"
    scipy.io.savemat(path, raw)
    with pytest.raises(convert.BundleError, match="label_test_2"):
        convert.load_bundle(path)


def test_label_count_mismatch_rejected(tmp_path):
    raw = fixtures.make_bundle(n=8)
    raw["label_train_2"] = raw["label_train_2"][:5]
    path = tmp_path / "broken.mat"
    scipy.io.savemat(path, raw)
    with pytest.raises(convert.BundleError, match="labels"):
        convert.load_bundle(path)


def test_label_range_rejected(tmp_path):
    raw = fixtures.make_bundle(n=8)
    raw["label_train_2"][0, 0] = 8
    path = tmp_path / "broken.mat"
    scipy.io.savemat(path, raw)
    with pytest.raises(convert.BundleError, match="labels outside"):
        convert.load_bundle(path)


def test_invalid_permutation_rejected(tmp_path):
    raw = fixtures.make_bundle(n=8)
    raw["permut"] = np.zeros((1, 8), dtype=int)
    path = tmp_path / "broken.mat"
    scipy.io.savemat(path, raw)
    with pytest.raises(convert.BundleError, match="permutation"):
        convert.load_bundle(path)


def test_cli_error_exit_code(tmp_path, capsys):
    raw = fixtures.make_bundle(n=8)
    del raw["permut"]
    path = tmp_path / "broken.mat"
    scipy.io.savemat(path, raw)
    code = convert.main([str(path), str(tmp_path / "a.flds"),
                         str(tmp_path / "b.flds")])
    assert code == 2
    assert "permut" in capsys.readouterr().err
