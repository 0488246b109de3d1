import gzip

import numpy as np
import pytest

from cascaded_vfl.errors import InputError, ParseError
from cascaded_vfl.partition import feature_ranges, load_csv_dataset, make_synthetic, split_features


@pytest.mark.parametrize(
    "d, m, expected",
    [
        (4, 2, [(0, 2), (2, 4)]),
        (5, 2, [(0, 3), (3, 5)]),
        (784, 4, [(0, 196), (196, 392), (392, 588), (588, 784)]),
        (7, 3, [(0, 3), (3, 5), (5, 7)]),
    ],
)
def test_feature_ranges(d, m, expected):
    assert feature_ranges(d, m) == expected


def test_more_clients_than_features():
    with pytest.raises(InputError):
        split_features(np.zeros((3, 2)), np.zeros(3, dtype=int), 3)


def test_shards_reassemble_exactly():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(11, 9))
    y = rng.integers(0, 3, size=11)
    ds = split_features(x, y, 4)
    assert ds.num_samples == 11 and ds.num_clients == 4
    assert ds.feature_sizes == (3, 2, 2, 2)
    assert np.array_equal(ds.reassemble(), x)
    assert all(s.shape[0] == 11 for s in ds.client_shards)


def test_shuffled_split_still_reassembles():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 6))
    ds = split_features(x, np.arange(5) % 2, 2, shuffle_rng=np.random.default_rng(9))
    assert ds.column_order is not None
    assert np.array_equal(ds.reassemble(), x)


def test_dataset_is_read_only():
    ds = split_features(np.ones((2, 2)), np.array([0, 1]), 2)
    with pytest.raises(ValueError):
        ds.client_shards[0][0, 0] = 5.0
    with pytest.raises(ValueError):
        ds.labels[0] = 1


def test_label_range_checked():
    with pytest.raises(InputError):
        split_features(np.ones((2, 2)), np.array([0, 3]), 1, num_classes=3)


def test_synthetic_is_deterministic_and_balanced():
    a = make_synthetic(103, 5, 4, 2.0, np.random.default_rng(3))
    b = make_synthetic(103, 5, 4, 2.0, np.random.default_rng(3))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    counts = np.bincount(a[1], minlength=4)
    assert counts.max() - counts.min() <= 1


def _logistic_regression_accuracy(x, y, steps=500, lr=0.5):
    # independent oracle: full-batch gradient descent on a binary logistic model
    xb = np.hstack([x, np.ones((len(x), 1))])
    w = np.zeros(xb.shape[1])
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-xb @ w))
        w -= lr * xb.T @ (p - y) / len(y)
    return np.mean((xb @ w > 0) == (y == 1))


def test_well_separated_blobs_are_linearly_separable():
    x, y = make_synthetic(1000, 2, 2, 10.0, np.random.default_rng(4))
    assert _logistic_regression_accuracy(x, y) >= 0.99


def test_zero_separation_is_chance():
    x, y = make_synthetic(4000, 2, 2, 0.0, np.random.default_rng(5))
    # no signal to find: even the training accuracy stays near chance
    acc = _logistic_regression_accuracy(x, y)
    assert acc < 0.56


def test_csv_pixel_scaling(tmp_path):
    p = tmp_path / "tiny.csv"
    p.write_text("0,0,255\n1,255,0\n")
    x, y = load_csv_dataset(p)
    assert y.tolist() == [0, 1]
    assert x.tolist() == [[0.0, 1.0], [1.0, 0.0]]


def test_csv_header_crlf_and_gzip(tmp_path):
    p = tmp_path / "h.csv.gz"
    with gzip.open(p, "wt", newline="") as fh:
        fh.write("label,a,b\r\n2,0.5,0.25\r\n")
    x, y = load_csv_dataset(p, has_header=True)
    assert y.tolist() == [2]
    assert x.tolist() == [[0.5, 0.25]]


def test_non_pixel_values_left_alone(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("0,1.5,-2\n1,3,4\n")
    x, _ = load_csv_dataset(p)
    assert x.tolist() == [[1.5, -2.0], [3.0, 4.0]]


@pytest.mark.parametrize("text, row", [("0,1,2\n1,2\n", 2), ("0,1\nx,3\n", 2), ("0,1\n1,abc\n", 2)])
def test_malformed_rows_report_row_number(tmp_path, text, row):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(ParseError) as info:
        load_csv_dataset(p)
    assert info.value.row == row


def test_empty_file(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    with pytest.raises(InputError):
        load_csv_dataset(p)


def test_bundled_mnist_subset_shapes():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "data"
    x, y = load_csv_dataset(root / "mnist_test_2k.csv.gz")
    assert x.shape == (2000, 784)
    assert set(np.unique(y).tolist()) == set(range(10))
    assert 0.0 <= x.min() and x.max() == 1.0
