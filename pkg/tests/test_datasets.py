import json

import numpy as np
import pytest

from marginflow.datasets import (
    XOR_WITNESS_SPEC,
    Dataset,
    DatasetError,
    gen_linear_separable,
    gen_xor_ring,
    load_csv,
    save_csv,
)
from marginflow.net import batch_outputs
from oracles import linearly_separable, qp_max_margin


def test_symmetric_pair():
    ds = gen_linear_separable(3, 2, 2, 1.0, 2.0, symmetric=True)
    nu = np.array(ds.meta["nu"])
    assert ds.n == 2
    assert np.array_equal(ds.X[1], -ds.X[0])
    assert list(ds.y) == [1.0, -1.0]
    assert nu @ ds.X[0] >= 1.0


@pytest.mark.parametrize("seed", range(5))
def test_linear_margin_certificate(seed):
    ds = gen_linear_separable(seed, 30, 3, 0.2, 1.0)
    nu = np.array(ds.meta["nu"])
    assert np.min(ds.y * (ds.X @ nu)) >= 0.2
    assert ds.meta["certified_margin"] == pytest.approx(np.min(ds.y * (ds.X @ nu)))
    assert np.all(np.linalg.norm(ds.X, axis=1) <= 1.0)
    # the QP optimum can only beat the certificate
    _, m = qp_max_margin(ds.X, ds.y)
    assert m >= ds.meta["certified_margin"] - 1e-9


def test_determinism():
    a = gen_linear_separable(7, 50, 4, 0.1)
    b = gen_linear_separable(7, 50, 4, 0.1)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
    assert np.array_equal(gen_xor_ring(2, 16).X, gen_xor_ring(2, 16).X)


def test_linear_generator_errors():
    with pytest.raises(DatasetError):
        gen_linear_separable(0, 5, 2, 1.0, 1.0)
    with pytest.raises(DatasetError):
        gen_linear_separable(0, 5, 40, 0.9, 1.0)


@pytest.mark.parametrize("seed", range(4))
def test_xor_ring_properties(seed):
    ds = gen_xor_ring(seed, 24)
    assert ds.n == 24
    w = np.array(ds.meta["witness_weights"])
    assert np.min(ds.y * batch_outputs(XOR_WITNESS_SPEC, w, ds.X)) > 0
    assert ds.meta["witness_margin"] > 0
    assert not linearly_separable(ds.X, ds.y)
    quadrant = (np.sign(ds.X[:, 0]) > 0).astype(int) * 2 + (np.sign(ds.X[:, 1]) > 0)
    assert np.bincount(quadrant, minlength=4).tolist() == [6, 6, 6, 6]
    assert np.array_equal(ds.y, np.sign(ds.X[:, 0] * ds.X[:, 1]))


def test_xor_ring_size_check():
    with pytest.raises(DatasetError):
        gen_xor_ring(0, 10)
    with pytest.raises(DatasetError):
        gen_xor_ring(0, 4)


def test_load_plain_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1.0,2.0,1\n-1.0,0.5,-1\n")
    ds = load_csv(p)
    assert ds.n == 2 and ds.dim == 2
    assert list(ds.y) == [1.0, -1.0]


def test_load_rejects_bad_label(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1.0,2.0,1\n-1.0,0.5,0\n")
    with pytest.raises(DatasetError, match="line 2"):
        load_csv(p)


def test_load_rejects_ragged_rows(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("x1,x2,y\n1.0,2.0,1\n1.0,-1\n")
    with pytest.raises(DatasetError, match="line 3"):
        load_csv(p)


def test_load_rejects_empty(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("")
    with pytest.raises(DatasetError):
        load_csv(p)


def test_round_trip_is_exact(tmp_path):
    ds = gen_linear_separable(1, 40, 3, 0.25)
    p = save_csv(ds, tmp_path / "lin.csv")
    back = load_csv(p)
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y)
    assert back.meta["nu"] == ds.meta["nu"]
    assert json.loads((tmp_path / "lin.meta.json").read_text())["generator"] == "linear"


def test_dataset_invariants():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((0, 2)), [])
    with pytest.raises(DatasetError):
        Dataset([[1.0, 2.0]], [2])
    assert Dataset([[1.0, 2.0], [3.0, 4.0]], [1, -1]).subset([1]).n == 1
