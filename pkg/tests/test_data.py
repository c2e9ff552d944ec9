import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cosbal.data import CosDataset, DatasetError, cluster_index, counts

from conftest import random_dataset


def _ds(cluster_of_unit, treated, cluster_ids=None):
    cluster_ids = cluster_ids or sorted(set(cluster_of_unit))
    n = len(cluster_of_unit)
    return CosDataset(range(n), cluster_of_unit, np.zeros((n, 1)), np.arange(n, dtype=float),
                      cluster_ids, treated, np.zeros((len(cluster_ids), 1)))


def test_cluster_index_groups_units():
    ds = _ds(["a", "a", "b"], [True, False])
    assert cluster_index(ds) == {"a": (0, 1), "b": (2, 2)}


def test_cluster_index_contiguous_after_shuffle():
    ds = _ds(["b", "a", "b", "a"], [True, False], ["a", "b"])
    idx = cluster_index(ds)
    assert idx == {"a": (0, 1), "b": (2, 3)}
    assert list(ds.unit_ids) == [1, 3, 0, 2]


def test_singleton_cluster_index():
    ds = CosDataset([0, 1], ["a", "b"], [[0.0], [1.0]], [1.0, 2.0], ["a", "b"], [True, False], [[0.0], [0.0]])
    assert cluster_index(ds)["a"] == (0, 0)


def test_empty_dataset_rejected():
    with pytest.raises(DatasetError):
        CosDataset([], [], np.zeros((0, 1)), [], [], [], np.zeros((0, 1)))


def test_counts_examples():
    assert counts(_ds([0] * 3 + [1] * 5, [True, False])) == (8, 2, 3, 5)
    assert counts(_ds([0] * 2 + [1] * 2 + [2] * 4, [True, True, False])) == (8, 3, 4, 4)


def test_all_treated_rejected():
    with pytest.raises(DatasetError, match="no control clusters"):
        _ds([0, 1], [True, True])


def test_no_treated_rejected():
    with pytest.raises(DatasetError, match="no treated clusters"):
        _ds([0, 1], [False, False])


@pytest.mark.parametrize("kwargs, msg", [
    (dict(unit_cluster_ids=["a", "z"]), "unknown cluster"),
    (dict(y=[1.0, np.nan]), "finite"),
    (dict(unit_ids=[0, 0]), "duplicate unit"),
    (dict(cluster_ids=["a", "b", "c"], treated=[True, False, False], W=np.zeros((3, 1))), "without units"),
])
def test_invalid_inputs(kwargs, msg):
    base = dict(unit_ids=[0, 1], unit_cluster_ids=["a", "b"], X=np.zeros((2, 1)), y=[1.0, 2.0],
                cluster_ids=["a", "b"], treated=[True, False], W=np.zeros((2, 1)))
    base.update(kwargs)
    with pytest.raises(DatasetError, match=msg):
        CosDataset(**base)


def test_arrays_are_read_only(small):
    with pytest.raises(ValueError):
        small.y[0] = 1.0


def test_records_and_sums(small):
    units, clusters = small.units, small.clusters
    assert len(units) == small.n and len(clusters) == small.m
    assert [c.size for c in clusters] == list(small.sizes)
    np.testing.assert_allclose(small.cluster_sums(np.ones(small.n)), small.sizes)


def test_select_clusters_with_repeats(small):
    t, c = int(np.flatnonzero(small.treated)[0]), int(np.flatnonzero(~small.treated)[0])
    sub = small.select_clusters([t, t, c])
    assert sub.m == 3
    assert sub.n == 2 * small.sizes[t] + small.sizes[c]
    assert len(set(sub.cluster_ids)) == 3


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_counts_invariant_under_unit_permutation(seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, m=5)
    perm = rng.permutation(ds.n)
    shuffled = CosDataset(ds.unit_ids[perm], ds.cluster_ids[ds.cluster][perm], ds.X[perm], ds.y[perm],
                          ds.cluster_ids, ds.treated, ds.W)
    assert counts(shuffled) == counts(ds)
    n, m, n1, n0 = counts(ds)
    assert n == n1 + n0 and n1 == ds.sizes[ds.treated].sum()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_serialization_round_trip(seed, tmp_path_factory):
    ds = random_dataset(np.random.default_rng(seed), m=4)
    path = tmp_path_factory.mktemp("ds") / "ds.json"
    ds.save(path)
    back = CosDataset.load(path)
    assert list(back.unit_ids) == list(ds.unit_ids)
    assert list(back.cluster_ids) == list(ds.cluster_ids)
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.W, ds.W)
    np.testing.assert_array_equal(back.treated, ds.treated)
    assert back.x_names == ds.x_names and back.w_names == ds.w_names


def test_round_trip_tuple_ids(small, tmp_path):
    t, c = int(np.flatnonzero(small.treated)[0]), int(np.flatnonzero(~small.treated)[0])
    sub = small.select_clusters([t, c, c])
    sub.save(tmp_path / "s.json")
    back = CosDataset.load(tmp_path / "s.json")
    assert list(back.cluster_ids) == list(sub.cluster_ids)
    assert list(back.unit_ids) == list(sub.unit_ids)
