import numpy as np
import pandas as pd
import pytest

from cosbal.ingest import (
    IngestError,
    MissingColumn,
    MissingValue,
    NonConstantTreatmentWithinCluster,
    SchemaConfig,
    UnparseableValue,
    load_dataset,
)


def _write(tmp_path, units, clusters=None):
    pd.DataFrame(units).to_csv(tmp_path / "units.csv", index=False)
    if clusters is not None:
        pd.DataFrame(clusters).to_csv(tmp_path / "clusters.csv", index=False)


def _schema(tmp_path, **kw):
    base = dict(unit_file=tmp_path / "units.csv", unit_id_column="id", cluster_id_column="school",
                treatment_column="z", outcome_column="y")
    base.update(kw)
    return SchemaConfig(**base)


def test_two_row_file(tmp_path):
    _write(tmp_path, {"id": [1, 2], "school": ["a", "b"], "z": [1, 0], "y": [3.0, 4.0]})
    ds = load_dataset(_schema(tmp_path))
    assert (ds.n, ds.m) == (2, 2)
    assert list(ds.treated) == [True, False]


def test_nonconstant_treatment(tmp_path):
    _write(tmp_path, {"id": [1, 2, 3], "school": ["a", "a", "b"], "z": [1, 0, 0], "y": [1, 2, 3]})
    with pytest.raises(NonConstantTreatmentWithinCluster, match="'a'"):
        load_dataset(_schema(tmp_path))


def test_mean_aggregate(tmp_path):
    _write(tmp_path, {"id": [1, 2, 3], "school": ["a", "a", "b"], "z": [1, 1, 0], "y": [0, 0, 0],
                      "score": [1.0, 3.0, 5.0]})
    ds = load_dataset(_schema(tmp_path, aggregate_unit_covariates=[("score", "mean")]))
    assert ds.w_names == ("score_mean",)
    np.testing.assert_allclose(ds.W[:, 0], [2.0, 5.0])


def test_proportion_aggregate_requires_binary(tmp_path):
    _write(tmp_path, {"id": [1, 2, 3], "school": ["a", "a", "b"], "z": [1, 1, 0], "y": [0, 0, 0],
                      "f": [1, 0, 2]})
    with pytest.raises(UnparseableValue, match="row 4"):
        load_dataset(_schema(tmp_path, aggregate_unit_covariates=[("f", "proportion")]))


def test_missing_column(tmp_path):
    _write(tmp_path, {"id": [1, 2], "school": ["a", "b"], "z": [1, 0], "y": [3.0, 4.0]})
    with pytest.raises(MissingColumn, match="age"):
        load_dataset(_schema(tmp_path, unit_covariates=["age"]))


def test_missing_value_names_row(tmp_path):
    (tmp_path / "units.csv").write_text("id,school,z,y\n1,a,1,3\n2,b,0,\n")
    with pytest.raises(MissingValue, match="row 3"):
        load_dataset(_schema(tmp_path))


def test_unparseable_value(tmp_path):
    (tmp_path / "units.csv").write_text("id,school,z,y,x\n1,a,1,3,abc\n2,b,0,1,2\n")
    with pytest.raises(UnparseableValue, match="'x'.*row 2"):
        load_dataset(_schema(tmp_path, unit_covariates=["x"]))


def test_duplicate_column_in_schema(tmp_path):
    with pytest.raises(IngestError, match="more than once"):
        _schema(tmp_path, unit_covariates=["x", "x"])


def test_cluster_file_and_categoricals(tmp_path):
    _write(tmp_path,
           {"id": [1, 2, 3, 4], "school": ["b", "a", "a", "b"], "y": [1, 2, 3, 4], "grade": ["g2", "g1", "g2", "g1"]},
           {"school": ["a", "b", "c"], "z": [0, 1, 1], "size": [10.0, 20.0, 30.0], "region": ["n", "s", "s"]})
    ds = load_dataset(_schema(tmp_path, cluster_file=tmp_path / "clusters.csv", cluster_covariates=["size"],
                              categorical_unit_covariates=["grade"], categorical_cluster_covariates=["region"]))
    assert list(ds.cluster_ids) == ["a", "b"]  # clusters without units are ignored
    assert list(ds.treated) == [False, True]
    assert ds.w_names == ("size", "region=n", "region=s")
    np.testing.assert_allclose(ds.W, [[10, 1, 0], [20, 0, 1]])
    assert ds.x_names == ("grade=g1", "grade=g2")
    np.testing.assert_allclose(ds.X.sum(axis=1), 1.0)


def test_unit_cluster_missing_from_cluster_file(tmp_path):
    _write(tmp_path, {"id": [1, 2], "school": ["a", "q"], "y": [1, 2]}, {"school": ["a"], "z": [1]})
    with pytest.raises(IngestError, match="not found"):
        load_dataset(_schema(tmp_path, cluster_file=tmp_path / "clusters.csv"))


def test_row_order_does_not_change_aggregates(tmp_path, rng):
    n = 40
    units = pd.DataFrame({"id": range(n), "school": rng.choice(list("abcdef"), n), "y": rng.normal(size=n),
                          "s": rng.normal(size=n)})
    units["z"] = units["school"].isin(["a", "c"]).astype(int)
    units.to_csv(tmp_path / "units.csv", index=False)
    first = load_dataset(_schema(tmp_path, aggregate_unit_covariates=[("s", "mean")]))
    units.sample(frac=1.0, random_state=3).to_csv(tmp_path / "units.csv", index=False)
    second = load_dataset(_schema(tmp_path, aggregate_unit_covariates=[("s", "mean")]))
    np.testing.assert_allclose(first.W, second.W, rtol=1e-12)
    exact = units.groupby("school")["s"].mean().sort_index().to_numpy()
    np.testing.assert_allclose(first.W[:, 0], exact, rtol=1e-12)


def test_from_dict_resolves_relative_paths(tmp_path):
    _write(tmp_path, {"id": [1, 2], "school": ["a", "b"], "z": [1, 0], "y": [3.0, 4.0]})
    schema = SchemaConfig.from_dict({
        "unit_file": "units.csv", "id_columns": {"unit_id": "id", "cluster_id": "school"},
        "treatment_column": "z", "outcome_column": "y",
        "aggregate_unit_covariates": [{"column": "y", "aggregator": "mean"}],
    }, base_dir=tmp_path)
    assert load_dataset(schema).m == 2
