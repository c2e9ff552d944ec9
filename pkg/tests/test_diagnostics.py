import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cosbal.balancer import BalanceSpec, Mode, fit
from cosbal.data import CosDataset
from cosbal.diagnostics import estimand_profile, format_table, standardized_differences, weight_summary
from cosbal.hyperparams import HyperParams
from cosbal.transform import FeatureSpec

from conftest import random_dataset


def _two_groups(xt, xc):
    xt, xc = np.asarray(xt, float), np.asarray(xc, float)
    x = np.concatenate([xt, xc])
    cl = np.concatenate([np.zeros(len(xt), int), np.ones(len(xc), int)])
    return CosDataset(np.arange(len(x)), cl, x[:, None], np.zeros(len(x)), [0, 1], [True, False],
                      np.zeros((2, 0)), ["x"], [])


def test_identical_groups_zero():
    ds = _two_groups([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert standardized_differences(ds)["unweighted"].tolist() == [0.0]


def test_unit_mean_gap_unit_sd():
    # both groups have variance 1 (ddof=1), means 1 and 0
    ds = _two_groups([0.0, 1.0, 2.0], [-1.0, 0.0, 1.0])
    assert standardized_differences(ds)["unweighted"].iloc[0] == pytest.approx(1.0)


def test_zero_sd_flagged():
    ds = _two_groups([2.0, 2.0], [2.0, 2.0])
    tab = standardized_differences(ds, np.ones(4))
    assert tab["zero_sd"].iloc[0] and tab["weighted"].iloc[0] == 0.0


def test_mirrored_weights_balance(mirrored):
    sol = fit(mirrored, FeatureSpec(), BalanceSpec(hyper=HyperParams(0.3, 0.1)))
    tab = standardized_differences(mirrored, sol.weights)
    assert np.all(np.abs(tab["weighted"]) < 0.01)


def test_uniform_weights_match_unweighted(small):
    w = np.ones(small.n)
    w[~small.unit_treated] = small.n1 / small.n0
    tab = standardized_differences(small, w)
    np.testing.assert_allclose(tab["weighted"], tab["unweighted"], atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_reordering_invariance(seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng)
    w = rng.uniform(0, 2, ds.n)
    perm = rng.permutation(ds.n)
    ds2 = CosDataset(ds.unit_ids[perm], ds.cluster_ids[ds.cluster[perm]], ds.X[perm], ds.y[perm], ds.cluster_ids,
                     ds.treated, ds.W, ds.x_names, ds.w_names)
    # the dataset sorts units by cluster; recover where each original unit went
    pos = {u: i for i, u in enumerate(ds2.unit_ids)}
    w2 = np.empty(ds.n)
    for i, u in enumerate(ds.unit_ids):
        w2[pos[u]] = w[i]
    a, b = standardized_differences(ds, w), standardized_differences(ds2, w2)
    np.testing.assert_allclose(a["weighted"], b["weighted"], atol=1e-12)
    np.testing.assert_allclose(estimand_profile(ds, w).iloc[:, 1:], estimand_profile(ds2, w2).iloc[:, 1:],
                               atol=1e-12)
    assert weight_summary(w)["ess"] == pytest.approx(weight_summary(w2)["ess"], rel=1e-12)


def test_weight_summary_examples():
    s = weight_summary(np.ones(5))
    assert s["ess"] == pytest.approx(5.0) and s["max"] == 1.0
    assert weight_summary([2.0, 1.0, 1.0])["ess"] == pytest.approx(16 / 6)
    assert weight_summary([1.0, 0.0, 0.0])["ess"] == pytest.approx(1.0)
    s = weight_summary([0.5, 12.0, 92.0, 3.0])
    assert s["count_above"] == 2 and s["max"] == 92.0


def test_estimand_profile_examples(small):
    prof = estimand_profile(small, np.ones(small.n))
    np.testing.assert_allclose(prof["treated_weighted"], prof["treated_raw"])
    np.testing.assert_allclose(prof["control_weighted"], prof["control_raw"])
    ctrl_cluster = int(np.flatnonzero(~small.treated)[0])
    w = np.where(small.cluster == ctrl_cluster, 1.0, 0.0)
    w[small.unit_treated] = 1.0
    prof = estimand_profile(small, w)
    rows = small.cluster == ctrl_cluster
    np.testing.assert_allclose(prof["control_weighted"].iloc[:small.X.shape[1]], small.X[rows].mean(axis=0))


def test_estimand_profile_mirrored(mirrored):
    sol = fit(mirrored, FeatureSpec(), BalanceSpec(mode=Mode.SUBSET, hyper=HyperParams(0.3, 0.1)))
    prof = estimand_profile(mirrored, sol.weights)
    np.testing.assert_allclose(prof["treated_weighted"], prof["control_weighted"], atol=1e-3)


def test_format_table(small):
    text = format_table(standardized_differences(small))
    assert "covariate" in text and "x0" in text
