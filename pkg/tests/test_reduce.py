from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import pdist

from auvsurvey import reduce as rd
from auvsurvey.embed import FeatureMatrix
from auvsurvey.reduce import SelectionRule

from oracles import pca_by_covariance


# --- selection ---------------------------------------------------------------

def test_select_hand_cumulative():
    assert rd.select_components([90, 8, 1.5, 0.5], SelectionRule.variance(0.98)) == 2


def test_select_threshold_one_counts_positive():
    assert rd.select_components([5, 3, 1, 0, 0], SelectionRule.variance(1.0)) == 3


def test_select_fixed_caps_at_available():
    assert rd.select_components(np.linspace(10, 1, 300), SelectionRule.fixed(900)) == 300


@pytest.mark.parametrize("bad", [0.0, -0.1, 1.5])
def test_bad_threshold(bad):
    with pytest.raises(rd.PcaError):
        SelectionRule.variance(bad)


def test_bad_fixed_count():
    with pytest.raises(rd.PcaError):
        SelectionRule.fixed(0)


def test_no_positive_variance():
    with pytest.raises(rd.PcaError):
        rd.select_components([0.0, 0.0], SelectionRule.variance())


def test_rule_parse():
    assert SelectionRule.parse("0.98") == SelectionRule.variance(0.98)
    assert SelectionRule.parse("900") == SelectionRule.fixed(900)
    assert SelectionRule.parse("1.0") == SelectionRule.variance(1.0)
    assert SelectionRule.parse(12) == SelectionRule.fixed(12)


def test_defaults():
    assert rd.DEFAULT_VARIANCE == 0.98 and rd.DEFAULT_FIXED == 900


# --- fit ---------------------------------------------------------------------

def test_rank_one_line():
    t = np.linspace(-3, 5, 11)
    model = rd.fit_pca(np.column_stack([t, 2 * t]), SelectionRule.variance(0.98))
    assert model.m == 1
    assert model.explained_ratio[0] == pytest.approx(1.0, abs=1e-10)
    assert np.allclose(model.components[0], np.array([1, 2]) / np.sqrt(5), atol=1e-10)


def test_square_corners_equal_split():
    sq = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], float)
    model = rd.fit_pca(sq, SelectionRule.fixed(2))
    assert np.allclose(model.explained_ratio, [0.5, 0.5], atol=1e-12)
    assert np.allclose(model.explained_variance, [1 / 3, 1 / 3], atol=1e-12)


def test_too_few_rows():
    with pytest.raises(rd.PcaError):
        rd.fit_pca(np.ones((1, 4)))


def test_nonfinite():
    x = np.ones((3, 2))
    x[1, 1] = np.inf
    with pytest.raises(rd.PcaError):
        rd.fit_pca(x)


def test_identical_rows_degenerate():
    model = rd.fit_pca(np.full((5, 3), 2.0))
    assert model.m == 1 and model.explained_ratio[0] == 0.0
    assert np.allclose(rd.transform(model, np.full((2, 3), 2.0)), 0.0)


def test_accepts_feature_matrix():
    fm = FeatureMatrix(("a", "b", "c"), np.array([[0, 0], [1, 1], [2, 2.5]]), "t")
    assert rd.fit_pca(fm).dim == 2


@pytest.mark.parametrize("seed", range(3))
def test_matches_covariance_oracle(seed):
    x = np.random.default_rng(seed).normal(size=(40, 6)) @ np.diag([5, 3, 2, 1, 0.5, 0.1])
    model = rd.fit_pca(x, SelectionRule.fixed(6))
    w, v = pca_by_covariance(x)
    assert np.allclose(model.explained_variance, w, rtol=1e-9)
    for got, ref in zip(model.components, v):
        assert abs(abs(got @ ref) - 1.0) < 1e-8  # same axis up to sign
        assert got[np.argmax(np.abs(got))] > 0


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 30), st.integers(1, 12), st.integers(0, 10_000))
def test_structural_invariants(n, d, seed):
    x = np.random.default_rng(seed).normal(size=(n, d))
    model = rd.fit_pca(x, SelectionRule.variance(0.9))
    assert 1 <= model.m <= min(n - 1, d)
    gram = model.components @ model.components.T
    assert np.allclose(gram, np.eye(model.m), atol=1e-8)
    assert np.all(np.diff(model.explained_variance) <= 1e-12)
    assert model.spectrum.sum() / model.total_variance == pytest.approx(1.0)
    assert (model.spectrum / model.spectrum.sum()).sum() == pytest.approx(1.0, abs=1e-8)
    assert model.explained_ratio.sum() >= 0.9 - 1e-12
    z = rd.transform(model, x)
    assert np.allclose(z.var(axis=0, ddof=1), model.explained_variance, rtol=1e-6, atol=1e-12)


def test_wide_matrix_caps_at_n_minus_1():
    x = np.random.default_rng(0).normal(size=(10, 256))
    assert rd.fit_pca(x, SelectionRule.fixed(900)).m == 9


def test_bit_stable():
    x = np.random.default_rng(3).normal(size=(30, 8))
    a, b = rd.fit_pca(x), rd.fit_pca(x.copy())
    assert a.components.tobytes() == b.components.tobytes()


# --- transform / inverse -----------------------------------------------------

def test_mean_maps_to_zero():
    x = np.random.default_rng(1).normal(size=(20, 5))
    model = rd.fit_pca(x)
    assert np.allclose(rd.transform(model, model.mean), 0.0)


def test_inverse_of_zeros_is_mean():
    x = np.random.default_rng(1).normal(size=(20, 5))
    model = rd.fit_pca(x, SelectionRule.fixed(3))
    assert np.allclose(rd.inverse_transform(model, np.zeros((4, 3))), np.tile(model.mean, (4, 1)))


@pytest.mark.parametrize("seed", range(5))
def test_full_reconstruction(seed):
    x = np.random.default_rng(seed).normal(size=(50, 20))
    model = rd.fit_pca(x, SelectionRule.fixed(20))
    back = rd.inverse_transform(model, rd.transform(model, x))
    assert np.linalg.norm(back - x) <= 1e-6 * np.linalg.norm(x)


def test_distances_preserved_at_full_rank():
    x = np.random.default_rng(7).normal(size=(15, 4))
    model = rd.fit_pca(x, SelectionRule.fixed(4))
    assert np.allclose(pdist(rd.transform(model, x)), pdist(x), rtol=1e-9)


@pytest.mark.parametrize("m", [1, 3, 7])
def test_discarded_variance_identity(m):
    x = np.random.default_rng(m).normal(size=(40, 12))
    model = rd.fit_pca(x, SelectionRule.fixed(m))
    err = np.sum((rd.inverse_transform(model, rd.transform(model, x)) - x) ** 2)
    assert err == pytest.approx(model.spectrum[m:].sum() * (x.shape[0] - 1), rel=1e-6)


def test_dimension_mismatch():
    model = rd.fit_pca(np.random.default_rng(0).normal(size=(10, 4)))
    with pytest.raises(rd.PcaError):
        rd.transform(model, np.zeros((2, 5)))
    with pytest.raises(rd.PcaError):
        rd.inverse_transform(model, np.zeros((2, model.m + 1)))


# --- visualization -----------------------------------------------------------

def test_viz_2d_is_rigid_motion():
    x = np.random.default_rng(2).normal(size=(25, 2))
    z = rd.project_for_viz(x, 2)
    assert np.allclose(pdist(z), pdist(x))
    assert np.allclose(z.mean(axis=0), 0.0)


def test_viz_collinear_3d():
    t = np.linspace(0, 1, 9)[:, None]
    z = rd.project_for_viz(t * np.array([1.0, -2.0, 0.5]) + 3.0, 2)
    assert np.all(np.abs(z[:, 1]) <= 1e-8)


def test_viz_column_variance_order():
    z = rd.project_for_viz(np.random.default_rng(9).normal(size=(60, 7)), 3)
    v = z.var(axis=0)
    assert v[0] >= v[1] >= v[2]


def test_viz_bad_dims():
    with pytest.raises(rd.PcaError):
        rd.project_for_viz(np.zeros((3, 3)), 4)


# --- persistence -------------------------------------------------------------

def test_save_load(tmp_path):
    x = np.random.default_rng(4).normal(size=(30, 10))
    model = rd.fit_pca(x, SelectionRule.variance(0.8))
    rd.save_pca(model, tmp_path / "m.pca")
    back = rd.load_pca(tmp_path / "m.pca")
    assert back.selection == model.selection
    assert np.allclose(back.components, model.components, atol=1e-6)
    assert np.array_equal(back.explained_variance, model.explained_variance)
    assert back.components.tobytes() == back.components.astype(np.float32).astype(np.float64).tobytes()


def test_load_truncated(tmp_path):
    model = rd.fit_pca(np.random.default_rng(4).normal(size=(5, 3)))
    rd.save_pca(model, tmp_path / "m.pca")
    raw = (tmp_path / "m.pca").read_bytes()
    (tmp_path / "m.pca").write_bytes(raw[:-4])
    with pytest.raises(rd.PcaError):
        rd.load_pca(tmp_path / "m.pca")
