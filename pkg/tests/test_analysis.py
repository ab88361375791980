import csv
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmf_fewshot.analysis import (
    AnalysisError,
    export_plot,
    fluctuation_table,
    mahalanobis_stats,
    param_report,
    pca_fit,
    pca_project,
    prior_stability,
    stability_from_priors,
    task_features,
    timing_report,
)
from cmf_fewshot.backbone import BackboneConfig, BackboneWeights, init_backbone
from cmf_fewshot.deploy import precompute, strip
from cmf_fewshot.encoder import EncoderConfig
from cmf_fewshot.episodes import Dataset, desk_benchmark, make_fixed_support
from cmf_fewshot.evaluation import EvalSettings
from cmf_fewshot.model import CNAPModel, ModelConfig

BB = BackboneConfig(channels=(8, 8, 16, 16), image_size=16)


def toy_model(variant="cmf", perturb=0.1):
    cfg = ModelConfig(backbone=BB, encoder=EncoderConfig(channels=(8, 8, 16), variant=variant), head_hidden=8)
    model = CNAPModel(cfg, BackboneWeights(BB, init_backbone(BB, seed=0)))
    rng = np.random.default_rng(1)
    return model.with_params({k: (v + perturb * rng.normal(size=v.shape)).astype(np.float32) for k, v in model.params.items()})


@pytest.fixture(scope="module")
def domains():
    return desk_benchmark(classes=5, per_class=16, size=16, families=("glyphs", "shapes"))


# brute-force references ---------------------------------------------------------------


def brute_covariance(X):
    m, d = X.shape
    mu = [sum(X[i, a] for i in range(m)) / m for a in range(d)]
    return np.array([[sum((X[i, a] - mu[a]) * (X[i, b] - mu[b]) for i in range(m)) / (m - 1) for b in range(d)] for a in range(d)])


def brute_mahalanobis(X, y):
    """Pooled-covariance Mahalanobis on raw features, pair by pair."""
    cov = brute_covariance(X)
    d = X.shape[1]
    P = np.linalg.inv(cov + 1e-6 * np.trace(cov) / d * np.eye(d))

    def dist(a, b):
        v = a - b
        return float(np.sqrt(v @ P @ v))

    inner = [dist(X[i], X[j]) for i in range(len(X)) for j in range(i + 1, len(X)) if y[i] == y[j]]
    classes = sorted(set(y.tolist()))
    cents = [X[y == c].mean(axis=0) for c in classes]
    inter = [dist(cents[i], cents[j]) for i in range(len(cents)) for j in range(i + 1, len(cents))]
    return np.mean(inner), np.mean(inter)


# PCA -----------------------------------------------------------------------------------


def test_axis_aligned_data_projects_to_its_coordinate():
    t = np.random.default_rng(0).normal(size=20)
    X = np.zeros((20, 3))
    X[:, 1] = t
    z = pca_project(X, 1)[:, 0]
    assert min(np.abs(z - (t - t.mean())).max(), np.abs(z + (t - t.mean())).max()) < 1e-9


def test_full_rank_reconstruction():
    X = np.random.default_rng(1).normal(size=(50, 8))
    fit = pca_fit(X, 8)
    assert np.abs(fit.inverse_transform(fit.transform(X)) - X).max() < 1e-9


def test_component_variances_match_brute_force_eigenvalues():
    X = np.random.default_rng(2).normal(size=(30, 5)) @ np.diag([3.0, 2.0, 1.0, 0.5, 0.1])
    eig = np.sort(np.linalg.eigvalsh(brute_covariance(X)))[::-1]
    Z = pca_project(X, 5)
    var = Z.var(axis=0, ddof=1)
    assert np.max(np.abs(var - eig) / eig) < 1e-9


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_components_are_orthonormal_with_positive_pivot(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(int(rng.integers(6, 30)), 5))
    fit = pca_fit(X, 4)
    assert np.abs(fit.components @ fit.components.T - np.eye(4)).max() < 1e-9
    pivots = fit.components[np.arange(4), np.abs(fit.components).argmax(axis=1)]
    assert (pivots > 0).all()


def test_zero_variance_is_rejected():
    with pytest.raises(AnalysisError, match="zero variance"):
        pca_project(np.ones((10, 4)), 2)


def test_out_dims_must_be_below_sample_count():
    with pytest.raises(AnalysisError):
        pca_project(np.random.default_rng(0).normal(size=(3, 4)), 3)


# Mahalanobis -----------------------------------------------------------------------------


def test_two_gaussians_match_brute_force_oracle():
    rng = np.random.default_rng(3)
    X = np.concatenate([rng.normal(size=(15, 3)), rng.normal(size=(15, 3)) + [10.0, 0, 0]])
    y = np.repeat([0, 1], 15)
    stats = mahalanobis_stats(X, y)
    inner, inter = brute_mahalanobis(X, y)
    assert stats.dims == 3
    assert abs(stats.inner_class - inner) < 1e-9
    assert abs(stats.inter_class - inter) < 1e-9


@given(st.integers(0, 10_000), st.integers(2, 5))
@settings(max_examples=15, deadline=None)
def test_low_dimensional_oracle_equivalence(seed, d):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(18, d)) * rng.uniform(0.5, 3, size=d)
    y = np.repeat([0, 1, 2], 6)
    X += 2 * y[:, None]
    stats = mahalanobis_stats(X, y)
    inner, inter = brute_mahalanobis(X, y)
    assert abs(stats.inner_class - inner) < 1e-9 and abs(stats.inter_class - inter) < 1e-9


def test_identical_features_within_class_have_zero_inner_distance():
    X = np.repeat(np.array([[0.0, 1.0, 2.0], [3.0, -1.0, 0.5], [1.0, 1.0, 1.0]]), 4, axis=0)
    stats = mahalanobis_stats(X, np.repeat([0, 1, 2], 4))
    assert stats.inner_class == 0.0 and stats.inter_class > 0


def test_mahalanobis_preconditions():
    with pytest.raises(AnalysisError):
        mahalanobis_stats(np.random.default_rng(0).normal(size=(5, 3)), [0] * 5)
    with pytest.raises(AnalysisError):
        mahalanobis_stats(np.random.default_rng(0).normal(size=(5, 3)), [0, 0, 0, 0, 1])


def test_task_features_are_labelled_by_dataset_class(domains):
    feats, labels = task_features(toy_model(), domains[0], EvalSettings(n_tasks=3, way=3, query=2))
    assert feats.shape == (18, 16)
    assert set(labels.tolist()) <= set(domains[0].classes.tolist())


# stability and fluctuation -----------------------------------------------------------------


def test_identical_supports_have_zero_dispersion():
    img = np.random.default_rng(0).uniform(size=(1, 1, 16, 16)).astype(np.float32)
    same = Dataset("same", np.repeat(img, 20, axis=0), np.repeat([0, 1], 10), np.array(["train"] * 20))
    st_ = prior_stability(toy_model(perturb=0.0), same, draws=2, size=5)
    assert st_.dispersion == 0.0 and st_.pairwise_mean == 0.0


def test_noise_draws_are_accepted(domains):
    st_ = prior_stability(toy_model(), "noise", draws=4, size=5)
    assert st_.priors.shape == (4, 16) and np.isfinite(st_.priors).all() and st_.dispersion > 0


def test_dispersion_is_norm_of_coordinate_std():
    P = np.array([[0.0, 0.0], [2.0, 4.0]])
    st_ = stability_from_priors(P)
    assert st_.dispersion == pytest.approx(np.sqrt(1 + 4))
    assert st_.pairwise_mean == pytest.approx(np.sqrt(20))
    with pytest.raises(AnalysisError):
        stability_from_priors(P[:1])


def test_fluctuation_table(domains):
    ft = fluctuation_table(toy_model(), domains[0], tasks=3, supports_per_task=2, settings=EvalSettings(way=3, query=2))
    assert ft.accuracies.shape == (3, 2)
    assert (ft.spreads >= 0).all() and len(ft.rows()) == 3
    with pytest.raises(AnalysisError):
        fluctuation_table(toy_model(), domains[0], tasks=3, supports_per_task=1)


# reports ----------------------------------------------------------------------------------------


def test_param_counts_match_hand_count():
    # backbone: 1->8, 8->8, 8->16, 16->16 3x3 convs with bias
    backbone = (8 * 9 + 8) + (8 * 8 * 9 + 8) + (16 * 8 * 9 + 16) + (16 * 16 * 9 + 16)
    encoder = (8 * 9 + 8) + (8 * 8 * 9 + 8) + (16 * 8 * 9 + 16)
    attention = (2 * 8 + 2 + 8 * 2 + 8) + (2 * 8 + 2 + 16 * 2 + 16)
    adaptation = 2 * (8 + 8 + 16 + 16) * (16 + 1)
    head = 2 * (8 * 16 + 8) + (16 * 8 + 16) + (1 * 8 + 1)
    r = param_report(toy_model("cmf"))
    assert (r["backbone"], r["encoder"], r["adaptation"], r["head"]) == (backbone, encoder + attention, adaptation, head)
    assert r["total"] == backbone + encoder + attention + adaptation + head
    assert r["strippable_fraction"] == pytest.approx((encoder + attention + adaptation) / r["total"])
    assert param_report(toy_model("plain"))["encoder"] == encoder


def test_backbone_only_has_nothing_to_strip():
    r = param_report(BackboneWeights(BB, init_backbone(BB)))
    assert r["strippable_fraction"] == 0.0 and r["total"] == r["backbone"]


def test_timing_stages(domains):
    model = toy_model()
    stripped = strip(model, precompute(model, make_fixed_support("azs2", domains[0], size=5)))
    s = EvalSettings(way=3, query=2)
    full = timing_report(model, domains, n_tasks=2, settings=s)
    bare = timing_report(stripped, domains, n_tasks=2, settings=s)
    assert full["encoder"] > 0 and full["adaptation"] > 0 and full["backbone"] > 0
    assert bare["encoder"] == 0.0 and bare["adaptation"] == 0.0 and bare["backbone"] > 0
    assert param_report(stripped)["strippable"] == 0
    with pytest.raises(AnalysisError):
        timing_report(model, domains, n_tasks=0)


# export -----------------------------------------------------------------------------------------


def test_export_2d_writes_csv_and_svg(tmp_path):
    pts = np.array([[0.1, 0.2], [1.0 / 3, -2.5], [1e-12, 7.0]])
    written = export_plot(pts, ["a", "b", "a"], tmp_path / "plot_x")
    assert [p.suffix for p in written] == [".csv", ".svg"]
    rows = list(csv.reader(open(written[0])))
    assert rows[0] == ["label", "x", "y"] and len(rows) == 4
    back = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    assert np.abs(back - pts).max() < 1e-9
    assert written[1].read_text().lstrip().startswith("<?xml")


def test_export_3d_writes_csv_only(tmp_path, caplog):
    with caplog.at_level(logging.INFO, logger="cmf_fewshot.analysis"):
        written = export_plot(np.zeros((3, 3)), [0, 1, 2], tmp_path / "p3")
    assert [p.suffix for p in written] == [".csv"]
    assert not (tmp_path / "p3.svg").exists()
    assert "no SVG" in caplog.text


def test_export_unwritable_path(tmp_path):
    with pytest.raises(AnalysisError):
        export_plot(np.zeros((2, 2)), [0, 1], tmp_path / "missing" / "dir" / "p")
