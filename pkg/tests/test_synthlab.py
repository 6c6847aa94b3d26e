import json
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relnet.data import gen_synthetic_relation
from relnet.optim import ParamSet
from relnet.synthlab import (
    Comparator,
    OracleComparator,
    SynthConfig,
    fit_mahalanobis,
    fit_mlp_mahalanobis,
    fit_relation_mlp,
    fix_signs,
    grid_points,
    jacobi_eigh,
    pca_fit,
    pca_project,
    read_ppm,
    render_decision_map,
    render_scatter,
    run_study,
    write_ppm,
    MATCH_RGB,
    MISMATCH_RGB,
)


@pytest.fixture(scope="module")
def ball_pairs():
    rng = np.random.default_rng(0)
    return (gen_synthetic_relation(10_000, rng, "ball", 1.0), gen_synthetic_relation(5_000, rng, "ball", 1.0))


def identity_metric(tau=1.0):
    params = ParamSet()
    params.add("metric.L", np.eye(2))
    params.add("metric.tau", np.array([tau]))
    return Comparator("mahalanobis", params)


class ConstantComparator:
    threshold = 0.5

    def score(self, q, s):
        return np.full(len(q), 0.5)


class TestComparators:
    def test_ball_is_learnable_by_metric_and_mlp(self, ball_pairs):
        train, test = ball_pairs
        assert fit_mahalanobis(train, steps=1500, seed=1).accuracy(test) >= 0.95
        assert fit_relation_mlp(train, hidden=(32, 32), steps=1500, seed=1).accuracy(test) >= 0.95

    def test_identity_metric_is_squared_distance(self):
        rng = np.random.default_rng(2)
        q, s = rng.normal(size=(20, 2)), rng.normal(size=(20, 2))
        scores = identity_metric(tau=0.7).score(q, s)
        d2 = ((q - s) ** 2).sum(axis=1)
        np.testing.assert_allclose(scores, 1 / (1 + np.exp(-(0.7 - d2))), rtol=1e-5)
        np.testing.assert_array_equal(identity_metric().metric, np.eye(2))

    def test_metric_is_swap_symmetric(self, ball_pairs):
        comp = fit_mahalanobis(ball_pairs[0], steps=50)
        q, s = ball_pairs[1].q[:200], ball_pairs[1].s[:200]
        np.testing.assert_allclose(comp.score(q, s), comp.score(s, q), rtol=1e-6)

    def test_metric_is_positive_semidefinite(self, ball_pairs):
        m = fit_mahalanobis(ball_pairs[0], steps=50).metric
        np.testing.assert_allclose(m, m.T)
        assert np.linalg.eigvalsh(m).min() >= -1e-12

    def test_empty_mlp_is_plain_metric(self, ball_pairs):
        a = fit_mahalanobis(ball_pairs[0], steps=40, seed=3)
        b = fit_mlp_mahalanobis(ball_pairs[0], hidden=(), steps=40, seed=3)
        assert a.losses == b.losses
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_losses_trend_down(self, ball_pairs):
        comp = fit_relation_mlp(ball_pairs[0], hidden=(16, 16), steps=600, seed=0)
        windows = np.array(comp.losses).reshape(3, 200).mean(axis=1)
        assert np.all(np.diff(windows) <= 0)

    def test_hidden_features(self, ball_pairs):
        comp = fit_relation_mlp(ball_pairs[0], hidden=(8, 5), steps=5)
        assert comp.hidden_features(ball_pairs[1].q[:7], ball_pairs[1].s[:7]).shape == (7, 5)

    def test_threshold_tie_is_mismatch(self):
        comp = identity_metric(tau=0.0)
        assert not comp.predict(np.zeros((1, 2)), np.zeros((1, 2)))[0]

    def test_bad_inputs(self, ball_pairs):
        with pytest.raises(ValueError):
            fit_mahalanobis(ball_pairs[0], steps=0)
        with pytest.raises(ValueError):
            run_study(SynthConfig(kinds=("cosine",), n_train=10, n_test=10, steps=1, seeds=(0,), grid=4), log=None)


class TestDecisionMaps:
    def test_oracle_map_is_perfect(self):
        dmap = render_decision_map(OracleComparator("rings", 0.5), grid=64, ring_width=0.5)
        assert dmap.accuracy == 1.0

    def test_constant_comparator_scores_negative_fraction(self):
        dmap = render_decision_map(ConstantComparator(), grid=64)
        assert dmap.accuracy == pytest.approx(1 - dmap.truth.mean())

    def test_accuracy_recomputed_from_pixels(self, tmp_path):
        comp = fit_mahalanobis(gen_synthetic_relation(2000, np.random.default_rng(1)), steps=30)
        dmap = render_decision_map(comp, query=(0.5, -0.5), grid=40, path=tmp_path / "m.ppm")
        img = read_ppm(tmp_path / "m.ppm")
        pred = np.all(img == MATCH_RGB, axis=-1)
        other = np.all(img == MISMATCH_RGB, axis=-1)
        unmarked = pred | other
        assert unmarked.mean() > 0.95
        assert np.mean(pred[unmarked] == dmap.truth[unmarked]) == pytest.approx(
            np.mean(dmap.pred[unmarked] == dmap.truth[unmarked]))

    def test_full_grid_is_fast(self):
        comp = fit_relation_mlp(gen_synthetic_relation(1000, np.random.default_rng(0)), steps=2)
        start = time.perf_counter()
        render_decision_map(comp, grid=256)
        assert time.perf_counter() - start < 5

    def test_grid_orientation(self):
        pts = grid_points(4, (-2, 2))
        assert tuple(pts[0]) == (-1.5, 1.5)
        assert tuple(pts[-1]) == (1.5, -1.5)

    def test_grid_too_small(self):
        with pytest.raises(ValueError):
            render_decision_map(OracleComparator(), grid=1)


class TestImages:
    def test_ppm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
        write_ppm(tmp_path / "x.ppm", img)
        np.testing.assert_array_equal(read_ppm(tmp_path / "x.ppm"), img)

    def test_ppm_rejects_grey(self, tmp_path):
        with pytest.raises(ValueError):
            write_ppm(tmp_path / "x.ppm", np.zeros((3, 3)))

    def test_scatter(self, tmp_path):
        pts = np.array([[0.0, 0.0], [1.0, 1.0]])
        canvas = render_scatter(pts, [0, 1], tmp_path / "s.ppm", size=32)
        assert canvas.shape == (32, 32, 3)
        assert (tmp_path / "s.ppm").exists()


class TestPca:
    def test_jacobi_matches_eigh(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            x = rng.normal(size=(50, 10))
            cov = np.cov(x, rowvar=False)
            values, vecs = jacobi_eigh(cov)
            ref_values, ref_vecs = np.linalg.eigh(cov)
            np.testing.assert_allclose(values, ref_values[::-1], atol=1e-8)
            np.testing.assert_allclose(fix_signs(vecs), fix_signs(ref_vecs[:, ::-1]), atol=1e-8)

    def test_variances_non_increasing(self):
        basis = pca_fit(np.random.default_rng(1).normal(size=(40, 6)) * np.arange(1, 7), k=6)
        assert np.all(np.diff(basis.variances) <= 0)
        z = basis.project(np.random.default_rng(1).normal(size=(40, 6)) * np.arange(1, 7))
        assert np.all(np.diff(z.var(axis=0)) <= 1e-12)

    def test_reconstruction(self):
        x = np.random.default_rng(2).normal(size=(30, 5))
        basis = pca_fit(x, k=5)
        np.testing.assert_allclose(basis.reconstruct(basis.project(x)), x, atol=1e-8)

    def test_collinear_data(self):
        t = np.linspace(-1, 1, 20)
        x = np.stack([t, 2 * t, -t], axis=1)
        basis = pca_fit(x, k=2)
        np.testing.assert_allclose(basis.components[:, 0], np.array([1, 2, -1]) / np.sqrt(6), atol=1e-10)
        assert basis.variances[1] == pytest.approx(0, abs=1e-12)
        assert pca_project(x, 2).shape == (20, 2)

    def test_sign_convention(self):
        basis = pca_fit(np.random.default_rng(3).normal(size=(25, 4)), k=3)
        for j in range(3):
            col = basis.components[:, j]
            assert col[np.argmax(np.abs(col))] > 0

    def test_invalid(self):
        with pytest.raises(ValueError):
            pca_fit(np.zeros((5, 2)), k=3)
        with pytest.raises(ValueError):
            pca_fit(np.zeros(5))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000))
def test_jacobi_diagonalises(n, seed):
    a = np.random.default_rng(seed).normal(size=(n, n))
    a = a + a.T
    values, vecs = jacobi_eigh(a)
    np.testing.assert_allclose(vecs @ np.diag(values) @ vecs.T, a, atol=1e-9)
    np.testing.assert_allclose(vecs.T @ vecs, np.eye(n), atol=1e-10)


def test_small_study_writes_outputs(tmp_path):
    cfg = SynthConfig(n_train=500, n_test=200, steps=20, grid=16, seeds=(0,), relation_hidden=(8,), mlp_hidden=(4,))
    results = run_study(cfg, tmp_path / "out", log=None)
    assert [r["comparator"] for r in results] == ["mahalanobis", "mlp_mahalanobis", "relation_mlp"]
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert len(summary["results"]) == 3
    assert all((tmp_path / "out" / r["map"]).exists() for r in results)
