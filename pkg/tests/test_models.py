import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coarsegrain.data_io import synth_dataset
from coarsegrain.errors import ArgumentError, ShapeError
from coarsegrain.feature_map import FeatureBatch, images_to_batch, map_batch
from coarsegrain.models import (CurtainModel, TopTensor, TrainConfig, coarse_features,
                                evaluate_accuracy, init_curtain, one_hot, predict,
                                quadratic_cost, scores, train_curtain, train_top)
from coarsegrain.mps import random_mps
from coarsegrain.tree_builder import TreeConfig, build_tree

from conftest import random_batch


def _two_site(n, d1, d2, seed):
    r = np.random.default_rng(seed)
    v1 = r.standard_normal((n, d1))
    v2 = r.standard_normal((n, d2))
    v1 /= np.linalg.norm(v1, axis=1, keepdims=True)
    v2 /= np.linalg.norm(v2, axis=1, keepdims=True)
    return FeatureBatch([v1, v2], r.normal(0.0, 0.3, n))


def _design(batch):
    s = np.exp(batch.log_scale)
    return (batch.sites[0][:, :, None] * batch.sites[1][:, None, :]).reshape(len(batch), -1) * s[:, None]


class TestCost:
    def test_zero_weights_frozen(self):
        batch = _two_site(4, 2, 3, 0)
        cost, grad = quadratic_cost(np.zeros((2, 2, 3)), batch, [0, 1, 1, 0])
        assert cost == 0.5  # 1/(2n) * n
        assert grad.shape == (2, 2, 3)

    def test_matches_dense_formula(self):
        batch = _two_site(7, 3, 2, 1)
        r = np.random.default_rng(2)
        w = r.standard_normal((3, 3, 2))
        y = r.integers(0, 3, 7)
        F = _design(batch)
        resid = F @ w.reshape(3, -1).T - one_hot(y, 3)
        cost, grad = quadratic_cost(w, batch, y, ridge=0.1)
        assert cost == pytest.approx(0.5 * np.sum(resid**2) / 7 + 0.05 * np.sum(w**2), rel=1e-13)
        np.testing.assert_allclose(grad.reshape(3, -1), resid.T @ F / 7 + 0.1 * w.reshape(3, -1),
                                   rtol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_finite_difference_gradient(self, seed):
        r = np.random.default_rng(seed)
        batch = _two_site(5, 2, 3, seed)
        y = r.integers(0, 2, 5)
        w = r.standard_normal((2, 2, 3))
        _, g = quadratic_cost(w, batch, y, ridge=0.01)
        fd = np.zeros_like(w)
        h = 1e-5
        for idx in np.ndindex(w.shape):
            e = np.zeros_like(w)
            e[idx] = h
            fd[idx] = (quadratic_cost(w + e, batch, y, 0.01)[0] - quadratic_cost(w - e, batch, y, 0.01)[0]) / (2 * h)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            quadratic_cost(np.zeros((2, 3, 3)), _two_site(3, 2, 3, 0), [0, 1, 0])


class TestTrainTop:
    @pytest.mark.parametrize("ridge", [0.0, 0.05])
    def test_reaches_normal_equation_solution(self, ridge):
        batch = _two_site(40, 3, 4, 3)
        y = np.random.default_rng(4).integers(0, 3, 40)
        head = train_top(batch, y, TrainConfig(max_iterations=200, tol=1e-12, ridge=ridge), n_labels=3)
        F = _design(batch)
        want = np.linalg.solve(F.T @ F / 40 + ridge * np.eye(12), F.T @ one_hot(y, 3) / 40).T
        np.testing.assert_allclose(head.weights.reshape(3, -1), want, atol=1e-8)

    def test_trace_non_increasing(self):
        batch = _two_site(30, 3, 3, 5)
        y = np.random.default_rng(5).integers(0, 2, 30)
        head = train_top(batch, y, TrainConfig(max_iterations=50, tol=0.0))
        assert np.all(np.diff(head.trace) <= 1e-12)

    def test_huge_ridge_collapses_to_majority(self):
        # in the ridge limit w_l is proportional to the sum of class-l features, so
        # with nearly identical inputs every score is ~ (class count) * const
        r = np.random.default_rng(6)
        x = 0.5 + 0.05 * r.random((20, 4))
        y = r.permutation(np.array([1] * 14 + [0] * 6))
        batch = coarse_features(build_tree(map_batch(x), TreeConfig(cutoff=0.0)), map_batch(x))
        head = train_top(batch, y, TrainConfig(ridge=1e12))
        assert np.abs(head.weights).max() < 1e-9
        pred, _ = predict(head, batch)
        assert np.all(pred == 1)
        assert evaluate_accuracy(head, batch, y).accuracy == pytest.approx(0.7)

    def test_parity_solved_exactly(self):
        ds = synth_dataset("parity_patterns", 32)
        batch = images_to_batch(ds.images, mode="normalized")
        tree, top = build_tree(batch, TreeConfig(cutoff=0.0), return_features=True)
        head = train_top(top, ds.labels, TrainConfig(tol=1e-12))
        assert evaluate_accuracy(head, top, ds.labels).accuracy == 1.0

    def test_empty_rejected(self):
        batch = _two_site(3, 2, 2, 0).take(np.arange(0))
        with pytest.raises(ArgumentError):
            train_top(batch, np.zeros(0, dtype=int), n_labels=2)

    def test_needs_two_sites(self):
        _, batch = random_batch(3, 3)
        with pytest.raises(ShapeError):
            train_top(batch, [0, 1, 0])


class TestPredict:
    def test_tie_breaks_low(self):
        batch = _two_site(1, 2, 2, 0)
        label, sc = predict(TopTensor(np.zeros((3, 2, 2))), batch[0])
        assert label == 0 and sc.shape == (3,)

    def test_confusion(self):
        batch = _two_site(3, 2, 2, 0)
        w = np.zeros((2, 2, 2))
        ev = evaluate_accuracy(TopTensor(w), batch, [0, 1, 1])
        np.testing.assert_array_equal(ev.confusion, [[1, 0], [2, 0]])
        assert ev.as_dict()["accuracy"] == pytest.approx(1 / 3)

    def test_label_count_mismatch(self):
        batch = _two_site(2, 2, 2, 0)
        with pytest.raises(ShapeError):
            evaluate_accuracy(TopTensor(np.zeros((2, 2, 2))), batch, [0, 1], n_labels=3)


class TestCurtain:
    def _setup(self, n=48, seed=0):
        x = np.random.default_rng(seed).random((n, 8))
        y = (x[:, :4].sum(axis=1) > x[:, 4:].sum(axis=1)).astype(int)
        batch = map_batch(x, mode="normalized")
        tree = build_tree(batch, TreeConfig(cutoff=1e-3, layers=1))
        return tree, coarse_features(tree, batch), y

    def test_local_solves_monotone(self):
        tree, feats, y = self._setup()
        model = train_curtain(init_curtain(tree, 2, 4, seed=1), feats, y,
                              TrainConfig(sweeps=3, cg_max=20))
        assert np.all(np.diff(model.trace) <= 1e-10)
        assert len(model.sweep_costs) == 3
        n_sites = len(tree.out_dims)
        assert len(model.trace) == 1 + 3 * (2 * n_sites - 1)

    def test_fits_better_than_zero(self):
        tree, feats, y = self._setup()
        model = train_curtain(init_curtain(tree, 2, 4), feats, y, TrainConfig(sweeps=4))
        assert model.trace[-1] < 0.5 * model.trace[0]
        assert evaluate_accuracy(model, feats, y).accuracy > 0.8

    def test_parity_curtain_exact(self):
        ds = synth_dataset("parity_patterns", 32)
        batch = images_to_batch(ds.images, mode="normalized")
        tree = build_tree(batch, TreeConfig(cutoff=0.0, layers=1))
        feats = coarse_features(tree, batch)
        model = train_curtain(init_curtain(tree, 2, 8), feats, ds.labels, TrainConfig(sweeps=4))
        assert evaluate_accuracy(model, feats, ds.labels).accuracy == 1.0

    def test_deterministic(self):
        tree, feats, y = self._setup()
        a = train_curtain(init_curtain(tree, 2, 3, seed=2), feats, y, TrainConfig(sweeps=2))
        b = train_curtain(init_curtain(tree, 2, 3, seed=2), feats, y, TrainConfig(sweeps=2))
        assert a.trace == b.trace

    def test_top_must_match_tree(self):
        tree, _, _ = self._setup()
        with pytest.raises(ShapeError):
            CurtainModel(tree, random_mps((2, 2), 2, n_labels=2), 2)

    def test_scores_shape(self):
        tree, feats, y = self._setup(n=10)
        model = init_curtain(tree, 3, 2)
        assert scores(model, feats).shape == (10, 3)


def test_train_config_validation():
    with pytest.raises(ArgumentError):
        TrainConfig(ridge=-1.0).validate()
    with pytest.raises(ArgumentError):
        TrainConfig(sweeps=0).validate()
