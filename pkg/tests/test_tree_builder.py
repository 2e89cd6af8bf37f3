import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coarsegrain.errors import ArgumentError, NumericError, ShapeError
from coarsegrain.feature_map import FeatureBatch, dense_feature, map_batch, map_input
from coarsegrain.mps import coarsen, evaluate, lift_linear_multi
from coarsegrain.tree_builder import (Isometry, PairCovariance, TreeConfig, TreeLayer, TreeNetwork,
                                      accumulate_pair, apply_layer, build_tree, coarse_grain,
                                      converged, fidelity_log, merge, solve_isometry)

from conftest import dense_phi, random_batch


def _dense_pair_cov(x, pair, mode_raw_weights=True):
    """Oracle: partial trace of sum_j Phi_j Phi_j^T onto sites (2p, 2p+1)."""
    n_sites = x.shape[1]
    total = 0.0
    for xi in x:
        phi = dense_phi(xi).reshape((2,) * n_sites)
        m = np.moveaxis(phi, [2 * pair, 2 * pair + 1], [0, 1]).reshape(4, -1)
        total = total + m @ m.T
    return total


class TestPairCovariance:
    @pytest.mark.parametrize("mode", ["unit_local", "raw"])
    def test_matches_dense_oracle(self, mode):
        x, batch = random_batch(6, 4, seed=3, mode=mode)
        acc = accumulate_pair(PairCovariance.empty(2, 2), batch, 1)
        np.testing.assert_allclose(acc.absolute(), _dense_pair_cov(x, 1), rtol=1e-12)
        assert acc.sample_count == 6

    def test_frozen_single_sample(self):
        # x = (0, 1): Phi = [1,0] x [1,1], pair covariance = outer([1,1,0,0])
        acc = accumulate_pair(PairCovariance.empty(2, 2), map_input([0.0, 1.0]), 0)
        v = np.array([1.0, 1.0, 0.0, 0.0])
        np.testing.assert_allclose(acc.absolute(), np.outer(v, v), atol=1e-15)

    def test_weight_sum_is_trace(self):
        _, batch = random_batch(5, 2, seed=1)
        acc = accumulate_pair(PairCovariance.empty(2, 2), batch, 0)
        assert acc.weight_sum == pytest.approx(np.trace(acc.matrix))

    def test_accumulate_does_not_mutate(self):
        empty = PairCovariance.empty(2, 2)
        accumulate_pair(empty, map_input([0.5, 0.5]), 0)
        assert empty.sample_count == 0

    def test_no_overflow_for_long_chains(self):
        batch = map_batch(np.ones((3, 3000)))  # |Phi| = 2**1500
        acc = accumulate_pair(PairCovariance.empty(2, 2), batch, 0)
        assert np.all(np.isfinite(acc.matrix))
        np.testing.assert_allclose(acc.unit_trace(), np.full((4, 4), 0.25))

    def test_empty_unit_trace(self):
        with pytest.raises(NumericError):
            PairCovariance.empty(2, 2).unit_trace()

    def test_dims_checked(self):
        with pytest.raises(ShapeError):
            accumulate_pair(PairCovariance.empty(3, 2), map_input([0.5, 0.5]), 0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
    def test_merge_is_order_free(self, na, nb, seed):
        x = np.random.default_rng(seed).random((na + nb, 4)) * 0.9
        batch = map_batch(x)
        a = accumulate_pair(PairCovariance.empty(2, 2), batch.take(np.arange(na)), 1)
        b = accumulate_pair(PairCovariance.empty(2, 2), batch.take(np.arange(na, na + nb)), 1)
        whole = accumulate_pair(PairCovariance.empty(2, 2), batch, 1)
        for m in (merge(a, b), merge(b, a)):
            np.testing.assert_allclose(m.absolute(), whole.absolute(), rtol=1e-12)
            assert m.sample_count == na + nb

    def test_merge_with_empty(self):
        a = accumulate_pair(PairCovariance.empty(2, 2), map_input([0.3, 0.4]), 0)
        np.testing.assert_array_equal(merge(a, PairCovariance.empty(2, 2)).absolute(), a.absolute())

    def test_converged(self):
        a = accumulate_pair(PairCovariance.empty(2, 2), map_input([0.3, 0.4]), 0)
        assert converged(a, a, 1e-12)


class TestIsometry:
    def test_solve(self):
        x, batch = random_batch(10, 2, seed=0)
        iso = solve_isometry(accumulate_pair(PairCovariance.empty(2, 2), batch, 0), 0.0)
        m = iso.matrix()
        np.testing.assert_allclose(m.T @ m, np.eye(iso.out_dim), atol=1e-12)
        assert iso.in_dims == (2, 2)
        assert iso.spectrum.sum() == pytest.approx(1.0)

    def test_empty_rejected(self):
        with pytest.raises(ArgumentError):
            solve_isometry(PairCovariance.empty(2, 2), 0.0)


class TestApplyLayer:
    def test_truncated_sample_flagged(self):
        # isometry onto [0,0,0,1]; the sample x=(0,0) lives on [1,0,0,0]
        u = np.zeros((2, 2, 1))
        u[1, 1, 0] = 1.0
        out = apply_layer(TreeLayer([Isometry(u)]), map_input([0.0, 0.0]))
        assert out.truncated

    def test_projection_value(self):
        u = np.zeros((2, 2, 1))
        u[0, 1, 0] = 1.0
        f = map_input([0.0, 0.5], mode="raw")
        out = apply_layer(TreeLayer([Isometry(u)]), f)
        assert dense_feature(out)[0] == pytest.approx(0.5)

    def test_passthrough(self):
        u = np.eye(4).reshape(2, 2, 4)
        layer = TreeLayer([Isometry(u)], passthrough_dim=2)
        out = apply_layer(layer, map_input([0.1, 0.2, 0.3]))
        assert out.site_dims == (4, 2)

    def test_wrong_dims(self):
        with pytest.raises(ShapeError):
            apply_layer(TreeLayer([Isometry(np.eye(4).reshape(2, 2, 4))]), map_input([0.1, 0.2, 0.3]))


class TestBuildTree:
    def test_exact_tree_preserves_features(self):
        x, batch = random_batch(4, 8, seed=2)
        tree, top = build_tree(batch, TreeConfig(cutoff=0.0), return_features=True)
        assert tree.n_layers == 2 and len(tree.out_dims) == 2
        for lyr in tree.stats["layers"]:
            assert lyr["log_fidelity_after"] == pytest.approx(lyr["log_fidelity_before"], abs=1e-10)
        # inner products are preserved by the exact tree
        g_top = np.array([[np.vdot(dense_feature(a), dense_feature(b)) for b in top] for a in top])
        g_raw = np.array([[dense_phi(a) @ dense_phi(b) for b in x] for a in x])
        np.testing.assert_allclose(g_top, g_raw, rtol=1e-10)

    def test_layer_structure_odd_sites(self):
        _, batch = random_batch(6, 5, seed=1)
        tree = build_tree(batch, TreeConfig(cutoff=0.0))
        assert [layer.in_site_count for layer in tree.layers] == [5, 3]
        assert tree.layers[0].passthrough and tree.layers[1].passthrough

    def test_layer_count(self):
        _, batch = random_batch(6, 8, seed=1)
        tree = build_tree(batch, TreeConfig(cutoff=0.0, layers=1))
        assert tree.n_layers == 1 and len(tree.out_dims) == 4

    def test_too_many_layers(self):
        _, batch = random_batch(3, 2, seed=1)
        with pytest.raises(ArgumentError):
            build_tree(batch, TreeConfig(layers=2))

    def test_max_dim(self):
        _, batch = random_batch(40, 8, seed=5)
        tree = build_tree(batch, TreeConfig(cutoff=0.0, max_dim=3))
        assert max(max(d) for d in tree.bond_profile) <= 3

    def test_cutoff_reduces_fidelity_monotonically(self):
        _, batch = random_batch(30, 8, seed=4)
        tree = build_tree(batch, TreeConfig(cutoff=1e-2))
        for lyr in tree.stats["layers"]:
            assert lyr["log_fidelity_after"] <= lyr["log_fidelity_before"] + 1e-12

    def test_thread_count_does_not_change_result(self):
        _, batch = random_batch(50, 8, seed=9)
        a = build_tree(batch, TreeConfig(cutoff=1e-3, chunk_size=7, threads=1))
        b = build_tree(batch, TreeConfig(cutoff=1e-3, chunk_size=7, threads=3))
        for la, lb in zip(a.layers, b.layers):
            for ia, ib in zip(la.isometries, lb.isometries):
                np.testing.assert_array_equal(ia.tensor, ib.tensor)

    def test_early_stop_runs(self):
        _, batch = random_batch(60, 4, seed=9)
        tree = build_tree(batch, TreeConfig(cutoff=0.0, chunk_size=10, convergence_tol=10.0))
        assert tree.stats["layers"][0]["samples_per_pair"] < 60

    def test_mu_requires_prior(self):
        _, batch = random_batch(3, 4)
        with pytest.raises(ArgumentError):
            build_tree(batch, TreeConfig(mu=0.5))

    def test_prior_dims_checked(self):
        _, batch = random_batch(3, 4)
        prior = lift_linear_multi(np.ones((2, 6)))
        with pytest.raises(ShapeError):
            build_tree(batch, TreeConfig(mu=0.5, prior=prior))

    def test_pure_prior_tree_reproduces_prior(self):
        r = np.random.default_rng(3)
        prior = lift_linear_multi(r.standard_normal((3, 8)), r.standard_normal(3))
        _, batch = random_batch(5, 8, seed=1)
        tree = build_tree(batch, TreeConfig(cutoff=1e-12, mu=1.0, prior=prior))
        w = prior
        for layer in tree.layers:
            w = coarsen(w, layer)
        _, test = random_batch(10, 8, seed=2)
        np.testing.assert_allclose(evaluate(w, coarse_grain(tree, test)), evaluate(prior, test),
                                   atol=1e-8)

    def test_network_chain_validated(self):
        layer = TreeLayer([Isometry(np.eye(4).reshape(2, 2, 4))])
        with pytest.raises(ShapeError):
            TreeNetwork([layer, layer], (2, 2))

    def test_bad_config(self):
        _, batch = random_batch(3, 4)
        with pytest.raises(ArgumentError):
            build_tree(batch, TreeConfig(cutoff=1.5))


def test_fidelity_log_frozen():
    f = map_input([0.0, 1.0])  # |Phi|^2 = 2
    batch = FeatureBatch.from_features([f, f])
    assert fidelity_log(batch) == pytest.approx(math.log(4.0))
