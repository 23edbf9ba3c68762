"""Fusion blocks: gathering, influence exchange, residuals, stacking."""

import numpy as np
import pytest

from synvqa.fusion import (
    BlockParams,
    FeatureBundle,
    block_forward,
    context_encode,
    hyperedge_repr,
    hyperedge_to_frame,
    init_block_params,
    init_context_params,
    node_update,
    residual_update,
    stack_forward,
    video_to_hyperedge,
)
from synvqa.hypergraph import SyntacticHypergraph, build_hypergraph, identity_hypergraph
from synvqa.numcore import finite_diff_check, tensor
from tests.oracles import layer_norm_oracle, softmax_rows_oracle


def tiny_dims():
    return dict(d_w=4, d_v=5, d=3)


def make_bundle(rng, n_w=3, n_f=4, n_c=2, use_frames=True, use_clips=True):
    dims = tiny_dims()
    return FeatureBundle(
        Q=tensor(rng.normal(size=(n_w, dims["d_w"]))),
        F=tensor(rng.normal(size=(n_f, dims["d_v"]))) if use_frames else None,
        M=tensor(rng.normal(size=(n_c, dims["d_v"]))) if use_clips else None,
    )


class TestHyperedgeRepr:
    def test_single_all_word_edge_is_mean(self):
        rng = np.random.default_rng(42)
        Q = rng.normal(size=(4, 6))
        H = np.ones((4, 1))
        g = SyntacticHypergraph(
            n_nodes=4,
            edges=(frozenset({1, 2, 3, 4}),),
            incidence=H,
            edge_degree=H.sum(axis=0),
            node_degree=H.sum(axis=1),
        )
        X = hyperedge_repr(g, tensor(Q), tensor(np.eye(6))).data
        np.testing.assert_allclose(X, Q.mean(axis=0, keepdims=True), atol=1e-12)

    def test_singleton_edges_copy_rows(self):
        rng = np.random.default_rng(42)
        Q = rng.normal(size=(3, 4))
        g = identity_hypergraph(3)
        X = hyperedge_repr(g, tensor(Q), tensor(np.eye(4))).data
        np.testing.assert_allclose(X, Q, atol=1e-12)

    def test_phrase_rows_match_set_mean_oracle(self, phrase_tree):
        rng = np.random.default_rng(42)
        g = build_hypergraph(phrase_tree)
        Q = rng.normal(size=(5, 6))
        W = rng.normal(size=(6, 6))
        X = hyperedge_repr(g, tensor(Q), tensor(W)).data
        for j, edge in enumerate(g.edges):
            mean = Q[[i - 1 for i in sorted(edge)]].mean(axis=0)
            np.testing.assert_allclose(X[j], mean @ W, atol=1e-12)

    def test_convex_hull_with_identity(self, phrase_tree):
        # with W = I every hyperedge row is a mean, so componentwise it
        # stays inside the member rows' min/max box
        rng = np.random.default_rng(7)
        g = build_hypergraph(phrase_tree)
        Q = rng.normal(size=(5, 4))
        X = hyperedge_repr(g, tensor(Q), tensor(np.eye(4))).data
        for j, edge in enumerate(g.edges):
            rows = Q[[i - 1 for i in sorted(edge)]]
            assert np.all(X[j] >= rows.min(axis=0) - 1e-12)
            assert np.all(X[j] <= rows.max(axis=0) + 1e-12)

    def test_shape_mismatch(self, phrase_tree):
        g = build_hypergraph(phrase_tree)
        with pytest.raises(ValueError):
            hyperedge_repr(g, tensor(np.ones((4, 6))), tensor(np.eye(6)))


class TestInfluence:
    def setup_method(self):
        self.rng = np.random.default_rng(42)
        self.p = init_block_params(self.rng, **tiny_dims())

    def test_video_to_hyperedge_stepwise_oracle(self):
        rng = self.rng
        X, F, M = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(2, 5))
        G_xf, G_xm = rng.normal(size=(3, 4)), rng.normal(size=(3, 2))
        got = video_to_hyperedge(
            tensor(X), tensor(F), tensor(M), tensor(G_xf), tensor(G_xm), self.p
        ).data
        pre = (
            softmax_rows_oracle(G_xm) @ M @ self.p.W_xm.data
            + softmax_rows_oracle(G_xf) @ F @ self.p.W_xf.data
            + X @ self.p.W_x.data
        )
        expect = layer_norm_oracle(pre, self.p.ln_vx_g.data, self.p.ln_vx_b.data)
        np.testing.assert_allclose(got, expect, atol=1e-10)

    def test_constant_alignment_mixes_uniformly(self):
        rng = self.rng
        X, F = np.zeros((2, 4)), rng.normal(size=(5, 5))
        G = np.full((2, 5), 3.3)
        got = video_to_hyperedge(
            tensor(X), tensor(F), None, tensor(G), None, self.p
        ).data
        pre = np.tile(F.mean(axis=0) @ self.p.W_xf.data, (2, 1))
        expect = layer_norm_oracle(pre, self.p.ln_vx_g.data, self.p.ln_vx_b.data)
        np.testing.assert_allclose(got, expect, atol=1e-10)

    def test_saturated_alignment_picks_one_frame(self):
        rng = self.rng
        X, F = np.zeros((2, 4)), rng.normal(size=(5, 5))
        G = np.zeros((2, 5))
        G[0, 3] = G[1, 1] = 50.0
        got = video_to_hyperedge(
            tensor(X), tensor(F), None, tensor(G), None, self.p
        ).data
        pre = np.vstack([F[3] @ self.p.W_xf.data, F[1] @ self.p.W_xf.data])
        expect = layer_norm_oracle(pre, self.p.ln_vx_g.data, self.p.ln_vx_b.data)
        np.testing.assert_allclose(got, expect, atol=1e-8)

    def test_hyperedge_to_frame_stepwise_oracle(self):
        rng = self.rng
        X, F = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
        G_xf = rng.normal(size=(3, 4))
        got = hyperedge_to_frame(tensor(X), tensor(F), tensor(G_xf), self.p).data
        pre = softmax_rows_oracle(G_xf.T) @ X @ self.p.W_fx.data + F @ self.p.W_f.data
        expect = layer_norm_oracle(pre, self.p.ln_xf_g.data, self.p.ln_xf_b.data)
        np.testing.assert_allclose(got, expect, atol=1e-10)

    def test_residual_identity_path(self):
        rng = self.rng
        X = rng.normal(size=(3, 4))
        infl = rng.normal(size=(3, 3))
        self.p.W_vx.data[:] = 0.0
        X_new, _, _ = residual_update(tensor(X), None, None, tensor(infl), None, None, self.p)
        expect = layer_norm_oracle(X, self.p.ln_x_g.data, self.p.ln_x_b.data)
        np.testing.assert_allclose(X_new.data, expect, atol=1e-10)

    def test_residual_pure_influence(self):
        rng = self.rng
        infl = rng.normal(size=(3, 3))
        X_new, _, _ = residual_update(
            tensor(np.zeros((3, 4))), None, None, tensor(infl), None, None, self.p
        )
        expect = layer_norm_oracle(
            infl @ self.p.W_vx.data, self.p.ln_x_g.data, self.p.ln_x_b.data
        )
        np.testing.assert_allclose(X_new.data, expect, atol=1e-10)


class TestNodeUpdate:
    def test_single_membership_copies_edge_row(self):
        g = identity_hypergraph(3)
        rng = np.random.default_rng(42)
        X = rng.normal(size=(3, 4))
        got = node_update(g, tensor(X), tensor(np.eye(4))).data
        np.testing.assert_allclose(got, X, atol=1e-12)

    def test_phrase_root_word_averages_its_edges(self, phrase_tree):
        # the root word belongs to exactly 3 hyperedges
        g = build_hypergraph(phrase_tree)
        rng = np.random.default_rng(42)
        X = rng.normal(size=(g.n_edges, 4))
        got = node_update(g, tensor(X), tensor(np.eye(4))).data
        member = [j for j, e in enumerate(g.edges) if 1 in e]
        assert len(member) == 3
        np.testing.assert_allclose(got[0], X[member].mean(axis=0), atol=1e-12)

    def test_uniform_edge_rows_collapse(self, phrase_tree):
        g = build_hypergraph(phrase_tree)
        X = np.tile([1.0, 2.0, 3.0], (g.n_edges, 1))
        got = node_update(g, tensor(X), tensor(np.eye(3))).data
        np.testing.assert_allclose(got, np.tile([1.0, 2.0, 3.0], (5, 1)), atol=1e-12)


class TestBlockForward:
    def test_output_shapes_match_input(self, phrase_tree):
        rng = np.random.default_rng(42)
        g = build_hypergraph(phrase_tree)
        bundle = make_bundle(rng, n_w=5)
        p = init_block_params(rng, **tiny_dims())
        out = block_forward(bundle, g, p)
        assert out.Q.shape == bundle.Q.shape
        assert out.F.shape == bundle.F.shape
        assert out.M.shape == bundle.M.shape

    def test_word_level_mode_equals_identity_graph(self, phrase_tree):
        rng = np.random.default_rng(42)
        g = build_hypergraph(phrase_tree)
        bundle = make_bundle(rng, n_w=5)
        p = init_block_params(rng, **tiny_dims())
        a = block_forward(bundle, g, p, syntax_mode="word-level")
        b = block_forward(bundle, identity_hypergraph(5), p, syntax_mode="hypergraph")
        np.testing.assert_allclose(a.Q.data, b.Q.data, atol=1e-12)
        np.testing.assert_allclose(a.F.data, b.F.data, atol=1e-12)

    def test_edge_permutation_consistency(self, phrase_tree):
        rng = np.random.default_rng(42)
        g = build_hypergraph(phrase_tree)
        perm = rng.permutation(g.n_edges)
        g_perm = SyntacticHypergraph(
            n_nodes=g.n_nodes,
            edges=tuple(g.edges[j] for j in perm),
            incidence=g.incidence[:, perm],
            edge_degree=g.edge_degree[perm],
            node_degree=g.node_degree,
        )
        bundle = make_bundle(rng, n_w=5)
        p = init_block_params(rng, **tiny_dims())
        a = block_forward(bundle, g, p)
        b = block_forward(bundle, g_perm, p)
        np.testing.assert_allclose(a.Q.data, b.Q.data, atol=1e-10)
        np.testing.assert_allclose(a.F.data, b.F.data, atol=1e-10)
        np.testing.assert_allclose(a.M.data, b.M.data, atol=1e-10)

    def test_modality_toggles(self, phrase_tree):
        rng = np.random.default_rng(42)
        g = build_hypergraph(phrase_tree)
        dims = tiny_dims()
        for use_frames, use_clips in ((True, False), (False, True)):
            bundle = make_bundle(rng, n_w=5, use_frames=use_frames, use_clips=use_clips)
            p = init_block_params(rng, use_frames=use_frames, use_clips=use_clips, **dims)
            out = block_forward(bundle, g, p)
            assert out.Q.shape == (5, dims["d_w"])
            assert (out.F is None) == (not use_frames)
            assert (out.M is None) == (not use_clips)

    def test_bundle_params_mismatch_rejected(self, phrase_tree):
        rng = np.random.default_rng(42)
        g = build_hypergraph(phrase_tree)
        bundle = make_bundle(rng, n_w=5)
        p = init_block_params(rng, use_clips=False, **tiny_dims())
        with pytest.raises(ValueError, match="clip"):
            block_forward(bundle, g, p)

    def test_no_visual_stream_rejected(self):
        with pytest.raises(ValueError):
            FeatureBundle(Q=tensor(np.ones((2, 3))))

    def test_dot_mode_and_rescale_run(self, phrase_tree):
        rng = np.random.default_rng(42)
        g = build_hypergraph(phrase_tree)
        bundle = make_bundle(rng, n_w=5)
        p = init_block_params(rng, **tiny_dims())
        for kwargs in (dict(ot_mode="dot"), dict(rescale_plan=True)):
            out = block_forward(bundle, g, p, **kwargs)
            assert np.all(np.isfinite(out.Q.data))

    def test_unknown_modes_rejected(self, phrase_tree):
        rng = np.random.default_rng(42)
        g = build_hypergraph(phrase_tree)
        bundle = make_bundle(rng, n_w=5)
        p = init_block_params(rng, **tiny_dims())
        with pytest.raises(ValueError):
            block_forward(bundle, g, p, ot_mode="cosine")
        with pytest.raises(ValueError):
            block_forward(bundle, g, p, syntax_mode="tree")


class TestStack:
    def test_one_block_equals_block_forward(self, phrase_tree):
        rng = np.random.default_rng(42)
        g = build_hypergraph(phrase_tree)
        bundle = make_bundle(rng, n_w=5)
        p = init_block_params(rng, **tiny_dims())
        a = stack_forward(bundle, g, [p])
        b = block_forward(bundle, g, p)
        np.testing.assert_allclose(a.Q.data, b.Q.data, atol=1e-12)

    def test_two_blocks_equal_double_application(self, phrase_tree):
        rng = np.random.default_rng(42)
        g = build_hypergraph(phrase_tree)
        bundle = make_bundle(rng, n_w=5)
        p1 = init_block_params(rng, **tiny_dims())
        p2 = init_block_params(rng, **tiny_dims())
        a = stack_forward(bundle, g, [p1, p2])
        b = block_forward(block_forward(bundle, g, p1), g, p2)
        np.testing.assert_allclose(a.Q.data, b.Q.data, atol=1e-12)

    def test_depth_sweep_finite(self, phrase_tree):
        rng = np.random.default_rng(42)
        g = build_hypergraph(phrase_tree)
        bundle = make_bundle(rng, n_w=5)
        for depth in range(1, 6):
            blocks = [init_block_params(rng, **tiny_dims()) for _ in range(depth)]
            out = stack_forward(bundle, g, blocks)
            for t in (out.Q, out.F, out.M):
                assert np.all(np.isfinite(t.data))

    def test_empty_stack_rejected(self, phrase_tree):
        rng = np.random.default_rng(42)
        bundle = make_bundle(rng, n_w=5)
        with pytest.raises(ValueError):
            stack_forward(bundle, build_hypergraph(phrase_tree), [])


class TestGradients:
    def test_block_forward_finite_differences(self, phrase_tree):
        rng = np.random.default_rng(42)
        g = build_hypergraph(phrase_tree)
        Q = rng.normal(size=(5, 4))
        F = rng.normal(size=(3, 5))
        M = rng.normal(size=(2, 5))
        p = init_block_params(rng, **tiny_dims())
        params = p.named()

        def f():
            bundle = FeatureBundle(Q=tensor(Q), F=tensor(F), M=tensor(M))
            out = block_forward(bundle, g, p, ot_iters=5)
            return (
                (out.Q * out.Q).sum() + (out.F * out.F).sum() + (out.M * out.M).sum()
            ) * 1e-1

        assert finite_diff_check(f, params) <= 1e-4

    def test_context_encoder_finite_differences(self):
        rng = np.random.default_rng(42)
        Q = rng.normal(size=(4, 3))
        p = init_context_params(rng, d_w=3, hidden=2)
        params = p.named()

        def f():
            out = context_encode(tensor(Q), p)
            return (out * out).sum()

        assert finite_diff_check(f, params) <= 1e-4


class TestContextEncoder:
    def test_shape_preserved(self):
        rng = np.random.default_rng(42)
        Q = rng.normal(size=(6, 5))
        p = init_context_params(rng, d_w=5)
        assert context_encode(tensor(Q), p).shape == (6, 5)

    def test_order_sensitivity(self):
        # a recurrent pass must distinguish a sequence from its reversal
        rng = np.random.default_rng(42)
        Q = rng.normal(size=(5, 4))
        p = init_context_params(rng, d_w=4)
        a = context_encode(tensor(Q), p).data
        b = context_encode(tensor(Q[::-1].copy()), p).data
        assert not np.allclose(a, b[::-1])
