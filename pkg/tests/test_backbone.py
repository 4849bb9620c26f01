import json
import struct

import numpy as np
import pytest

from suptlab.backbone import (
    FORMAT_VERSION,
    MAGIC,
    Backbone,
    Checkpoint,
    CheckpointError,
    GinConfig,
    Head,
    backbone_forward,
    default_backbone_param_count,
    gin_layer_forward,
    head_forward,
    load_checkpoint,
    param_count,
    readout,
    save_checkpoint,
)
from suptlab.gradcheck import random_graph
from suptlab.graph import Graph, GraphBatch
from suptlab.numerics import TUNABLE, ParamGroup, ShapeError, Tensor, finite_diff_check, reduce, rng
from suptlab.prompt import PromptParams


def two_path(x):
    return Graph.build(2, [(0, 1)], np.asarray(x, dtype=np.float64))


class TestGinLayer:
    def test_single_node_identity(self):
        x = np.array([[1.5, -2.0]])
        g = Graph.build(1, [], x)
        np.testing.assert_array_equal(gin_layer_forward(x, g, 0.0, np.eye(2)).data, x)

    def test_two_node_path(self):
        g = two_path(np.eye(2))
        np.testing.assert_array_equal(gin_layer_forward(g.x, g, 0.0, np.eye(2)).data, [[1, 1], [1, 1]])

    def test_eps_minus_one_without_edges_is_zero(self):
        g = Graph.build(3, [], np.ones((3, 2)))
        np.testing.assert_array_equal(gin_layer_forward(g.x, g, -1.0, np.eye(2)).data, np.zeros((3, 2)))

    def test_width_mismatch(self):
        g = two_path(np.eye(2))
        with pytest.raises(ShapeError):
            gin_layer_forward(g.x, g, 0.0, np.eye(3))

    def test_matches_dense_formula(self):
        gen = rng(0, "gin")
        g = random_graph(gen, 6, 3)
        w = gen.standard_normal((3, 4))
        eps = 0.3
        dense = (g.adjacency() + (1 + eps) * np.eye(6)) @ g.x @ w
        np.testing.assert_allclose(gin_layer_forward(g.x, g, eps, w).data, dense, atol=1e-12)


class TestBackbone:
    def test_one_layer_is_gin_layer(self):
        g = random_graph(rng(1, "b"), 5, 3)
        b = Backbone.init(GinConfig(input_dim=3, num_layers=1, hidden_dim=4, epsilon=0.5), seed=0)
        expect = gin_layer_forward(g.x, g, 0.5, b.params["gin.0.w"])
        np.testing.assert_array_equal(backbone_forward(b, g).data, expect.data)

    def test_zero_input(self):
        g = random_graph(rng(2, "b"), 5, 3).with_features(np.zeros((5, 3)))
        b = Backbone.init(GinConfig(input_dim=3, num_layers=3, hidden_dim=4), seed=0)
        np.testing.assert_array_equal(backbone_forward(b, g).data, 0.0)

    @pytest.mark.parametrize("seed", range(20))
    def test_permutation_equivariance(self, seed):
        gen = rng(seed, "equiv")
        n = int(gen.integers(1, 9))
        g = random_graph(gen, n, 3)
        cfg = GinConfig(input_dim=3, num_layers=3, hidden_dim=5, epsilon=0.2, mlp_per_layer=bool(seed % 2))
        b = Backbone.init(cfg, seed)
        perm = gen.permutation(n)
        z = backbone_forward(b, g).data
        z_perm = backbone_forward(b, g.permuted(perm)).data
        expect = np.empty_like(z)
        expect[perm] = z
        assert np.abs(z_perm - expect).max() <= 1e-10

    def test_input_width_checked(self):
        g = random_graph(rng(0, "w"), 4, 3)
        b = Backbone.init(GinConfig(input_dim=2, num_layers=1, hidden_dim=2), 0)
        with pytest.raises(ShapeError):
            backbone_forward(b, g)

    @pytest.mark.parametrize("seed", range(5))
    def test_weight_gradients(self, seed):
        gen = rng(seed, "bgrad")
        batch = GraphBatch.from_graphs([random_graph(gen, 5, 3), random_graph(gen, 4, 3)])
        b = Backbone.init(GinConfig(input_dim=3, num_layers=2, hidden_dim=4, mlp_per_layer=True), seed, role=TUNABLE)
        rep = finite_diff_check(lambda: reduce("frobenius", readout(backbone_forward(b, batch), batch)), b.params)
        assert rep.passed, rep.message

    def test_config_validation(self):
        with pytest.raises(ValueError):
            GinConfig(input_dim=3, num_layers=0)
        with pytest.raises(ValueError):
            GinConfig(input_dim=3, epsilon=-1.5)


class TestReadout:
    def test_single_node(self):
        g = Graph.build(1, [], np.zeros((1, 2)))
        np.testing.assert_array_equal(readout(Tensor([[1.0, 2.0]]), g, "sum").data, [[1.0, 2.0]])

    def test_sum(self):
        g = two_path(np.zeros((2, 2)))
        np.testing.assert_array_equal(readout(Tensor([[1.0, 2.0], [3.0, 4.0]]), g, "sum").data, [[4.0, 6.0]])

    def test_mean_of_identical_rows(self):
        g = Graph.build(3, [], np.zeros((3, 2)))
        out = readout(Tensor(np.tile([[0.3, -1.2]], (3, 1))), g, "mean").data
        np.testing.assert_allclose(out, [[0.3, -1.2]], atol=1e-15)

    def test_batched_segments(self):
        batch = GraphBatch.from_graphs([Graph.build(1, [], np.zeros((1, 1))), Graph.build(2, [], np.zeros((2, 1)))])
        out = readout(Tensor([[1.0], [2.0], [4.0]]), batch, "mean").data
        np.testing.assert_array_equal(out, [[1.0], [3.0]])


class TestHead:
    def test_identity(self):
        h = Head.from_arrays({"head.0.w": np.eye(3), "head.0.b": np.zeros((1, 3))})
        np.testing.assert_array_equal(head_forward(h, Tensor([[1.0, -2.0, 3.0]])).data, [[1.0, -2.0, 3.0]])

    def test_zero_weights(self):
        h = Head.from_arrays({"head.0.w": np.zeros((3, 2)), "head.0.b": np.zeros((1, 2))})
        np.testing.assert_array_equal(head_forward(h, Tensor([[1.0, 2.0, 3.0]])).data, [[0.0, 0.0]])

    def test_two_layer_hand_computed(self):
        h = Head.from_arrays(
            {
                "head.0.w": np.array([[1.0, -1.0], [2.0, 0.0]]),
                "head.0.b": np.array([[0.0, 0.5]]),
                "head.1.w": np.array([[1.0], [3.0]]),
                "head.1.b": np.array([[-1.0]]),
            }
        )
        # hidden = relu([1+4, -1+0.5]) = [5, 0]; out = 5 - 1 = 4
        assert head_forward(h, Tensor([[1.0, 2.0]])).item() == 4.0

    def test_layer_range(self):
        with pytest.raises(ValueError):
            Head.init(4, 2, num_layers=5, seed=0)


class TestParamCount:
    def test_gpf(self):
        assert param_count(PromptParams.init("gpf", 300).params) == 300

    def test_supt_k5(self):
        assert param_count(PromptParams.init("supt_soft", 300, k=5).params) == 3000

    def test_gpf_plus_k10(self):
        assert param_count(PromptParams.init("gpf_plus", 300, k=10).params) == 6000

    def test_default_backbone(self):
        assert default_backbone_param_count() == 450_000

    def test_filters(self):
        group = ParamGroup.from_arrays({"a": np.ones((2, 2))}, TUNABLE)
        assert param_count(group, "tunable") == 4 and param_count(group, "frozen") == 0


class TestCheckpoint:
    def ck(self):
        b = Backbone.init(GinConfig(input_dim=3, num_layers=2, hidden_dim=4, mlp_per_layer=True), seed=5)
        return Checkpoint.from_backbone(b, "edgepred", 5)

    def test_round_trip(self, tmp_path):
        ck = self.ck()
        save_checkpoint(tmp_path / "c.bin", ck)
        back = load_checkpoint(tmp_path / "c.bin")
        assert ck.equals(back)

    def test_layout_header(self, tmp_path):
        raw = self.ck().to_bytes()
        assert raw[:8] == MAGIC
        (size,) = struct.unpack("<Q", raw[8:16])
        manifest = json.loads(raw[16 : 16 + size])
        assert manifest["format_version"] == FORMAT_VERSION
        assert len(raw) == 16 + size + 8 * sum(np.prod(t["shape"]) for t in manifest["tensors"])

    def rewrite(self, tmp_path, edit):
        raw = self.ck().to_bytes()
        (size,) = struct.unpack("<Q", raw[8:16])
        manifest = json.loads(raw[16 : 16 + size])
        body = raw[16 + size :]
        manifest, body = edit(manifest, body)
        head = json.dumps(manifest).encode()
        p = tmp_path / "bad.bin"
        p.write_bytes(MAGIC + struct.pack("<Q", len(head)) + head + body)
        return p

    def test_wrong_version(self, tmp_path):
        def edit(m, body):
            m["format_version"] = 99
            return m, body

        with pytest.raises(CheckpointError, match="format_version 99"):
            load_checkpoint(self.rewrite(tmp_path, edit))

    def test_missing_tensor(self, tmp_path):
        def edit(m, body):
            dropped = m["tensors"].pop()
            return m, body[: len(body) - 8 * int(np.prod(dropped["shape"]))]

        with pytest.raises(CheckpointError, match="gin.1.w2"):
            load_checkpoint(self.rewrite(tmp_path, edit))

    def test_unknown_tensor(self, tmp_path):
        def edit(m, body):
            m["tensors"][0]["name"] = "gin.9.w"
            return m, body

        with pytest.raises(CheckpointError, match="gin.9.w"):
            load_checkpoint(self.rewrite(tmp_path, edit))

    def test_truncated(self, tmp_path):
        p = tmp_path / "t.bin"
        p.write_bytes(self.ck().to_bytes()[:-5])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(p)

    def test_backbone_copies_arrays(self):
        ck = self.ck()
        b = ck.backbone()
        b.params["gin.0.w"].data[0, 0] += 1.0
        assert not np.array_equal(ck.tensors["gin.0.w"], b.params["gin.0.w"].data)
