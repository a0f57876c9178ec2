import numpy as np
import pytest
from conftest import random_cloud, random_sparse
from oracles import dense_conv, densify, max_rel_dev, sigmoid

from lift.errors import ShapeError
from lift.network import (DbpfnParams, NetworkConfig, dbpfn_encode,
                          decode, fuse_network, fuse_scales, fusion_probe_deviation,
                          inference_graph, random_network_weights, residual_add_count,
                          run_backbone, run_head, run_network)
from lift.pillarizer import GridConfig, PillarSet, pillarize
from lift.sparse import SparseTensor2D


def manual_pillars(width, height, entries, n_features):
    """entries: list of ((i, j), per-point feature rows)."""
    entries = sorted(entries, key=lambda e: e[0][1] * width + e[0][0])
    coords = np.array([ij for ij, _ in entries], dtype=np.int64)
    features = np.concatenate([np.asarray(rows, dtype=np.float64)
                               for _, rows in entries]) if entries \
        else np.empty((0, n_features))
    counts = [len(rows) for _, rows in entries]
    offsets = np.r_[0, np.cumsum(counts)].astype(np.int64)
    return PillarSet(width=width, height=height, coords=coords,
                     features=features, offsets=offsets)


class TestDbpfn:
    def test_single_point_pillar_halves_match(self, rng):
        params = DbpfnParams(weight=rng.normal(size=(4, 3)), bias=rng.normal(size=3))
        pillars = manual_pillars(8, 8, [((2, 3), [rng.normal(size=4)])], 4)
        out = dbpfn_encode(pillars, params)
        assert out.channels == 6
        assert np.array_equal(out.features[0, :3], out.features[0, 3:])

    def test_hand_max_min_concat(self):
        # two points whose mapped vectors are [1, -2] and [3, -5]
        params = DbpfnParams(weight=np.eye(2), bias=np.zeros(2))
        pillars = manual_pillars(4, 4, [((1, 1), [[1.0, -2.0], [3.0, -5.0]])], 2)
        out = dbpfn_encode(pillars, params)
        assert list(out.features[0]) == [3.0, -2.0, 1.0, -5.0]

    def test_permutation_invariance(self, rng):
        params = DbpfnParams(weight=rng.normal(size=(5, 4)), bias=rng.normal(size=4))
        rows = rng.normal(size=(7, 5))
        a = dbpfn_encode(manual_pillars(4, 4, [((0, 0), rows)], 5), params)
        b = dbpfn_encode(manual_pillars(4, 4, [((0, 0), rows[::-1])], 5), params)
        assert np.array_equal(a.features, b.features)

    def test_output_width_is_twice_hidden(self, rng):
        params = DbpfnParams(weight=rng.normal(size=(9, 32)), bias=np.zeros(32))
        pillars = manual_pillars(4, 4, [((0, 0), rng.normal(size=(3, 9)))], 9)
        assert dbpfn_encode(pillars, params).channels == 64

    def test_feature_length_mismatch(self, rng):
        params = DbpfnParams(weight=rng.normal(size=(7, 4)), bias=np.zeros(4))
        pillars = manual_pillars(4, 4, [((0, 0), rng.normal(size=(2, 9)))], 9)
        with pytest.raises(ShapeError):
            dbpfn_encode(pillars, params)

    def test_empty(self, rng):
        params = DbpfnParams(weight=rng.normal(size=(9, 8)), bias=np.zeros(8))
        out = dbpfn_encode(manual_pillars(6, 6, [], 9), params)
        assert len(out) == 0 and out.channels == 16


def tiny_network(rng, seed=0, form="fused"):
    cfg = NetworkConfig(encoder_out=8, stage_channels=(8, 8, 16, 16),
                        stage_depths=(1, 2, 1, 1), align_channels=16,
                        num_classes=3, class_names=("a", "b", "c"))
    return cfg, random_network_weights(cfg, 9, seed, form)


class TestBackbone:
    def test_empty_input(self, rng):
        cfg, weights = tiny_network(rng)
        s2, s3, s4 = run_backbone(SparseTensor2D.empty(32, 32, 8), weights)
        assert len(s2) == len(s3) == len(s4) == 0
        assert (s2.width, s3.width, s4.width) == (8, 4, 2)

    def test_stage_strides_and_channels(self, rng):
        cfg, weights = tiny_network(rng)
        x = random_sparse(rng, 32, 32, 8, occupancy=0.2)
        s2, s3, s4 = run_backbone(x, weights)
        assert (s2.width, s3.width, s4.width) == (8, 4, 2)
        assert (s2.channels, s3.channels, s4.channels) == (8, 16, 16)

    def test_fused_matches_training_form(self, rng):
        cfg, train = tiny_network(rng, seed=5, form="train")
        fused = fuse_network(train)
        x = random_sparse(rng, 32, 32, 8, occupancy=0.15)
        outs_t = run_backbone(x, train)
        outs_f = run_backbone(x, fused)
        for a, b in zip(outs_t, outs_f):
            assert np.array_equal(a.coords, b.coords)
            assert max_rel_dev(a.features, b.features) < 1e-3


class TestFuseScales:
    def test_empty_others_returns_aligned_s2(self, rng):
        cfg, weights = tiny_network(rng)
        s2 = random_sparse(rng, 8, 8, 8, occupancy=0.4)
        s3 = SparseTensor2D.empty(4, 4, 16)
        s4 = SparseTensor2D.empty(2, 2, 16)
        out = fuse_scales(s2, s3, s4, weights.align)
        expected = s2.features @ weights.align.kernel[0, 0] + weights.align.bias
        assert np.allclose(out.features, expected)

    def test_active_set_is_s2(self, rng):
        cfg, weights = tiny_network(rng)
        s2 = random_sparse(rng, 8, 8, 8, occupancy=0.5)
        s3 = random_sparse(rng, 4, 4, 16, occupancy=0.7)
        s4 = random_sparse(rng, 2, 2, 16, occupancy=0.9)
        out = fuse_scales(s2, s3, s4, weights.align)
        assert np.array_equal(out.coords, s2.coords)

    def test_hand_floor_division_addition(self, rng):
        cfg, weights = tiny_network(rng)
        align = weights.align
        s2 = SparseTensor2D.build(8, 8, [(4, 6), (5, 5), (0, 0)],
                                  rng.normal(size=(3, 8)))
        s3 = SparseTensor2D.build(4, 4, [(2, 3)], rng.normal(size=(1, 16)))
        s4 = SparseTensor2D.build(2, 2, [(1, 1)], rng.normal(size=(1, 16)))
        out = fuse_scales(s2, s3, s4, align)
        aligned = {tuple(c): f @ align.kernel[0, 0] + align.bias
                   for c, f in zip(map(tuple, s2.coords), s2.features)}
        want = {
            (0, 0): aligned[(0, 0)],                                     # no matches
            (4, 6): aligned[(4, 6)] + s3.features[0] + s4.features[0],   # (2,3), (1,1)
            (5, 5): aligned[(5, 5)] + s4.features[0],                    # (2,2) miss, (1,1) hit
        }
        for c, f in zip(map(tuple, out.coords), out.features):
            assert np.allclose(f, want[c])


class TestHeadAndDecode:
    def test_head_active_sets(self, rng):
        cfg, weights = tiny_network(rng)
        x = random_sparse(rng, 8, 8, 16, occupancy=0.4)
        heat, reg = run_head(x, weights.head)
        assert np.array_equal(heat.coords, x.coords)
        assert np.array_equal(reg.coords, x.coords)
        assert heat.channels == 3 and reg.channels == 8

    def test_head_dense_oracle(self, rng):
        cfg, weights = tiny_network(rng)
        x = random_sparse(rng, 16, 16, 16, occupancy=0.3)
        heat, _ = run_head(x, weights.head)
        hidden = dense_conv(densify(x), weights.head.cls_conv.kernel,
                            weights.head.cls_conv.bias)
        hidden = np.maximum(hidden, 0.0)
        mask = np.zeros((16, 16), dtype=bool)
        mask[x.coords[:, 1], x.coords[:, 0]] = True
        hidden[~mask] = 0.0  # submanifold: inactive sites carry nothing
        logits = dense_conv(hidden, weights.head.cls_out.kernel,
                            weights.head.cls_out.bias)
        ref = np.stack([logits[j, i] for (i, j) in heat.coords])
        assert max_rel_dev(heat.features, ref) < 1e-10

    def test_decode_empty_and_all_negative(self, rng):
        grid = GridConfig(x_min=-4.8, x_max=4.8, y_min=-4.8, y_max=4.8)
        cfg = NetworkConfig(num_classes=3, class_names=("a", "b", "c"))
        heat = SparseTensor2D.build(8, 8, [(1, 1)], [[-50.0, -60.0, -70.0]])
        reg = SparseTensor2D.build(8, 8, [(1, 1)], [np.zeros(8)])
        assert decode(heat, reg, grid, cfg, 0.4, 10) == []

    def test_decode_sigmoid_half(self):
        grid = GridConfig(x_min=-4.8, x_max=4.8, y_min=-4.8, y_max=4.8)
        cfg = NetworkConfig(num_classes=1, class_names=("a",))
        heat = SparseTensor2D.build(16, 16, [(2, 3)], [[0.0]])
        reg = SparseTensor2D.build(16, 16, [(2, 3)], [np.zeros(8)])
        boxes = decode(heat, reg, grid, cfg, 0.4, 10)
        assert len(boxes) == 1
        b = boxes[0]
        assert b.score == pytest.approx(0.5)
        # cell-center convention at stride 4: (i + 0.5) * 0.6 - 4.8
        assert b.x == pytest.approx((2 + 0.5) * 0.6 - 4.8)
        assert b.y == pytest.approx((3 + 0.5) * 0.6 - 4.8)

    def test_decode_local_maximum_suppression(self):
        grid = GridConfig(x_min=-4.8, x_max=4.8, y_min=-4.8, y_max=4.8)
        cfg = NetworkConfig(num_classes=1, class_names=("a",))
        # two peaks inside one 3x3 window: only the dominant survives
        coords = [(4, 4), (5, 4), (10, 10)]
        heat = SparseTensor2D.build(16, 16, coords, [[2.0], [1.0], [0.5]])
        reg = SparseTensor2D.build(16, 16, coords, np.zeros((3, 8)))
        boxes = decode(heat, reg, grid, cfg, 0.1, 10)
        assert len(boxes) == 2
        assert {round(b.score, 6) for b in boxes} == \
            {round(sigmoid(2.0), 6), round(sigmoid(0.5), 6)}

    def test_decode_centers_stay_near_grid(self, rng):
        grid = GridConfig(x_min=-4.8, x_max=4.8, y_min=-4.8, y_max=4.8)
        cfg = NetworkConfig(num_classes=2, class_names=("a", "b"))
        coords = [(0, 0), (15, 15)]
        heat = SparseTensor2D.build(16, 16, coords, rng.normal(size=(2, 2)) + 3)
        reg = SparseTensor2D.build(16, 16, coords, rng.normal(size=(2, 8)) * 100)
        cell = grid.pillar_size_x * 4
        for b in decode(heat, reg, grid, cfg, 0.0, 10):
            assert grid.x_min - cell <= b.x <= grid.x_max + cell
            assert grid.y_min - cell <= b.y <= grid.y_max + cell
            assert b.l > 0 and b.w > 0 and b.h > 0
            assert -np.pi < b.yaw <= np.pi

    def test_decode_centers_bounded_on_overhanging_grid(self, rng):
        # 13 pillars per axis: the stride-4 map overhangs the range
        grid = GridConfig(x_min=0.0, x_max=13 * 0.15, y_min=0.0, y_max=13 * 0.15)
        cfg = NetworkConfig(num_classes=1, class_names=("a",))
        coords = [(3, 3)]  # last site of the 4x4 stride-4 grid
        heat = SparseTensor2D.build(4, 4, coords, [[5.0]])
        reg = SparseTensor2D.build(4, 4, coords, [np.full(8, 50.0)])
        cell = grid.pillar_size_x * 4
        (box,) = decode(heat, reg, grid, cfg, 0.0, 5)
        assert box.x <= grid.x_max + cell and box.y <= grid.y_max + cell

    def test_decode_topk_tiebreak(self):
        grid = GridConfig(x_min=-4.8, x_max=4.8, y_min=-4.8, y_max=4.8)
        cfg = NetworkConfig(num_classes=2, class_names=("a", "b"))
        # equal logits far apart; tie broken by (class, j, i) ascending
        coords = [(9, 2), (3, 7)]
        heat = SparseTensor2D.build(16, 16, coords, [[1.0, 1.0], [1.0, 1.0]])
        reg = SparseTensor2D.build(16, 16, coords, np.zeros((2, 8)))
        boxes = decode(heat, reg, grid, cfg, 0.1, 3)
        assert [(b.class_id, b.y, b.x) for b in boxes] == sorted(
            (b.class_id, b.y, b.x) for b in boxes)


class TestWholeNetwork:
    def test_end_to_end_and_fusion_equivalence(self, rng, small_config):
        cfg = small_config
        cloud = random_cloud(rng, 700, cfg.grid)
        pillars = pillarize(cloud, cfg.grid)
        train = random_network_weights(cfg.network, cfg.feature_length, 11, "train")
        fused = fuse_network(train)
        res_t = run_network(pillars, train, cfg.grid, cfg.network, 0.05, 32)
        res_f = run_network(pillars, fused, cfg.grid, cfg.network, 0.05, 32)
        assert max_rel_dev(res_t.heatmap.features, res_f.heatmap.features) < 1e-3
        assert res_f.stage_sizes["fused"] == res_f.stage_sizes["stage2"]

    def test_probe_deviation_small(self, rng):
        cfg, train = tiny_network(rng, seed=2, form="train")
        fused = fuse_network(train)
        assert fusion_probe_deviation(train, fused, probes=4) < 1e-4

    def test_graph_audit(self, rng):
        cfg, train = tiny_network(rng, seed=2, form="train")
        fused = fuse_network(train)
        assert residual_add_count(fused) == 2
        assert residual_add_count(train) > 2
        fused_adds = [op.name for op in inference_graph(fused) if op.kind == "add"]
        assert fused_adds == ["fusion.add3", "fusion.add4"]

    def test_head_active_set_equals_stage2(self, rng, small_config):
        cfg = small_config
        cloud = random_cloud(rng, 400, cfg.grid)
        pillars = pillarize(cloud, cfg.grid)
        weights = random_network_weights(cfg.network, cfg.feature_length, 1, "fused")
        res = run_network(pillars, weights, cfg.grid, cfg.network, 0.05, 32)
        assert res.stage_sizes["fused"] == res.stage_sizes["stage2"]
        assert len(res.heatmap) == res.stage_sizes["stage2"]

    def test_head_active_set_is_twice_applied_stride2_law(self, rng, small_config):
        from oracles import stride2_active_set

        cfg = small_config
        cloud = random_cloud(rng, 250, cfg.grid)
        pillars = pillarize(cloud, cfg.grid)
        weights = random_network_weights(cfg.network, cfg.feature_length, 1, "fused")
        res = run_network(pillars, weights, cfg.grid, cfg.network, 0.05, 32)
        w = cfg.grid.width
        once = stride2_active_set({tuple(c) for c in pillars.coords}, w, w)
        twice = stride2_active_set(once, -(-w // 2), -(-w // 2))
        assert {tuple(c) for c in res.heatmap.coords} == twice
