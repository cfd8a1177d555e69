"""Structure, determinism, fusion, and parameter-count contracts."""

from itertools import product

import numpy as np
import pytest
import torch

from treesr import model as M

TINY = dict(residual_groups=1, blocks_per_group=1, channels=8, reduction=2, scale=2)


def tiny_cfg(depth=2, width=2, **kw):
    args = dict(TINY)
    args.update(kw)
    return M.ModelConfig(tree_depth=depth, branching=width, **args)


class TestModelConfig:
    def test_rejects_indivisible_reduction(self):
        with pytest.raises(ValueError, match="divisible"):
            M.ModelConfig(channels=10, reduction=16)

    def test_rejects_bad_scale(self):
        with pytest.raises(ValueError, match="scale"):
            M.ModelConfig(scale=5)

    def test_leaf_paths_enumerate_lexicographically(self):
        cfg = tiny_cfg(depth=2, width=3)
        assert cfg.num_predictions == 9
        assert cfg.leaf_paths == tuple(product(range(3), repeat=2))

    def test_hash_is_stable_and_sensitive(self):
        a, b = tiny_cfg(), tiny_cfg()
        assert a.hash() == b.hash()
        assert a.hash() != tiny_cfg(channels=16, reduction=4).hash()


class TestBuildDivergence:
    def test_paper_baseline_leaf_count(self):
        assert tiny_cfg(depth=2, width=2).num_predictions == 4

    def test_degenerate_single_chain(self):
        model = M.build_divergence_network(tiny_cfg(depth=1, width=1), seed=0)
        assert len(model.leaf_paths) == 1

    def test_node_count_depth3(self):
        model = M.build_divergence_network(tiny_cfg(depth=3, width=2), seed=0)
        assert [len(level) for level in model.levels] == [2, 4, 8]
        assert sum(len(level) for level in model.levels) == 14

    def test_same_seed_bit_identical(self):
        cfg = tiny_cfg()
        a = M.build_divergence_network(cfg, seed=9).state_dict()
        b = M.build_divergence_network(cfg, seed=9).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_different_seed_differs(self):
        cfg = tiny_cfg()
        a = M.build_divergence_network(cfg, seed=1).state_dict()
        b = M.build_divergence_network(cfg, seed=2).state_dict()
        assert any(not torch.equal(a[k], b[k]) for k in a)

    def test_biases_zero(self):
        model = M.build_divergence_network(tiny_cfg(), seed=3)
        for name, param in model.named_parameters():
            if name.endswith("bias"):
                assert torch.all(param == 0), name

    def test_no_parameter_sharing_between_nodes(self):
        model = M.build_divergence_network(tiny_cfg(), seed=4)
        seen = set()
        for level in model.levels:
            for node in level:
                for param in node.parameters():
                    assert id(param) not in seen
                    seen.add(id(param))


class TestDivergenceForward:
    def test_output_geometry_x4(self):
        cfg = tiny_cfg(depth=2, width=2, scale=4)
        model = M.build_divergence_network(cfg, seed=0)
        preds = M.divergence_forward(model, np.random.default_rng(0).random((24, 24, 3)))
        assert len(preds) == 4
        assert all(p.shape == (96, 96, 3) for p in preds.predictions)

    def test_single_branch_list_length(self):
        model = M.build_divergence_network(tiny_cfg(depth=1, width=1), seed=0)
        preds = M.divergence_forward(model, np.random.default_rng(1).random((8, 8, 3)))
        assert len(preds) == 1

    def test_deterministic_and_branches_distinct(self):
        model = M.build_divergence_network(tiny_cfg(), seed=5)
        img = np.random.default_rng(2).random((12, 12, 3))
        first = M.divergence_forward(model, img)
        second = M.divergence_forward(model, img)
        for a, b in zip(first.predictions, second.predictions):
            np.testing.assert_array_equal(a, b)
        for i in range(len(first)):
            for j in range(i + 1, len(first)):
                assert np.mean((first.predictions[i] - first.predictions[j]) ** 2) > 0

    def test_outputs_finite(self):
        model = M.build_divergence_network(tiny_cfg(), seed=6)
        preds = M.divergence_forward(model, np.zeros((8, 8, 3)))
        assert all(np.all(np.isfinite(p)) for p in preds.predictions)

    def test_too_small_input_rejected(self):
        model = M.build_divergence_network(tiny_cfg(), seed=7)
        with pytest.raises(ValueError, match="minimum"):
            M.divergence_forward(model, np.zeros((4, 4, 3)))

    @pytest.mark.parametrize("depth,width", [(1, 1), (1, 4), (2, 2), (3, 2)])
    def test_shape_law_sample(self, depth, width):
        cfg = tiny_cfg(depth=depth, width=width, channels=4, reduction=2)
        model = M.build_divergence_network(cfg, seed=0)
        out = model(torch.zeros(1, 3, 8, 8))
        assert out.shape == (1, width ** depth, 3, 16, 16)

    def test_deep_residual_switch_changes_outputs(self):
        img = np.random.default_rng(3).random((10, 10, 3))
        on = M.divergence_forward(
            M.build_divergence_network(tiny_cfg(deep_residual=True), seed=8), img)
        off = M.divergence_forward(
            M.build_divergence_network(tiny_cfg(deep_residual=False), seed=8), img)
        assert np.mean((on.predictions[0] - off.predictions[0]) ** 2) > 0


class TestConvergence:
    def test_head_channel_counts(self):
        model = M.build_convergence_network(tiny_cfg(), seed=0)
        first = model.head[0]
        last = model.head[-1]
        assert first.in_channels == 12  # 3 * P with P = 4
        assert last.out_channels == 4

    def test_single_prediction_weight_is_one(self):
        cfg = tiny_cfg(depth=1, width=1)
        div = M.build_divergence_network(cfg, seed=1)
        conv = M.build_convergence_network(cfg, seed=1)
        preds = M.divergence_forward(div, np.random.default_rng(4).random((8, 8, 3)))
        weights, sr = M.convergence_forward(conv, preds)
        np.testing.assert_array_equal(weights.planes[0], 1.0)
        np.testing.assert_allclose(sr, preds.predictions[0], atol=1e-7)

    def test_equal_logits_give_uniform_weights(self):
        cfg = tiny_cfg()
        model = M.build_convergence_network(cfg, seed=2)
        with torch.no_grad():
            model.head[-1].weight.zero_()
            model.head[-1].bias.zero_()
        weights, _ = model(torch.rand(1, 4, 3, 8, 8))
        np.testing.assert_allclose(weights.numpy(), 0.25, atol=1e-7)

    def test_identical_predictions_fuse_to_themselves(self):
        cfg = tiny_cfg()
        model = M.build_convergence_network(cfg, seed=3)
        x = torch.rand(1, 1, 3, 8, 8, dtype=torch.float64)
        preds = x.repeat(1, 4, 1, 1, 1)
        _, sr = model.double()(preds)
        np.testing.assert_allclose(sr.numpy(), x[:, 0].numpy(), atol=1e-12)

    def test_fusion_arithmetic(self):
        # values (0.2, 0.8) with weights (0.25, 0.75) -> 0.65
        preds = torch.tensor([0.2, 0.8], dtype=torch.float64).reshape(1, 2, 1, 1, 1)
        preds = preds.expand(1, 2, 3, 1, 1)
        weights = torch.tensor([0.25, 0.75], dtype=torch.float64).reshape(1, 2, 1, 1)
        fused = M.fuse_predictions(preds, weights)
        np.testing.assert_allclose(fused.numpy(), 0.65, atol=1e-15)

    def test_one_hot_weights_select_exactly(self):
        rng = np.random.default_rng(5)
        preds = torch.from_numpy(rng.random((1, 4, 3, 6, 6)))
        weights = torch.zeros(1, 4, 6, 6, dtype=torch.float64)
        weights[:, 2] = 1.0
        fused = M.fuse_predictions(preds, weights)
        np.testing.assert_array_equal(fused.numpy(), preds[:, 2].numpy())

    def test_weight_normalization_and_envelope(self):
        cfg = tiny_cfg()
        div = M.build_divergence_network(cfg, seed=4)
        conv = M.build_convergence_network(cfg, seed=4)
        preds = M.divergence_forward(div, np.random.default_rng(6).random((10, 10, 3)))
        weights, sr = M.convergence_forward(conv, preds)
        total = np.sum(weights.planes, axis=0)
        np.testing.assert_allclose(total, 1.0, atol=1e-6)
        assert all(p.min() >= 0 for p in weights.planes)
        stack = np.stack(preds.predictions)
        assert np.all(sr >= stack.min(axis=0) - 1e-6)
        assert np.all(sr <= stack.max(axis=0) + 1e-6)

    def test_wrong_prediction_count_rejected(self):
        cfg = tiny_cfg()
        conv = M.build_convergence_network(cfg, seed=5)
        div1 = M.build_divergence_network(tiny_cfg(depth=1, width=2), seed=5)
        preds = M.divergence_forward(div1, np.random.default_rng(7).random((8, 8, 3)))
        with pytest.raises(ValueError, match="fuses 4 predictions"):
            M.convergence_forward(conv, preds)


def conv_params(cin: int, cout: int, k: int) -> int:
    return cin * cout * k * k + cout


def divergence_tally(cfg: M.ModelConfig) -> int:
    """Layer-by-layer arithmetic audit of the divergence network size."""
    f, r = cfg.channels, cfg.reduction
    rcab = 2 * conv_params(f, f, 3) + conv_params(f, f // r, 1) + conv_params(f // r, f, 1)
    group = cfg.blocks_per_group * rcab + conv_params(f, f, 3)
    node = cfg.residual_groups * group
    n_nodes = sum(cfg.branching ** level for level in range(1, cfg.tree_depth + 1))
    stages = {2: 1, 3: 1, 4: 2, 8: 3}[cfg.scale]
    factor = 9 if cfg.scale == 3 else 4
    upscaler = stages * conv_params(f, factor * f, 3)
    leaf = conv_params(f, f, 3) + upscaler + conv_params(f, 3, 3)
    return conv_params(3, f, 3) + n_nodes * node + cfg.num_predictions * leaf


class TestParameterCount:
    def test_two_builds_agree(self):
        cfg = tiny_cfg()
        a = M.build_divergence_network(cfg, seed=0)
        b = M.build_divergence_network(cfg, seed=99)
        assert M.count_parameters(a) == M.count_parameters(b)

    def test_deeper_tree_is_strictly_larger(self):
        small = M.build_divergence_network(tiny_cfg(depth=1, width=2), seed=0)
        large = M.build_divergence_network(tiny_cfg(depth=2, width=2), seed=0)
        assert M.count_parameters(large) > M.count_parameters(small)

    def test_baseline_matches_hand_tally(self):
        cfg = M.ModelConfig(tree_depth=2, branching=2, residual_groups=2,
                            blocks_per_group=4, channels=64, scale=4, reduction=16)
        model = M.DivergenceModel(cfg)
        assert M.count_parameters(model) == divergence_tally(cfg) == 5354188

    @pytest.mark.parametrize("scale", [2, 3, 8])
    def test_tally_across_scales(self, scale):
        cfg = tiny_cfg(scale=scale)
        model = M.DivergenceModel(cfg)
        assert M.count_parameters(model) == divergence_tally(cfg)

    def test_convergence_head_tally(self):
        cfg = tiny_cfg()
        f, p = cfg.channels, cfg.num_predictions
        expected = (conv_params(3 * p, f, 3) + 2 * conv_params(f, f, 3)
                    + conv_params(f, p, 1))
        assert M.count_parameters(M.ConvergenceModel(cfg)) == expected
