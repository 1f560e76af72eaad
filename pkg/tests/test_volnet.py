import unittest
from unittest.mock import patch

import numpy as np
import torch

from pdc_segmentation import volnet
from pdc_segmentation.errors import ShapeError
from pdc_segmentation.model import Group, NetworkConfig, NormType
from pdc_segmentation.volnet import build_network, forward, infer_mask, sliding_window_positions

TINY = NetworkConfig(encoder_channels=[2, 4], seed=7)


class TestBuildNetwork(unittest.TestCase):

    def test_same_seed_same_parameters(self):
        first = build_network(TINY).snapshot()
        second = build_network(TINY).snapshot()

        self.assertEqual(first.keys(), second.keys())
        for name in first:
            self.assertTrue(torch.equal(first[name], second[name]), name)

    def test_different_seed_different_parameters(self):
        first = build_network(TINY)
        second = build_network(TINY.model_copy(update={'seed': 8}))

        self.assertFalse(torch.equal(first.group(Group.EXTRACTOR)[0], second.group(Group.EXTRACTOR)[0]))

    def test_heads_start_apart(self):
        head1, head2 = build_network(TINY).head_pairs()

        self.assertEqual([t.shape for t in head1], [t.shape for t in head2])
        self.assertTrue(any(not torch.equal(a, b) for a, b in zip(head1, head2)))

    def test_groups_partition_parameters(self):
        params = build_network(TINY)

        self.assertEqual(params.count(), sum(params.count(g) for g in Group))
        self.assertEqual(params.count(Group.HEAD1), params.count(Group.HEAD2))
        for entry in params.entries():
            self.assertTrue(entry.name.startswith(f'{entry.group.value}.'))

    def test_clone_is_independent(self):
        params = build_network(TINY)
        copy = params.clone()
        with torch.no_grad():
            copy.group(Group.HEAD1)[0].add_(1.0)

        self.assertFalse(torch.equal(params.group(Group.HEAD1)[0], copy.group(Group.HEAD1)[0]))


class TestForward(unittest.TestCase):

    def setUp(self):
        torch.manual_seed(0)
        self.params = build_network(TINY)

    def test_shapes_and_probabilities(self):
        pred = forward(self.params, torch.randn(2, 1, 8, 8, 8))

        self.assertEqual((2, 2, 8, 8, 8), tuple(pred.logits1.shape))
        self.assertEqual((2, 2, 8, 8, 8), tuple(pred.probs2.shape))
        self.assertEqual(1, pred.class_dim)
        torch.testing.assert_close(pred.probs1.sum(dim=1), torch.ones(2, 8, 8, 8))
        torch.testing.assert_close(pred.probs2.sum(dim=1), torch.ones(2, 8, 8, 8))

    def test_unbatched_input(self):
        pred = forward(self.params, np.zeros((1, 8, 8, 8), dtype=np.float32))

        self.assertEqual((2, 8, 8, 8), tuple(pred.logits1.shape))
        self.assertEqual(0, pred.class_dim)

    def test_indivisible_spatial_size(self):
        with self.assertRaises(ShapeError) as context:
            forward(self.params, torch.zeros(1, 1, 7, 8, 8))

        self.assertEqual(2, context.exception.divisor)

    def test_wrong_channel_count(self):
        with self.assertRaises(ShapeError):
            forward(self.params, torch.zeros(1, 3, 8, 8, 8))

    def test_identical_heads_give_identical_predictions(self):
        with torch.no_grad():
            for p1, p2 in zip(*self.params.head_pairs()):
                p2.copy_(p1)

        pred = forward(self.params, torch.randn(2, 1, 8, 8, 8))

        self.assertTrue(torch.equal(pred.logits1, pred.logits2))

    def test_instance_norm(self):
        params = build_network(TINY.model_copy(update={'norm': NormType.INSTANCE}))
        pred = forward(params, torch.randn(1, 1, 8, 8, 8))

        self.assertEqual((1, 2, 8, 8, 8), tuple(pred.logits2.shape))

    def test_gradients_match_central_differences(self):
        params = self.params.to(torch.float64).eval()
        x = torch.randn(1, 1, 8, 8, 8, dtype=torch.float64)
        weights = torch.randn(1, 2, 8, 8, 8, dtype=torch.float64)

        def objective() -> torch.Tensor:
            pred = forward(params, x)
            return (pred.probs1 * weights).sum() + (pred.probs2 * weights).square().sum()

        targets = [params.named_group(Group.EXTRACTOR)[0], params.named_group(Group.HEAD2)[0]]
        analytic = torch.autograd.grad(objective(), [e.tensor for e in targets])

        eps = 1e-6
        generator = np.random.default_rng(0)
        for entry, grad in zip(targets, analytic):
            flat = entry.tensor.data.view(-1)
            for i in generator.choice(flat.numel(), size=5, replace=False):
                original = flat[i].item()
                with torch.no_grad():
                    flat[i] = original + eps
                    plus = objective().item()
                    flat[i] = original - eps
                    minus = objective().item()
                    flat[i] = original
                numeric = (plus - minus) / (2 * eps)
                self.assertAlmostEqual(numeric, grad.view(-1)[i].item(), delta=1e-4 * max(1.0, abs(numeric)))


class TestSlidingWindow(unittest.TestCase):

    def test_positions_tile_exactly(self):
        self.assertEqual(8, len(sliding_window_positions((16, 16, 16), (8, 8, 8), (8, 8, 8))))

    def test_last_window_snaps_to_edge(self):
        positions = sliding_window_positions((16, 8, 8), (8, 8, 8), (6, 8, 8))

        self.assertEqual([(0, 0, 0), (6, 0, 0), (8, 0, 0)], positions)

    def test_infer_mask_runs_one_forward_per_window(self):
        params = build_network(TINY)
        volume = np.random.default_rng(0).normal(size=(16, 16, 16)).astype(np.float32)

        with patch('pdc_segmentation.volnet.forward', wraps=volnet.forward) as spy:
            mask = infer_mask(params, volume, (8, 8, 8), (8, 8, 8))

        self.assertEqual(8, spy.call_count)
        self.assertEqual((16, 16, 16), mask.shape)
        self.assertEqual(np.uint8, mask.dtype)
        self.assertTrue(set(np.unique(mask)) <= {0, 1})

    def test_identical_heads_match_single_head_inference(self):
        params = build_network(TINY)
        with torch.no_grad():
            for p1, p2 in zip(*params.head_pairs()):
                p2.copy_(p1)
        volume = np.random.default_rng(1).normal(size=(12, 16, 16)).astype(np.float32)

        def head1_only(*args):
            pred = forward(*args)
            return pred.model_copy(update={'probs2': pred.probs1})

        fused = infer_mask(params, volume, (8, 8, 8), (4, 4, 4))
        with patch('pdc_segmentation.volnet.forward', side_effect=head1_only):
            single = infer_mask(params, volume, (8, 8, 8), (4, 4, 4))

        np.testing.assert_array_equal(single, fused)

    def test_infer_mask_pads_small_volumes(self):
        params = build_network(TINY)
        mask = infer_mask(params, np.zeros((6, 8, 8), dtype=np.float32), (8, 8, 8), (4, 4, 4))

        self.assertEqual((6, 8, 8), mask.shape)

    def test_infer_mask_restores_mode(self):
        params = build_network(TINY).train()
        infer_mask(params, np.zeros((8, 8, 8), dtype=np.float32), (8, 8, 8), (8, 8, 8))

        self.assertTrue(params.training)

    def test_infer_mask_rejects_indivisible_window(self):
        with self.assertRaises(ShapeError):
            infer_mask(build_network(TINY), np.zeros((8, 8, 8), dtype=np.float32), (7, 8, 8), (4, 4, 4))


if __name__ == '__main__':
    unittest.main()
