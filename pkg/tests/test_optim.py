import unittest

import torch

from pdc_segmentation.errors import AlignmentError, ConfigurationError
from pdc_segmentation.model import ALL_GROUPS, Group, NetworkConfig, TrainConfig
from pdc_segmentation.optim import OptimizerState, gradients, learning_rate, sgd_update
from pdc_segmentation.volnet import build_network, forward


class TestLearningRate(unittest.TestCase):

    def test_step_schedule(self):
        cfg = TrainConfig()

        self.assertEqual(0.01, learning_rate(0, cfg))
        self.assertEqual(0.01, learning_rate(2499, cfg))
        self.assertEqual(0.001, learning_rate(2500, cfg))
        self.assertEqual(0.0001, learning_rate(5999, cfg))
        self.assertEqual(0.0001, learning_rate(5000, cfg))


class TestSgdUpdate(unittest.TestCase):

    def setUp(self):
        self.params = build_network(NetworkConfig(encoder_channels=[2, 4]))
        self.state = OptimizerState.initial(self.params)
        self.ones = {e.name: torch.ones_like(e.tensor) for e in self.params.entries()}

    def test_momentum_steps(self):
        before = self.params.snapshot()

        sgd_update(self.params, self.ones, self.state, 0.1, ALL_GROUPS, momentum=0.9)
        sgd_update(self.params, self.ones, self.state, 0.1, ALL_GROUPS, momentum=0.9)

        # buffers: 1 then 1.9, total step 0.1 * 2.9
        for entry in self.params.entries():
            torch.testing.assert_close(entry.tensor, before[entry.name] - 0.29)
            torch.testing.assert_close(self.state.momentum_buffers[entry.name], torch.full_like(entry.tensor, 1.9))
        self.assertEqual(0.1, self.state.lr)

    def test_weight_decay(self):
        entry = self.params.entries()[0]
        before = entry.tensor.detach().clone()

        sgd_update(self.params, self.ones, self.state, 0.1, ALL_GROUPS, momentum=0.9, weight_decay=0.5)

        torch.testing.assert_close(entry.tensor, before - 0.1 * (1 + 0.5 * before))

    def test_only_selected_groups_move(self):
        before = self.params.snapshot()

        sgd_update(self.params, self.ones, self.state, 0.1, {Group.HEAD1})

        for entry in self.params.entries():
            moved = not torch.equal(entry.tensor, before[entry.name])
            self.assertEqual(entry.group == Group.HEAD1, moved, entry.name)
            if entry.group != Group.HEAD1:
                self.assertEqual(0, self.state.momentum_buffers[entry.name].abs().sum().item())

    def test_alignment_errors(self):
        with self.assertRaises(AlignmentError):
            sgd_update(self.params, {**self.ones, 'extractor.bogus': torch.ones(1)}, self.state, 0.1, ALL_GROUPS)

        name = self.params.entries()[0].name
        with self.assertRaises(AlignmentError):
            sgd_update(self.params, {k: v for k, v in self.ones.items() if k != name}, self.state, 0.1, ALL_GROUPS)
        with self.assertRaises(AlignmentError):
            sgd_update(self.params, {**self.ones, name: torch.ones(1)}, self.state, 0.1, ALL_GROUPS)

    def test_requires_a_group(self):
        with self.assertRaises(ConfigurationError):
            sgd_update(self.params, self.ones, self.state, 0.1, set())


class TestGradients(unittest.TestCase):

    def test_restricted_to_groups(self):
        params = build_network(NetworkConfig(encoder_channels=[2, 4]))
        loss = forward(params, torch.randn(1, 1, 8, 8, 8)).probs1.square().sum()

        grads = gradients(loss, params, {Group.HEAD1, Group.HEAD2})

        self.assertEqual({e.name for e in params.entries() if e.group != Group.EXTRACTOR}, set(grads))
        # head2 does not take part in the loss
        for entry in params.named_group(Group.HEAD2):
            self.assertEqual(0, grads[entry.name].abs().sum().item())


if __name__ == '__main__':
    unittest.main()
