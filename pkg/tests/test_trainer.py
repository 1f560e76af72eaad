import csv
import tempfile
import unittest
from pathlib import Path

import torch

from pdc_segmentation.data import Batch, generate_synthetic
from pdc_segmentation.errors import ConfigurationError
from pdc_segmentation.harness import split_for_fraction
from pdc_segmentation.model import Group, NetworkConfig, Phase, TrainConfig
from pdc_segmentation.optim import OptimizerState
from pdc_segmentation.trainer import LOG_HEADER, train_run, train_step
from pdc_segmentation.volnet import ParameterStore, build_network

TINY = NetworkConfig(encoder_channels=[2, 4], seed=1)


def _batches(seed: int, n_labeled: int = 1, n_unlabeled: int = 1) -> tuple[Batch, Batch]:
    generator = torch.Generator().manual_seed(seed)
    labeled = Batch(
        images=torch.randn(n_labeled, 1, 8, 8, 8, generator=generator),
        labels=torch.randint(0, 2, (n_labeled, 8, 8, 8), generator=generator),
    )
    unlabeled = Batch(images=torch.randn(n_unlabeled, 1, 8, 8, 8, generator=generator))
    return labeled, unlabeled


def _config(variant: str, **kwargs) -> TrainConfig:
    values = dict(variant=variant, total_iterations=50, batch_size=2, crop=(8, 8, 8), ramp_t_max=50)
    values.update(kwargs)
    return TrainConfig(**values)


def _run(params: ParameterStore, cfg: TrainConfig, iterations: int) -> ParameterStore:
    state = OptimizerState.initial(params)
    for t in range(iterations):
        labeled, unlabeled = _batches(t, cfg.labeled_per_batch, cfg.unlabeled_per_batch)
        params, state, _ = train_step(params, state, labeled, unlabeled, cfg, t)
    return params


def _assert_same(test: unittest.TestCase, expected: dict, actual: dict, names: list[str]) -> None:
    for name in names:
        test.assertTrue(torch.equal(expected[name], actual[name]), name)


class TestPhaseIsolation(unittest.TestCase):

    def test_pdc_phases_touch_only_their_groups(self):
        cfg = _config('pdc')
        params = build_network(TINY)
        state = OptimizerState.initial(params)
        extractor = [e.name for e in params.named_group(Group.EXTRACTOR)]
        heads = [e.name for e in params.entries() if e.group != Group.EXTRACTOR]
        seen = []
        last = {}

        def on_phase(phase: Phase, current: ParameterStore, current_state: OptimizerState) -> None:
            snapshot = {'params': current.snapshot(), 'momentum': current_state.snapshot()}
            if phase == Phase.DECOUPLING:
                _assert_same(self, last['params'], snapshot['params'], extractor)
                _assert_same(self, last['momentum'], snapshot['momentum'], extractor)
            if phase == Phase.CONSISTENCY:
                _assert_same(self, last['params'], snapshot['params'], heads)
                _assert_same(self, last['momentum'], snapshot['momentum'], heads)
            seen.append(phase)
            last.update(snapshot)

        for t in range(cfg.total_iterations):
            labeled, unlabeled = _batches(t)
            params, state, bundle = train_step(params, state, labeled, unlabeled, cfg, t, on_phase)
            self.assertGreaterEqual(bundle.decoupling, 0.0)

        self.assertEqual([Phase.SUPERVISED, Phase.DECOUPLING, Phase.CONSISTENCY] * cfg.total_iterations, seen)
        self.assertEqual(cfg.total_iterations, state.iteration)

    def test_decoupling_moves_heads_only(self):
        cfg = _config('pdc', phase_order=('decoupling', 'supervised', 'consistency'))
        params = build_network(TINY)
        before = params.snapshot()
        snapshots = {}

        def on_phase(phase: Phase, current: ParameterStore, _: OptimizerState) -> None:
            snapshots.setdefault(phase, current.snapshot())

        labeled, unlabeled = _batches(0)
        train_step(params, OptimizerState.initial(params), labeled, unlabeled, cfg, 49, on_phase)

        after = snapshots[Phase.DECOUPLING]
        _assert_same(self, before, after, [e.name for e in params.named_group(Group.EXTRACTOR)])
        self.assertFalse(all(torch.equal(before[e.name], after[e.name]) for e in params.named_group(Group.HEAD1)))

    def test_zero_decoupling_weight_reproduces_extractor_consistency(self):
        initial = build_network(TINY)
        pdc = _run(initial.clone(), _config('pdc', lambda_pd_scale=0.0), 5)
        ec = _run(initial.clone(), _config('vnet_ec'), 5)

        expected, actual = ec.snapshot(), pdc.snapshot()
        _assert_same(self, expected, actual, list(expected))

    def test_global_consistency_single_joint_phase(self):
        params = build_network(TINY)
        before = params.snapshot()
        seen = []
        labeled, unlabeled = _batches(0)

        train_step(params, OptimizerState.initial(params), labeled, unlabeled, _config('vnet_gc'), 10,
                   lambda phase, *_: seen.append(phase))

        self.assertEqual([Phase.JOINT], seen)
        for group in Group:
            self.assertFalse(all(torch.equal(before[e.name], e.tensor) for e in params.named_group(group)), group)


class TestTrainStep(unittest.TestCase):

    def test_deterministic(self):
        cfg = _config('pdc')
        first = _run(build_network(TINY), cfg, 3).snapshot()
        second = _run(build_network(TINY), cfg, 3).snapshot()

        _assert_same(self, first, second, list(first))

    def test_loss_bundle(self):
        params = build_network(TINY)
        labeled, unlabeled = _batches(0)

        cfg = _config('pdc', ramp_t_max=49)
        _, _, bundle = train_step(params, OptimizerState.initial(params), labeled, unlabeled, cfg, 49)

        self.assertEqual(0.1, bundle.lambda_c)
        self.assertEqual(0.1, bundle.lambda_pd)
        self.assertGreater(bundle.supervised, 0.0)
        self.assertLessEqual(bundle.decoupling, 1.0 + 1e-5)

    def test_supervised_only(self):
        cfg = _config('supervised_only')
        self.assertEqual(2, cfg.labeled_per_batch)

        params = build_network(TINY)
        labeled, unlabeled = _batches(0, 2, 0)
        _, _, bundle = train_step(params, OptimizerState.initial(params), labeled, unlabeled, cfg, 0)

        self.assertGreaterEqual(bundle.consistency, 0.0)

    def test_variant_batch_mismatch(self):
        params = build_network(TINY)
        state = OptimizerState.initial(params)

        labeled, unlabeled = _batches(0, 2, 1)
        with self.assertRaises(ConfigurationError):
            train_step(params, state, labeled, unlabeled, _config('supervised_only'), 0)

        labeled, unlabeled = _batches(0, 1, 0)
        with self.assertRaises(ConfigurationError):
            train_step(params, state, labeled, unlabeled, _config('pdc'), 0)

    def test_iteration_out_of_range(self):
        params = build_network(TINY)
        labeled, unlabeled = _batches(0)

        with self.assertRaises(ConfigurationError):
            train_step(params, OptimizerState.initial(params), labeled, unlabeled, _config('pdc'), 50)


class TestTrainRun(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.manifest = generate_synthetic(5, 16, 0, self.dir / 'data', labeled_fraction=0.5)
        self.cfg = _config('pdc', total_iterations=3, checkpoint_every=2, log_every=2)

    def tearDown(self):
        self.tmp.cleanup()

    def test_outputs(self):
        result = train_run(self.cfg, TINY, self.manifest, self.dir / 'data', self.dir / 'run', progress=False)

        self.assertEqual(self.dir / 'run' / 'ckpt_3.bin', result.checkpoint)
        self.assertTrue((self.dir / 'run' / 'ckpt_2.bin').exists())
        self.assertTrue(result.checkpoint.exists())
        self.assertEqual([0, 2], [r.iter for r in result.log])

        with open(result.log_path, newline='', encoding='utf-8') as file:
            rows = list(csv.reader(file))
        self.assertEqual(LOG_HEADER, rows[0])
        self.assertEqual(3, len(rows))

    def test_identical_runs_identical_checkpoints(self):
        first = train_run(self.cfg, TINY, self.manifest, self.dir / 'data', self.dir / 'a', progress=False)
        second = train_run(self.cfg, TINY, self.manifest, self.dir / 'data', self.dir / 'b', progress=False)

        self.assertEqual(first.checkpoint.read_bytes(), second.checkpoint.read_bytes())
        self.assertEqual(first.log_path.read_bytes(), second.log_path.read_bytes())


class TestTrainRunSmoke(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.dir = Path(cls.tmp.name)
        cls.manifest = generate_synthetic(12, 16, 0, cls.dir / 'data')
        cls.network = NetworkConfig(encoder_channels=[4, 8], seed=0)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_supervised_loss_falls_on_labeled_set(self):
        manifest = split_for_fraction(self.manifest, 1.0, 0)
        cfg = TrainConfig(
            variant='supervised_only', total_iterations=200, batch_size=2, crop=(16, 16, 16), log_every=20
        )

        result = train_run(cfg, self.network, manifest, self.dir / 'data', self.dir / 'supervised', progress=False)

        initial = result.log[0].loss_s
        self.assertLess(min(r.loss_s for r in result.log[1:]), initial)
        self.assertLess(result.log[-1].loss_s, initial)

    def test_head_coupling_falls_in_pdc_run(self):
        cfg = TrainConfig(variant='pdc', total_iterations=500, batch_size=4, crop=(16, 16, 16), log_every=50)

        result = train_run(cfg, self.network, self.manifest, self.dir / 'data', self.dir / 'pdc', progress=False)

        self.assertEqual(499, result.log[-1].iter)
        self.assertLess(result.log[-1].qcd, result.log[0].qcd)


if __name__ == '__main__':
    unittest.main()
