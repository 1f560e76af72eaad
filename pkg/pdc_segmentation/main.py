import argparse
import logging
import sys
from functools import lru_cache
from pathlib import Path
from typing import Any, Optional, Sequence

import colorlog
import torch
from pydantic import ValidationError

from pdc_segmentation.checkpoint import load_checkpoint
from pdc_segmentation.config import Settings, load_config_file, merge_config, preset
from pdc_segmentation.data import generate_synthetic, load_manifest, load_sample, normalize
from pdc_segmentation.errors import ConfigurationError, PdcError
from pdc_segmentation.harness import compare_report, run_experiment, split_for_fraction
from pdc_segmentation.metrics import evaluate, save_report
from pdc_segmentation.model import EvalConfig, ExperimentSpec, NetworkConfig, SplitName, TrainConfig, Variant, \
    parse_variant
from pdc_segmentation.trainer import train_run

logger: logging.Logger = logging.getLogger(__name__)

LOG_FORMAT = '%(log_color)s%(asctime)s [%(levelname)s] %(reset)s%(purple)s[%(name)s] %(reset)s%(blue)s%(message)s'

DATA_DEFAULTS = {'n_volumes': 60, 'shape': [48, 48, 48], 'seed': 0}


class CliParser(argparse.ArgumentParser):
    """Usage errors surface as ConfigurationError, exit code 1."""

    def error(self, message: str):
        raise ConfigurationError(f'{self.prog}: {message}')


@lru_cache
def _get_settings() -> Settings:
    return Settings()


def setup_logging(level: str) -> None:
    handler = colorlog.StreamHandler()
    handler.setFormatter(colorlog.ColoredFormatter(LOG_FORMAT))
    logging.basicConfig(level=level.upper(), handlers=[handler], force=True)


def setup_torch(settings: Settings) -> None:
    torch.set_num_threads(settings.num_threads)
    if settings.deterministic:
        torch.use_deterministic_algorithms(True)


def _triple(text: str) -> tuple[float, ...]:
    values = tuple(float(v) for v in text.split(','))
    if len(values) == 1:
        values = values * 3
    if len(values) != 3:
        raise argparse.ArgumentTypeError(f'expected one or three comma separated values, got {text!r}')
    return values


def _int_triple(text: str) -> list[int]:
    return [int(v) for v in _triple(text)]


def _csv_list(cast):
    def parse(text: str) -> list:
        return [cast(v) for v in text.split(',') if v]
    return parse


def _layers(args: argparse.Namespace) -> dict[str, Any]:
    """Preset, then config file: the two lowest configuration layers."""
    return merge_config(preset(args.preset) if args.preset else None, load_config_file(args.config))


def generate_data(args: argparse.Namespace) -> None:
    values = merge_config(DATA_DEFAULTS, load_config_file(args.config).get('data'), {
        'n_volumes': args.n_volumes,
        'shape': args.shape,
        'seed': args.seed,
        'noise_sigma': args.noise_sigma,
        'labeled_fraction': args.labeled_fraction,
        'test_fraction': args.test_fraction,
    })
    generate_synthetic(out_dir=args.out, **values)


def train(args: argparse.Namespace) -> None:
    layers = _layers(args)
    train_values = merge_config(layers.get('train'), {
        'variant': args.variant,
        'total_iterations': args.iterations,
        'seed': args.seed,
        'batch_size': args.batch_size,
        'labeled_per_batch': args.labeled_per_batch,
        'base_lr': args.lr,
    })
    train_cfg = TrainConfig(**train_values)
    network_cfg = NetworkConfig(**layers.get('network', {}))

    manifest = load_manifest(args.manifest)
    if args.fraction is not None:
        manifest = split_for_fraction(manifest, args.fraction, train_cfg.seed)

    result = train_run(train_cfg, network_cfg, manifest, Path(args.manifest).parent, args.out)
    logger.info('final checkpoint: %s', result.checkpoint)


def evaluate_checkpoint(args: argparse.Namespace) -> None:
    layers = _layers(args)
    eval_cfg = EvalConfig(**merge_config(layers.get('evaluation'), {
        'window': args.window,
        'stride': args.stride,
        'spacing': args.spacing,
        'percentile': args.percentile,
    }))

    checkpoint = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    root = Path(args.manifest).parent
    samples = [normalize(load_sample(manifest, root, i)) for i in manifest.split(SplitName.TEST)]

    report = evaluate(checkpoint.params, samples, eval_cfg.window, eval_cfg.stride, eval_cfg.spacing,
                      eval_cfg.percentile)
    save_report(report.model_copy(update={'checkpoint': str(args.checkpoint)}), args.out)


def ablate(args: argparse.Namespace) -> None:
    layers = _layers(args)
    values = merge_config({'output_dir': _get_settings().output_dir}, layers, {
        'name': args.name,
        'manifest': args.manifest,
        'variants': args.variants,
        'fractions': args.fractions,
        'seeds': args.seeds,
        'output_dir': args.output_dir,
        'upper_bound': args.upper_bound,
    })
    # presets and config files use 'train' for the shared training overrides
    base = values.pop('train', None)
    if base is not None:
        values['base'] = merge_config(base, values.get('base'))

    outputs = run_experiment(ExperimentSpec(**values))
    logger.info('results: %s, table: %s', outputs.results_csv, outputs.table)


def report(args: argparse.Namespace) -> None:
    deltas = compare_report(args.results, args.out, parse_variant(args.target), parse_variant(args.baseline))
    for row in deltas:
        logger.info(
            'fraction %g: dice delta mean %+.4f (min %+.4f, max %+.4f, %d seeds)', row.fraction,
            row.dice_delta_mean, row.dice_delta_min, row.dice_delta_max, row.n_seeds
        )


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog='pdc', description='Dual-head semi-supervised 3D segmentation')
    parser.add_argument('--log-level', default=None, help='overrides PDC_LOG_LEVEL')
    subparsers = parser.add_subparsers(dest='command', required=True)
    variants = ', '.join(v.value for v in Variant)

    def configurable(sub: argparse.ArgumentParser) -> None:
        sub.add_argument('--config', type=Path, default=None, help='JSON config file, flags override its values')
        sub.add_argument('--preset', default=None, help='desk or full')

    sub = subparsers.add_parser('generate-data', help='write a synthetic volume dataset and its manifest')
    sub.add_argument('--out', type=Path, required=True)
    sub.add_argument('--n', '--n-volumes', dest='n_volumes', type=int, default=None)
    sub.add_argument('--shape', type=_int_triple, default=None)
    sub.add_argument('--seed', type=int, default=None)
    sub.add_argument('--noise-sigma', type=float, default=None)
    sub.add_argument('--labeled-fraction', type=float, default=None)
    sub.add_argument('--test-fraction', type=float, default=None)
    sub.add_argument('--config', type=Path, default=None, help='JSON config file, reads its "data" section')
    sub.set_defaults(handler=generate_data)

    sub = subparsers.add_parser('train', help='train one variant and write checkpoints and a training log')
    configurable(sub)
    sub.add_argument('--manifest', type=Path, required=True)
    sub.add_argument('--out', type=Path, required=True)
    sub.add_argument('--variant', default=None, help=variants)
    sub.add_argument('--iterations', type=int, default=None)
    sub.add_argument('--seed', type=int, default=None)
    sub.add_argument('--batch-size', type=int, default=None)
    sub.add_argument('--labeled-per-batch', type=int, default=None)
    sub.add_argument('--lr', type=float, default=None)
    sub.add_argument('--fraction', type=float, default=None, help='re-split the training pool to this labeled fraction')
    sub.set_defaults(handler=train)

    sub = subparsers.add_parser('evaluate', help='evaluate a checkpoint on the test split')
    configurable(sub)
    sub.add_argument('--manifest', type=Path, required=True)
    sub.add_argument('--checkpoint', type=Path, required=True)
    sub.add_argument('--out', type=Path, required=True, help='metrics report JSON path')
    sub.add_argument('--window', type=_int_triple, default=None)
    sub.add_argument('--stride', type=_int_triple, default=None)
    sub.add_argument('--spacing', type=_triple, default=None)
    sub.add_argument('--percentile', default=None, help='linear or nearest_rank')
    sub.set_defaults(handler=evaluate_checkpoint)

    sub = subparsers.add_parser('ablate', help='run the variant x fraction x seed experiment grid')
    configurable(sub)
    sub.add_argument('--name', default=None)
    sub.add_argument('--manifest', type=Path, default=None)
    sub.add_argument('--variants', type=_csv_list(str), default=None, help=variants)
    sub.add_argument('--fractions', type=_csv_list(float), default=None)
    sub.add_argument('--seeds', type=_csv_list(int), default=None)
    sub.add_argument('--output-dir', type=Path, default=None)
    sub.add_argument('--upper-bound', action='store_true', default=None)
    sub.set_defaults(handler=ablate)

    sub = subparsers.add_parser('report', help='dice deltas between two variants per labeled fraction')
    sub.add_argument('results', type=Path, nargs='+', help='results CSV files')
    sub.add_argument('--out', type=Path, required=True)
    sub.add_argument('--target', default=Variant.PDC.value)
    sub.add_argument('--baseline', default=Variant.VNET_GC.value)
    sub.set_defaults(handler=report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    settings = _get_settings()
    try:
        args = build_parser().parse_args(argv)
    except ConfigurationError as e:
        setup_logging(settings.log_level)
        logger.error('%s: %s', type(e).__name__, e)
        return e.exit_code

    setup_logging(args.log_level or settings.log_level)
    setup_torch(settings)

    try:
        args.handler(args)
    except PdcError as e:
        logger.error('%s: %s', type(e).__name__, e)
        return e.exit_code
    except ValidationError as e:
        logger.error('invalid configuration: %s', e)
        return 1
    except Exception:
        logger.exception('unexpected failure')
        return 3

    return 0


if __name__ == '__main__':
    sys.exit(main())
