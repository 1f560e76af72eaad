import csv
import logging
from pathlib import Path
from typing import Any, Callable, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError
from tqdm import tqdm

from pdc_segmentation.config import config_hash, merge_config
from pdc_segmentation.data import load_manifest, load_sample, normalize
from pdc_segmentation.errors import ConfigurationError, ReportError
from pdc_segmentation.metrics import evaluate, save_report
from pdc_segmentation.model import DUAL_HEAD_VARIANTS, DatasetManifest, DeltaRow, ExperimentSpec, ResultRow, \
    SplitName, TrainConfig, Variant, VolumeSample
from pdc_segmentation.template import TemplateManager
from pdc_segmentation.trainer import train_run

logger = logging.getLogger(__name__)

RESULTS_HEADER = [
    'variant', 'fraction', 'n_labeled', 'n_unlabeled', 'dice', 'jaccard', 'asd', 'hd95', 'cd', 'qcd', 'seed',
    'config_hash', 'checkpoint'
]
DELTAS_HEADER = ['fraction', 'n_seeds', 'dice_delta_mean', 'dice_delta_min', 'dice_delta_max']

RESULTS_CSV = 'results.csv'
RESULTS_TABLE = 'results.txt'
DELTAS_CSV = 'deltas.csv'
DELTAS_TABLE = 'deltas.txt'


class ExperimentCell(NamedTuple):
    variant: Variant
    fraction: float
    seed: int

    @property
    def name(self) -> str:
        return f'{self.variant.value}_f{self.fraction:g}_s{self.seed}'


class SummaryRow(BaseModel):
    variant: Variant
    fraction: float
    n_labeled: int
    n_unlabeled: int
    n_seeds: int
    dice: float
    jaccard: float
    asd: Optional[float] = None
    hd95: Optional[float] = None
    cd: Optional[float] = None
    qcd: Optional[float] = None


class ExperimentOutputs(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    rows: list[ResultRow]
    results_csv: Path
    table: Path


def split_for_fraction(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Re-split the training pool so that `fraction` of it is labeled.

    Pure in (manifest, fraction, seed). For a fixed seed the labeled sets are nested across fractions.
    """
    if not 0 < fraction <= 1:
        raise ConfigurationError(f'fraction must be in (0, 1], got {fraction}')

    pool = manifest.split(SplitName.TRAIN_LABELED) + manifest.split(SplitName.TRAIN_UNLABELED)
    if not pool:
        raise ConfigurationError('manifest has no training samples')

    n_labeled = min(len(pool), max(1, round(len(pool) * fraction)))
    chosen = set(np.random.default_rng(seed).permutation(len(pool))[:n_labeled].tolist())

    return manifest.model_copy(update={'splits': {
        SplitName.TRAIN_LABELED: [sample_id for i, sample_id in enumerate(pool) if i in chosen],
        SplitName.TRAIN_UNLABELED: [sample_id for i, sample_id in enumerate(pool) if i not in chosen],
        SplitName.TEST: manifest.split(SplitName.TEST),
    }})


def experiment_cells(spec: ExperimentSpec) -> list[ExperimentCell]:
    cells = [
        ExperimentCell(variant, fraction, seed)
        for fraction in spec.fractions
        for variant in spec.variants
        for seed in spec.seeds
    ]

    if spec.upper_bound and Variant.SUPERVISED_ONLY in spec.variants and 1.0 not in spec.fractions:
        cells.extend(ExperimentCell(Variant.SUPERVISED_ONLY, 1.0, seed) for seed in spec.seeds)

    return cells


def train_config_for(spec: ExperimentSpec, cell: ExperimentCell) -> TrainConfig:
    values = merge_config(spec.base, spec.overrides.get(cell.variant), {
        'variant': cell.variant.value,
        'seed': cell.seed,
    })
    try:
        return TrainConfig(**values)
    except ValidationError as e:
        raise ConfigurationError(f'invalid train config for {cell.name}: {e}')


class ExperimentRunner:
    """Runs every (variant, fraction, seed) cell of an experiment: split, train, evaluate, one row per cell."""

    def __init__(
        self,
        spec: ExperimentSpec,
        train: Callable[..., Any] = train_run,
        evaluate_fn: Callable[..., Any] = evaluate,
        template_manager: Optional[TemplateManager] = None
    ):
        self.spec = spec
        self.train = train
        self.evaluate = evaluate_fn
        self.template_manager = template_manager or TemplateManager()
        self.output_dir = Path(spec.output_dir) / spec.name
        self.data_root = Path(spec.manifest).parent

    def run(self, progress: bool = True) -> ExperimentOutputs:
        manifest = load_manifest(self.spec.manifest)
        test_samples = self._test_samples(manifest)
        cells = experiment_cells(self.spec)

        logger.info(
            'experiment %s: %d cells (%d variants x %d fractions x %d seeds)', self.spec.name, len(cells),
            len(self.spec.variants), len(self.spec.fractions), len(self.spec.seeds)
        )

        rows = [
            self.run_cell(cell, manifest, test_samples)
            for cell in tqdm(cells, desc=self.spec.name, disable=not progress)
        ]

        self.output_dir.mkdir(parents=True, exist_ok=True)
        results_csv = write_results(rows, self.output_dir / RESULTS_CSV)
        table = self.output_dir / RESULTS_TABLE
        table.write_text(
            self.template_manager.render_table('results_table', title=self.spec.name, rows=summarize(rows)),
            encoding='utf-8'
        )
        logger.info('wrote %s and %s', results_csv, table)

        return ExperimentOutputs(rows=rows, results_csv=results_csv, table=table)

    def run_cell(self, cell: ExperimentCell, manifest: DatasetManifest, test_samples: list[VolumeSample]) -> ResultRow:
        train_cfg = train_config_for(self.spec, cell)
        network_cfg = self.spec.network.model_copy(update={'seed': cell.seed})
        split = split_for_fraction(manifest, cell.fraction, cell.seed)
        cell_dir = self.output_dir / cell.name
        digest = config_hash(network_cfg, train_cfg, cell.fraction)

        logger.info('cell %s (config %s)', cell.name, digest)
        result = self.train(train_cfg, network_cfg, split, self.data_root, cell_dir, progress=False)

        evaluation = self.spec.evaluation
        report = self.evaluate(
            result.params, test_samples, evaluation.window, evaluation.stride, evaluation.spacing,
            evaluation.percentile
        )
        report = report.model_copy(update={'config_hash': digest, 'checkpoint': str(result.checkpoint)})
        save_report(report, cell_dir / 'metrics.json')

        dual_head = cell.variant in DUAL_HEAD_VARIANTS
        n_unlabeled = len(split.split(SplitName.TRAIN_UNLABELED)) if dual_head else 0

        return ResultRow(
            variant=cell.variant,
            fraction=cell.fraction,
            n_labeled=len(split.split(SplitName.TRAIN_LABELED)),
            n_unlabeled=n_unlabeled,
            dice=report.dice,
            jaccard=report.jaccard,
            asd=report.asd,
            hd95=report.hd95,
            # a single-branch baseline has no meaningful head coupling
            cd=report.cd if dual_head else None,
            qcd=report.qcd if dual_head else None,
            seed=cell.seed,
            config_hash=digest,
            checkpoint=str(result.checkpoint),
        )

    def _test_samples(self, manifest: DatasetManifest) -> list[VolumeSample]:
        return [normalize(load_sample(manifest, self.data_root, i)) for i in manifest.split(SplitName.TEST)]


def run_experiment(spec: ExperimentSpec, progress: bool = True) -> ExperimentOutputs:
    return ExperimentRunner(spec).run(progress)


def _cell(value: Any) -> str:
    if value is None:
        return ''
    if isinstance(value, Variant):
        return value.value
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _optional_float(text: str) -> Optional[float]:
    return float(text) if text != '' else None


def write_results(rows: Sequence[ResultRow], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as file:
        writer = csv.writer(file)
        writer.writerow(RESULTS_HEADER)
        for row in rows:
            writer.writerow([_cell(getattr(row, column)) for column in RESULTS_HEADER])
    return path


def read_results(path: Path) -> list[ResultRow]:
    path = Path(path)
    try:
        with open(path, newline='', encoding='utf-8') as file:
            reader = csv.DictReader(file)
            if reader.fieldnames != RESULTS_HEADER:
                raise ReportError(f'{path} does not have the results header', missing=[str(path)])
            records = list(reader)
    except FileNotFoundError:
        raise ReportError(f'results file not found: {path}', missing=[str(path)])

    return [
        ResultRow(
            variant=Variant(r['variant']),
            fraction=float(r['fraction']),
            n_labeled=int(r['n_labeled']),
            n_unlabeled=int(r['n_unlabeled']),
            dice=float(r['dice']),
            jaccard=float(r['jaccard']),
            asd=_optional_float(r['asd']),
            hd95=_optional_float(r['hd95']),
            cd=_optional_float(r['cd']),
            qcd=_optional_float(r['qcd']),
            seed=int(r['seed']),
            config_hash=r['config_hash'],
            checkpoint=r['checkpoint'],
        )
        for r in records
    ]


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def summarize(rows: Sequence[ResultRow]) -> list[SummaryRow]:
    """Seed means per (variant, fraction), in first-seen order."""
    groups: dict[tuple[Variant, float], list[ResultRow]] = {}
    for row in rows:
        groups.setdefault((row.variant, row.fraction), []).append(row)

    return [
        SummaryRow(
            variant=variant,
            fraction=fraction,
            n_labeled=group[0].n_labeled,
            n_unlabeled=group[0].n_unlabeled,
            n_seeds=len(group),
            dice=float(np.mean([r.dice for r in group])),
            jaccard=float(np.mean([r.jaccard for r in group])),
            asd=_mean([r.asd for r in group]),
            hd95=_mean([r.hd95 for r in group]),
            cd=_mean([r.cd for r in group]),
            qcd=_mean([r.qcd for r in group]),
        )
        for (variant, fraction), group in groups.items()
    ]


def compare_report(
    csv_paths: Sequence[Path],
    output_dir: Optional[Path] = None,
    target: Variant = Variant.PDC,
    baseline: Variant = Variant.VNET_GC,
    template_manager: Optional[TemplateManager] = None
) -> list[DeltaRow]:
    """Dice of `target` minus `baseline` per labeled fraction, over the seeds both variants ran."""
    dice: dict[tuple[Variant, float, int], float] = {}
    for path in csv_paths:
        for row in read_results(path):
            dice[(row.variant, row.fraction, row.seed)] = row.dice

    fractions = sorted({f for v, f, _ in dice if v in (target, baseline)})
    if not fractions:
        raise ReportError(
            f'no {target.value} or {baseline.value} rows found',
            missing=[target.value, baseline.value]
        )

    missing = []
    deltas = []
    for fraction in fractions:
        seeds = {
            variant: {s for v, f, s in dice if v == variant and f == fraction}
            for variant in (target, baseline)
        }
        all_seeds = seeds[target] | seeds[baseline]
        for variant in (target, baseline):
            missing.extend(
                f'{variant.value}@fraction={fraction:g},seed={s}' for s in sorted(all_seeds - seeds[variant])
            )

        common = sorted(seeds[target] & seeds[baseline])
        if common:
            values = [dice[(target, fraction, s)] - dice[(baseline, fraction, s)] for s in common]
            deltas.append(DeltaRow(
                fraction=fraction,
                n_seeds=len(common),
                dice_delta_mean=float(np.mean(values)),
                dice_delta_min=float(np.min(values)),
                dice_delta_max=float(np.max(values)),
            ))

    if missing:
        raise ReportError(f'missing comparison cells: {", ".join(missing)}', missing=missing)

    if output_dir is not None:
        write_deltas(deltas, Path(output_dir), target, baseline, template_manager or TemplateManager())

    return deltas


def write_deltas(
    deltas: Sequence[DeltaRow],
    output_dir: Path,
    target: Variant,
    baseline: Variant,
    template_manager: TemplateManager
) -> Path:
    output_dir.mkdir(parents=True, exist_ok=True)
    path = output_dir / DELTAS_CSV
    with open(path, 'w', newline='', encoding='utf-8') as file:
        writer = csv.writer(file)
        writer.writerow(DELTAS_HEADER)
        for row in deltas:
            writer.writerow([_cell(getattr(row, column)) for column in DELTAS_HEADER])

    table = template_manager.render_table('delta_table', title=f'{target.value} - {baseline.value}', rows=deltas)
    (output_dir / DELTAS_TABLE).write_text(table, encoding='utf-8')

    logger.info('wrote %d delta rows to %s', len(deltas), path)
    return path
