import csv
import logging
from pathlib import Path
from typing import Optional

import torch
from pydantic import BaseModel, ConfigDict
from tqdm import tqdm

from pdc_segmentation.checkpoint import checkpoint_name, save_checkpoint
from pdc_segmentation.data import Batch, BatchComposer
from pdc_segmentation.errors import ConfigurationError
from pdc_segmentation.metrics import coupling_metrics
from pdc_segmentation.model import DatasetManifest, LossBundle, NetworkConfig, TrainConfig, Variant
from pdc_segmentation.optim import OptimizerState, learning_rate
from pdc_segmentation.variants.base import AbstractVariant, PhaseCallback
from pdc_segmentation.variants.pdc import Pdc
from pdc_segmentation.variants.supervised_only import SupervisedOnly
from pdc_segmentation.variants.vnet_ec import VnetEc
from pdc_segmentation.variants.vnet_gc import VnetGc
from pdc_segmentation.volnet import ParameterStore, build_network

logger = logging.getLogger(__name__)

LOG_HEADER = ['iter', 'loss_s', 'loss_c', 'loss_pd', 'lambda_c', 'lambda_pd', 'lr', 'cd', 'qcd']


class LogRecord(BaseModel):
    iter: int
    loss_s: float
    loss_c: float
    loss_pd: float
    lambda_c: float
    lambda_pd: float
    lr: float
    cd: float
    qcd: float

    def row(self) -> list[str]:
        return [str(self.iter)] + [repr(v) for v in self.model_dump(exclude={'iter'}).values()]


class TrainResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    params: ParameterStore
    checkpoint: Path
    log_path: Path
    log: list[LogRecord]


def _variant_for(cfg: TrainConfig) -> AbstractVariant:
    match cfg.variant:
        case Variant.SUPERVISED_ONLY:
            return SupervisedOnly(cfg)
        case Variant.VNET_GC:
            return VnetGc(cfg)
        case Variant.VNET_EC:
            return VnetEc(cfg)
        case Variant.PDC:
            return Pdc(cfg)
        case _:
            raise ConfigurationError(f'variant {cfg.variant} is not supported')


def train_step(
    params: ParameterStore,
    state: OptimizerState,
    labeled_batch: Batch,
    unlabeled_batch: Batch,
    cfg: TrainConfig,
    t: int,
    on_phase: Optional[PhaseCallback] = None
) -> tuple[ParameterStore, OptimizerState, LossBundle]:
    """One training iteration of the configured variant.

    `on_phase` is called after every executed update phase with the live parameters and optimizer state.
    """
    if not 0 <= t < cfg.total_iterations:
        raise ConfigurationError(f'iteration {t} outside [0, {cfg.total_iterations})')

    variant = _variant_for(cfg)
    variant.check_batches(labeled_batch, unlabeled_batch)

    params.train()
    bundle = variant.step(params, state, labeled_batch, unlabeled_batch, t, learning_rate(t, cfg), on_phase)
    state.iteration = t + 1

    return params, state, bundle


def train_run(
    cfg: TrainConfig,
    network_cfg: NetworkConfig,
    manifest: DatasetManifest,
    data_root: Path,
    output_dir: Path,
    progress: bool = True
) -> TrainResult:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    # raises DataError before anything is trained
    composer = BatchComposer(manifest, Path(data_root), cfg)

    torch.manual_seed(cfg.seed)
    params = build_network(network_cfg.model_copy(update={'seed': cfg.seed}))
    state = OptimizerState.initial(params)

    logger.info(
        'training %s for %d iterations (batch %d = %d labeled + %d unlabeled, seed %d)',
        cfg.variant.value, cfg.total_iterations, cfg.batch_size, cfg.labeled_per_batch,
        cfg.unlabeled_per_batch, cfg.seed
    )

    log: list[LogRecord] = []
    log_path = output_dir / 'train_log.csv'

    with open(log_path, 'w', newline='', encoding='utf-8') as log_file:
        writer = csv.writer(log_file)
        writer.writerow(LOG_HEADER)

        for t in tqdm(range(cfg.total_iterations), desc=cfg.variant.value, disable=not progress):
            labeled, unlabeled = composer.next_batch()
            params, state, bundle = train_step(
                params,
                state,
                Batch.from_samples(labeled, labeled=True),
                Batch.from_samples(unlabeled, labeled=False),
                cfg,
                t
            )

            last = t == cfg.total_iterations - 1
            if t % cfg.log_every == 0 or last:
                coupling = coupling_metrics(*params.head_pairs())
                record = LogRecord(
                    iter=t,
                    loss_s=bundle.supervised,
                    loss_c=bundle.consistency,
                    loss_pd=bundle.decoupling,
                    lambda_c=bundle.lambda_c,
                    lambda_pd=bundle.lambda_pd,
                    lr=state.lr,
                    cd=coupling.cd,
                    qcd=coupling.qcd
                )
                log.append(record)
                writer.writerow(record.row())
                log_file.flush()
                logger.info(
                    't=%d L_S=%.4f L_C=%.5f L_PD=%.4f lambda_c=%.5f lambda_pd=%.5f lr=%.5f CD=%.4f QCD=%.4f',
                    t, bundle.supervised, bundle.consistency, bundle.decoupling, bundle.lambda_c,
                    bundle.lambda_pd, state.lr, coupling.cd, coupling.qcd
                )

            if (t + 1) % cfg.checkpoint_every == 0 or last:
                save_checkpoint(output_dir / checkpoint_name(t + 1), params, t + 1, cfg)

    checkpoint = output_dir / checkpoint_name(cfg.total_iterations)
    logger.info('training done, final checkpoint %s', checkpoint)

    return TrainResult(params=params, checkpoint=checkpoint, log_path=log_path, log=log)
