import logging
from abc import ABC, abstractmethod
from typing import Callable, Optional

import torch

from pdc_segmentation.data import Batch
from pdc_segmentation.errors import ConfigurationError
from pdc_segmentation.model import ALL_GROUPS, HEAD_GROUPS, Group, LossBundle, Phase, TrainConfig, Variant
from pdc_segmentation.objectives import consistency_loss, decoupling_loss, one_hot, ramp_weight, supervised_loss
from pdc_segmentation.optim import OptimizerState, gradients, sgd_update
from pdc_segmentation.volnet import DualPrediction, ParameterStore, forward

logger = logging.getLogger(__name__)

PhaseCallback = Callable[[Phase, ParameterStore, OptimizerState], None]


class AbstractVariant(ABC):
    variant: Variant

    def __init__(self, config: TrainConfig):
        self.config = config

    @abstractmethod
    def step(
        self,
        params: ParameterStore,
        state: OptimizerState,
        labeled: Batch,
        unlabeled: Batch,
        t: int,
        lr: float,
        on_phase: Optional[PhaseCallback] = None
    ) -> LossBundle:
        pass

    def check_batches(self, labeled: Batch, unlabeled: Batch) -> None:
        if labeled.size == 0 or labeled.labels is None:
            raise ConfigurationError(f'{self.variant.value} needs a labeled batch with labels')
        if unlabeled.size == 0:
            raise ConfigurationError(f'{self.variant.value} needs an unlabeled batch')

    def lambda_c(self, t: int) -> float:
        return ramp_weight(t, self.config.ramp_t_max, self.config.lambda_c_scale)

    def lambda_pd(self, t: int) -> float:
        return ramp_weight(t, self.config.ramp_t_max, self.config.lambda_pd_scale)

    def supervised_phase(
        self,
        params: ParameterStore,
        state: OptimizerState,
        labeled: Batch,
        lr: float
    ) -> tuple[float, DualPrediction]:
        """Dice + CE on labeled samples, updates every group."""
        pred = forward(params, labeled.images)
        loss = supervised_loss(pred, _target(params, labeled))

        grads = gradients(loss, params, ALL_GROUPS)
        sgd_update(params, grads, state, lr, ALL_GROUPS, self.config.momentum, self.config.weight_decay)

        return loss.item(), pred

    def decoupling_phase(self, params: ParameterStore, state: OptimizerState, t: int, lr: float) -> Optional[float]:
        """Data-free squared-cosine step on the heads; None when the phase is skipped."""
        weight = self.lambda_pd(t)
        if weight == 0 or t % self.config.decoupling_every:
            logger.debug('t=%d: decoupling phase skipped', t)
            return None

        loss = decoupling_loss(*params.head_pairs())
        grads = gradients(weight * loss, params, HEAD_GROUPS)
        sgd_update(params, grads, state, lr, HEAD_GROUPS, self.config.momentum)

        return loss.item()

    def consistency_phase(
        self,
        params: ParameterStore,
        state: OptimizerState,
        images: torch.Tensor,
        t: int,
        lr: float
    ) -> tuple[float, bool]:
        """MSE between the heads on labeled + unlabeled images, updates the extractor only."""
        weight = self.lambda_c(t)
        pred = forward(params, images)
        loss = consistency_loss(pred)
        if weight == 0:
            logger.debug('t=%d: consistency phase skipped', t)
            return loss.item(), False

        grads = gradients(weight * loss, params, {Group.EXTRACTOR})
        sgd_update(params, grads, state, lr, {Group.EXTRACTOR}, self.config.momentum)

        return loss.item(), True

    @staticmethod
    def measure_decoupling(params: ParameterStore) -> float:
        with torch.no_grad():
            return decoupling_loss(*params.head_pairs()).item()

    def bundle(self, t: int, supervised: float, consistency: float, decoupling: float) -> LossBundle:
        return LossBundle(
            supervised=supervised,
            consistency=consistency,
            decoupling=decoupling,
            lambda_c=self.lambda_c(t),
            lambda_pd=self.lambda_pd(t),
        )


def _target(params: ParameterStore, batch: Batch) -> torch.Tensor:
    return one_hot(batch.labels, params.config.num_classes, class_dim=1).to(params.dtype)


def full_batch(labeled: Batch, unlabeled: Batch) -> torch.Tensor:
    return torch.cat([labeled.images, unlabeled.images], dim=0)


def notify(on_phase: Optional[PhaseCallback], phase: Phase, params: ParameterStore, state: OptimizerState) -> None:
    if on_phase is not None:
        on_phase(phase, params, state)
