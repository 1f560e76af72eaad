from typing import Optional

import torch

from pdc_segmentation.data import Batch
from pdc_segmentation.errors import ConfigurationError
from pdc_segmentation.model import LossBundle, Phase, Variant
from pdc_segmentation.objectives import consistency_loss
from pdc_segmentation.optim import OptimizerState
from pdc_segmentation.variants.base import AbstractVariant, PhaseCallback, notify
from pdc_segmentation.volnet import ParameterStore


class SupervisedOnly(AbstractVariant):
    variant = Variant.SUPERVISED_ONLY

    def check_batches(self, labeled: Batch, unlabeled: Batch) -> None:
        if labeled.size == 0 or labeled.labels is None:
            raise ConfigurationError('supervised_only needs a labeled batch with labels')
        if unlabeled.size:
            raise ConfigurationError('supervised_only trains on labeled data only, got an unlabeled batch')

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
        supervised, pred = self.supervised_phase(params, state, labeled, lr)
        notify(on_phase, Phase.SUPERVISED, params, state)

        with torch.no_grad():
            consistency = consistency_loss(pred).item()

        return self.bundle(t, supervised, consistency, self.measure_decoupling(params))
