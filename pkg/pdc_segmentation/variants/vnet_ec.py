from typing import Optional

from pdc_segmentation.data import Batch
from pdc_segmentation.model import LossBundle, Phase, Variant
from pdc_segmentation.optim import OptimizerState
from pdc_segmentation.variants.base import AbstractVariant, PhaseCallback, full_batch, notify
from pdc_segmentation.volnet import ParameterStore


class VnetEc(AbstractVariant):
    """Extractor consistency: supervised step on everything, then consistency on the extractor alone."""

    variant = Variant.VNET_EC

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
        supervised, _ = self.supervised_phase(params, state, labeled, lr)
        notify(on_phase, Phase.SUPERVISED, params, state)

        consistency, updated = self.consistency_phase(params, state, full_batch(labeled, unlabeled), t, lr)
        if updated:
            notify(on_phase, Phase.CONSISTENCY, params, state)

        return self.bundle(t, supervised, consistency, self.measure_decoupling(params))
