import logging
from typing import Optional

from pdc_segmentation.data import Batch
from pdc_segmentation.model import LossBundle, Phase, Variant
from pdc_segmentation.optim import OptimizerState
from pdc_segmentation.variants.base import AbstractVariant, PhaseCallback, full_batch, notify
from pdc_segmentation.volnet import ParameterStore

logger = logging.getLogger(__name__)


class Pdc(AbstractVariant):
    """Parameter-decoupling consistency: supervised, decoupling and consistency phases, alternating.

    Each phase has its own forward/backward pass and only updates its own groups:
    supervised -> all, decoupling -> heads, consistency -> extractor.
    """

    variant = Variant.PDC

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
        supervised = consistency = decoupling = None

        for phase in self.config.phase_order:
            match phase:
                case Phase.SUPERVISED:
                    supervised, _ = self.supervised_phase(params, state, labeled, lr)
                    notify(on_phase, phase, params, state)
                case Phase.DECOUPLING:
                    decoupling = self.decoupling_phase(params, state, t, lr)
                    if decoupling is not None:
                        notify(on_phase, phase, params, state)
                case Phase.CONSISTENCY:
                    consistency, updated = self.consistency_phase(
                        params, state, full_batch(labeled, unlabeled), t, lr
                    )
                    if updated:
                        notify(on_phase, phase, params, state)

        if decoupling is None:
            decoupling = self.measure_decoupling(params)

        return self.bundle(t, supervised, consistency, decoupling)
