from typing import Optional

from pdc_segmentation.data import Batch
from pdc_segmentation.model import ALL_GROUPS, LossBundle, Phase, Variant
from pdc_segmentation.objectives import consistency_loss, supervised_loss
from pdc_segmentation.optim import OptimizerState, gradients, sgd_update
from pdc_segmentation.variants.base import AbstractVariant, PhaseCallback, _target, full_batch, notify
from pdc_segmentation.volnet import DualPrediction, ParameterStore, forward


class VnetGc(AbstractVariant):
    """Global consistency: supervised and consistency losses minimized jointly over all parameters."""

    variant = Variant.VNET_GC

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
        pred = forward(params, full_batch(labeled, unlabeled))
        n = labeled.size
        labeled_pred = DualPrediction.from_logits(pred.logits1[:n], pred.logits2[:n])

        supervised = supervised_loss(labeled_pred, _target(params, labeled))
        consistency = consistency_loss(pred)
        loss = supervised + self.lambda_c(t) * consistency

        grads = gradients(loss, params, ALL_GROUPS)
        sgd_update(params, grads, state, lr, ALL_GROUPS, self.config.momentum, self.config.weight_decay)
        notify(on_phase, Phase.JOINT, params, state)

        return self.bundle(t, supervised.item(), consistency.item(), self.measure_decoupling(params))
