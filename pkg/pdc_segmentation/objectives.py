import logging
import math
from typing import Sequence

import torch
import torch.nn.functional as F

from pdc_segmentation.errors import ConfigurationError, PairingError, ShapeError
from pdc_segmentation.volnet import DualPrediction

logger = logging.getLogger(__name__)

DICE_SMOOTH = 1e-5
PROB_CLAMP = 1e-7
NORM_EPS = 1e-12


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f'{what}: shape {tuple(a.shape)} does not match {tuple(b.shape)}', shape=tuple(a.shape))


def soft_dice_loss(
    probs: torch.Tensor,
    target: torch.Tensor,
    smooth: float = DICE_SMOOTH,
    class_dim: int = 0
) -> torch.Tensor:
    """Soft Dice loss on the foreground classes, averaged when there is more than one."""
    _check_shapes(probs, target, 'soft_dice_loss')

    probs = probs.movedim(class_dim, 0)
    target = target.movedim(class_dim, 0).to(probs.dtype)

    losses = []
    for c in range(1, probs.shape[0]):
        intersect = torch.sum(probs[c] * target[c])
        denominator = torch.sum(probs[c]) + torch.sum(target[c])
        losses.append(1 - (2 * intersect + smooth) / (denominator + smooth))

    return torch.stack(losses).mean()


def cross_entropy_loss(
    probs: torch.Tensor,
    target: torch.Tensor,
    clamp: float = PROB_CLAMP,
    class_dim: int = 0
) -> torch.Tensor:
    _check_shapes(probs, target, 'cross_entropy_loss')

    log_probs = torch.log(probs.clamp(min=clamp, max=1.0))
    return -(target.to(probs.dtype) * log_probs).sum(dim=class_dim).mean()


def supervised_loss(pred: DualPrediction, target: torch.Tensor) -> torch.Tensor:
    class_dim = pred.class_dim
    total = 0
    for probs in (pred.probs1, pred.probs2):
        total = total + soft_dice_loss(probs, target, class_dim=class_dim) \
            + cross_entropy_loss(probs, target, class_dim=class_dim)

    return total / 2


def consistency_loss(pred: DualPrediction) -> torch.Tensor:
    _check_shapes(pred.probs1, pred.probs2, 'consistency_loss')
    return F.mse_loss(pred.probs1, pred.probs2)


def pairwise_cosines(
    head1_params: Sequence[torch.Tensor],
    head2_params: Sequence[torch.Tensor],
    eps: float = NORM_EPS
) -> torch.Tensor:
    """Cosine between every pair of flattened, layer-wise matched head tensors."""
    if len(head1_params) != len(head2_params) or not head1_params:
        raise PairingError(f'cannot pair {len(head1_params)} tensors with {len(head2_params)}')

    cosines = []
    for k, (p1, p2) in enumerate(zip(head1_params, head2_params)):
        if p1.shape != p2.shape:
            raise PairingError(f'paired tensor {k}: shape {tuple(p1.shape)} vs {tuple(p2.shape)}')
        a, b = p1.flatten(), p2.flatten()
        cosines.append(torch.dot(a, b) / ((a.norm() + eps) * (b.norm() + eps)))

    return torch.stack(cosines)


def decoupling_loss(
    head1_params: Sequence[torch.Tensor],
    head2_params: Sequence[torch.Tensor],
    eps: float = NORM_EPS
) -> torch.Tensor:
    """Mean squared cosine over the K paired head tensors."""
    return (pairwise_cosines(head1_params, head2_params, eps) ** 2).mean()


def ramp_weight(t: float, t_max: float, scale: float = 0.1) -> float:
    if t_max <= 0:
        raise ConfigurationError(f't_max must be positive, got {t_max}')

    progress = min(max(t, 0), t_max) / t_max
    return scale * math.exp(-5.0 * (1.0 - progress) ** 2)


def one_hot(labels: torch.Tensor, num_classes: int, class_dim: int = 1) -> torch.Tensor:
    """Integer label volume to a one-hot tensor with the class axis inserted at class_dim."""
    encoded = F.one_hot(labels.long(), num_classes).movedim(-1, class_dim)
    return encoded.to(torch.get_default_dtype())
