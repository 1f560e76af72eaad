from typing import Collection

import torch
from pydantic import BaseModel, ConfigDict

from pdc_segmentation.errors import AlignmentError, ConfigurationError
from pdc_segmentation.model import Group, TrainConfig
from pdc_segmentation.volnet import ParameterStore


class OptimizerState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    momentum_buffers: dict[str, torch.Tensor]
    iteration: int = 0
    lr: float = 0.0

    @classmethod
    def initial(cls, params: ParameterStore) -> 'OptimizerState':
        return cls(momentum_buffers={e.name: torch.zeros_like(e.tensor) for e in params.entries()})

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {name: buf.clone() for name, buf in self.momentum_buffers.items()}


def learning_rate(t: int, cfg: TrainConfig) -> float:
    # exact decade steps for a 0.1 factor
    return cfg.base_lr / (1 / cfg.lr_decay_factor) ** (t // cfg.lr_decay_every)


def gradients(loss: torch.Tensor, params: ParameterStore, groups: Collection[Group]) -> dict[str, torch.Tensor]:
    """Gradients of loss w.r.t. the parameters of the given groups only."""
    entries = [e for e in params.entries() if e.group in groups]
    grads = torch.autograd.grad(loss, [e.tensor for e in entries], allow_unused=True)
    return {
        e.name: g if g is not None else torch.zeros_like(e.tensor)
        for e, g in zip(entries, grads)
    }


def sgd_update(
    params: ParameterStore,
    grads: dict[str, torch.Tensor],
    state: OptimizerState,
    lr: float,
    groups: Collection[Group],
    momentum: float = 0.9,
    weight_decay: float = 0.0
) -> tuple[ParameterStore, OptimizerState]:
    """Momentum SGD step restricted to the given groups; everything else stays bit-identical."""
    if not groups:
        raise ConfigurationError('sgd_update needs at least one group')

    entries = params.entries()
    unknown = set(grads) - {e.name for e in entries}
    if unknown:
        raise AlignmentError(f'gradients for unknown parameters: {sorted(unknown)}')

    with torch.no_grad():
        for entry in entries:
            if entry.group not in groups:
                continue

            grad = grads.get(entry.name)
            if grad is None:
                raise AlignmentError(f'missing gradient for {entry.name}')
            if grad.shape != entry.tensor.shape:
                raise AlignmentError(
                    f'gradient for {entry.name} has shape {tuple(grad.shape)}, '
                    f'parameter has {tuple(entry.tensor.shape)}'
                )

            step = grad.add(entry.tensor, alpha=weight_decay) if weight_decay else grad
            buffer = state.momentum_buffers[entry.name]
            buffer.mul_(momentum).add_(step)
            entry.tensor.add_(buffer, alpha=-lr)

    state.lr = lr
    return params, state
