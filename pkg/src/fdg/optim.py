"""Module-local SGD with momentum, weight decay and a step-decay schedule."""
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ShapeError


@dataclass(frozen=True)
class LrSchedule:
    """Warmup rate for ``t <= warmup_steps``, then ``base_lr`` divided at each passed milestone.

    ``milestones`` holds ``(step, divisor)`` pairs; a milestone is passed once ``t > step``.
    """

    base_lr: float = 0.1
    milestones: tuple = ()
    warmup_steps: int = 0
    warmup_lr: float = 0.01

    def __post_init__(self):
        steps = [s for s, _ in self.milestones]
        if any(a >= b for a, b in zip(steps, steps[1:])):
            raise ValueError(f"milestones must be strictly increasing: {steps}")
        if self.base_lr < 0 or self.warmup_lr < 0:
            raise ValueError("learning rates must be non-negative")

    def at(self, t):
        if t < 1:
            raise ValueError(f"steps start at 1, got {t}")
        if t <= self.warmup_steps:
            return self.warmup_lr
        lr = self.base_lr
        for step, divisor in self.milestones:
            if t > step:
                lr /= divisor
        return lr


def lr_at(schedule, t):
    return schedule.at(t)


def step_decay_schedule(iters_per_epoch, base_lr=0.1, milestone_epochs=(150, 225, 275),
                        divisor=10.0, warmup_epochs=0, warmup_lr=0.01):
    """Epoch-based schedule converted to iterations (defaults: 0.1, /10 at 150/225/275)."""
    return LrSchedule(
        base_lr=base_lr,
        milestones=tuple((int(e * iters_per_epoch), divisor) for e in milestone_epochs),
        warmup_steps=int(warmup_epochs * iters_per_epoch),
        warmup_lr=warmup_lr,
    )


@dataclass
class SGD:
    """Heavy-ball SGD: ``buf = mu*buf + (g + wd*p)``, ``p = p - lr*buf``.

    Updates return fresh arrays so saved graphs holding the old ones stay valid.
    """

    schedule: LrSchedule = field(default_factory=LrSchedule)
    momentum: float = 0.0
    weight_decay: float = 0.0
    buffers: dict = field(default_factory=dict)

    def apply_update(self, params, grads, t, keys=None):
        if len(params) != len(grads):
            raise ShapeError(f"{len(params)} params but {len(grads)} grads")
        keys = range(len(params)) if keys is None else keys
        lr = self.schedule.at(t)
        out = []
        for key, p, g in zip(keys, params, grads):
            if p.shape != g.shape:
                raise ShapeError(f"param {key}: shape {p.shape} vs grad {g.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for param {key} at step {t}")
            d = g
            if self.weight_decay:
                d = d + p.dtype.type(self.weight_decay) * p
            if self.momentum:
                buf = self.buffers.get(key)
                buf = d.copy() if buf is None else p.dtype.type(self.momentum) * buf + d
                self.buffers[key] = buf
                d = buf
            out.append(p - p.dtype.type(lr) * d)
        return out

    def step_layers(self, layers, layer_grads, t, offset=0):
        """Apply one update to every parameter of ``layers`` in place of the old arrays."""
        keys, params, grads, slots = [], [], [], []
        for i, (layer, lg) in enumerate(zip(layers, layer_grads)):
            for name, p in layer.params.items():
                keys.append((offset + i, name))
                params.append(p)
                grads.append(lg[name])
                slots.append((layer, name))
        new = self.apply_update(params, grads, t, keys)
        for (layer, name), p in zip(slots, new):
            layer.params[name] = p


def make_optimizer(config, iters_per_epoch):
    """Build an SGD instance from a :class:`~fdg.config.RunConfig`."""
    schedule = step_decay_schedule(
        iters_per_epoch,
        base_lr=config.lr,
        milestone_epochs=config.milestones,
        divisor=config.lr_divisor,
        warmup_epochs=config.warmup_epochs,
        warmup_lr=config.warmup_lr,
    )
    return SGD(schedule, momentum=config.momentum, weight_decay=config.weight_decay)


def iterations_per_epoch(n_train, batch_size):
    return max(1, math.ceil(n_train / batch_size))
