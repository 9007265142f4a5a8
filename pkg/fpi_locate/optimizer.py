"""AdamW with decoupled weight decay and a step-decay learning-rate schedule.

The weight decay is applied directly to the weights (``p -= lr * wd * p``)
before the Adam moment update, never folded into the gradient.
"""

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .numkernel import Tensor
from .validation import ConfigError, DimensionError

logger = logging.getLogger("fpi_locate.optimizer")

DEFAULT_LR = 3e-4
DEFAULT_WEIGHT_DECAY = 5e-4
DEFAULT_BETAS = (0.9, 0.999)


@dataclass
class AdamWState:
    """First and second moment estimates, keyed by parameter name."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Mapping[str, Tensor]) -> "AdamWState":
        return cls(
            step=0,
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None] | None,
    lr: float = DEFAULT_LR,
    weight_decay: float = DEFAULT_WEIGHT_DECAY,
    betas: Sequence[float] = DEFAULT_BETAS,
    state: AdamWState | None = None,
    eps: float = 1e-8,
) -> AdamWState:
    """Apply one AdamW update to *params* in place and return the new state.

    *grads* defaults to each parameter's ``.grad``; a missing gradient is
    treated as zero.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    if weight_decay < 0:
        raise ConfigError(f"weight decay must be >= 0, got {weight_decay}")
    beta1, beta2 = betas
    if state is None:
        state = AdamWState.zeros_like(params)
    if set(state.m) != set(params):
        raise DimensionError("optimizer state does not match the parameter set")

    t = state.step + 1
    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t
    m_new: dict[str, np.ndarray] = {}
    v_new: dict[str, np.ndarray] = {}
    for name, p in params.items():
        m, v = state.m[name], state.v[name]
        if m.shape != p.data.shape:
            raise DimensionError(f"state for {name} has shape {m.shape}, parameter has {p.data.shape}")
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)

        if weight_decay:
            p.data -= lr * weight_decay * p.data
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        p.data -= (lr * (m / bias1) / (np.sqrt(v / bias2) + eps)).astype(p.data.dtype)
        m_new[name], v_new[name] = m, v

    return AdamWState(step=t, m=m_new, v=v_new)


@dataclass(frozen=True)
class StepDecay:
    """Learning rate divided by ``1 / gamma`` at each milestone.

    Milestones count epochs for the ``paper`` preset and optimizer steps for
    desk runs; the caller passes whichever counter applies.
    """

    base_lr: float
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1

    def lr_at(self, counter: int) -> float:
        drops = sum(1 for m in self.milestones if counter >= m)
        return self.base_lr * self.gamma ** drops
