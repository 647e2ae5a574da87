"""Adam optimizer over a named parameter registry.

The update touches only trainable tensors and enforces the freeze
contract both ways: a frozen parameter carrying a gradient buffer and a
trainable parameter missing one are both hard errors, not silent skips.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ContractError
from ..tensor import Tensor

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)  # name -> float32 first moment
    v: dict = field(default_factory=dict)  # name -> float32 second moment
    step: int = 0


def init_adam(trainable: Mapping[str, Tensor]) -> AdamState:
    state = AdamState()
    for name, p in trainable.items():
        if not p.requires_grad:
            raise ContractError(f"optimizer given frozen parameter {name}")
        state.m[name] = np.zeros(p.shape, dtype=np.float32)
        state.v[name] = np.zeros(p.shape, dtype=np.float32)
    return state


def opt_step(params: Mapping[str, Tensor], state: AdamState, lr: float) -> None:
    """One Adam update in place. `params` may include frozen entries."""
    state.step += 1
    c1 = 1.0 - BETA1 ** state.step
    c2 = 1.0 - BETA2 ** state.step
    for name, p in params.items():
        if not p.requires_grad:
            if p.grad is not None:
                raise ContractError(f"frozen parameter {name} has a gradient buffer")
            continue
        if p.grad is None:
            raise ContractError(f"trainable parameter {name} is missing its gradient")
        if name not in state.m:
            raise ContractError(f"optimizer state missing parameter {name}")
        g = p.grad.astype(np.float64)
        m = BETA1 * state.m[name].astype(np.float64) + (1.0 - BETA1) * g
        v = BETA2 * state.v[name].astype(np.float64) + (1.0 - BETA2) * g * g
        state.m[name] = m.astype(np.float32)
        state.v[name] = v.astype(np.float32)
        update = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p.data[...] = (p.data.astype(np.float64) - update).astype(np.float32)


def clear_grads(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
