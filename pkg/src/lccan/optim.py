from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .core import Tensor


@dataclass
class ParamGroup:
    """Named trainable tensors plus momentum-SGD settings and velocity state."""

    params: dict[str, Tensor]
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")
        for name, p in self.params.items():
            if not p.requires_grad:
                raise ValueError(f"parameter {name!r} is not trainable")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def sgd_step(group: ParamGroup, grads: dict[str, np.ndarray] | None = None) -> ParamGroup:
    """One in-place momentum SGD update (v <- m*v + g + wd*w; w <- w - lr*v).

    ``grads`` defaults to the ``.grad`` buffers of the parameters.
    """
    for name, p in group.params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            raise ValueError(f"missing gradient for {name!r}")
        g = np.asarray(g, dtype=p.dtype)
        if group.weight_decay:
            g = g + group.weight_decay * p.data
        if group.momentum:
            v = group.velocity.get(name)
            v = g.copy() if v is None else group.momentum * v + g
            group.velocity[name] = v
            g = v
        p.data -= p.dtype.type(group.lr) * g
    return group


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return 0.5 * base * (1 + math.cos(math.pi * step / total))


def checksum(params: dict[str, Tensor | np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        p = params[name]
        arr = p.data if isinstance(p, Tensor) else p
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
