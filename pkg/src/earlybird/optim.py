"""SGD with momentum, weight decay and an L1 subgradient on BN scale factors."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    buffers: dict = field(default_factory=dict)

    def check(self, params):
        for name, buf in self.buffers.items():
            if buf.shape != params[name].shape:
                raise DimensionError(f"momentum buffer {name} has shape {buf.shape}, param {params[name].shape}")


def sgd_step(params, grads, state, l1_gamma_coeff=0.0, gamma_names=()):
    """Update ``params`` in place.

    ``v <- momentum * v + (grad + weight_decay * p [+ l1 * sign(p)])`` and
    ``p <- p - lr * v``.  The sign term applies only to names in
    ``gamma_names``; ``sign(0) = 0``.
    """
    if state.lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {state.lr}")
    if l1_gamma_coeff < 0:
        raise ConfigError("l1_gamma_coeff must be >= 0")
    gamma_names = set(gamma_names)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient {name} shape {g.shape} != param {p.shape}")
        d = g + state.weight_decay * p
        if l1_gamma_coeff and name in gamma_names:
            d = d + l1_gamma_coeff * np.sign(p)
        d = d.astype(p.dtype, copy=False)
        buf = state.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p)
            state.buffers[name] = buf
        buf *= state.momentum
        buf += d
        p -= state.lr * buf
    return params, state
