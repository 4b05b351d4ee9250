import logging
from typing import Dict

import numpy as np

from .errors import require

log = logging.getLogger(__name__)


class SgdMomentum:
    """
    SGD with heavy-ball momentum and decoupled weight decay:
        v <- momentum * v + g
        p <- p - lr * v - lr * weight_decay * p
    Parameters are updated in place; velocities are keyed by parameter name.
    """

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        require(0 <= momentum < 1, f"momentum must be in [0, 1), got {momentum}")
        require(weight_decay >= 0, f"weight_decay must be >= 0, got {weight_decay}")
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float):
        require(params.keys() == grads.keys(), "parameter and gradient names differ")
        for name, p in params.items():
            g = grads[name]
            require(g.shape == p.shape, f"gradient {name} has shape {g.shape}, parameter {p.shape}")
            v = self.velocities.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocities[name] = v
            decay = lr * self.weight_decay * p
            p -= lr * v
            p -= decay
