"""
Adam with a fixed learning rate over a dict of named parameters.

Typical Usage:

>>> from r3_captioner.optim import Adam
>>> optimizer = Adam(model.named_parameters(), lr=3e-4)
>>> loss.backward()
>>> optimizer.step()
>>> optimizer.zero_grad()
"""

from typing import Dict
import logging

import numpy as np

from r3_captioner.errors import ConfigError, FormatError
from r3_captioner.tensor import Tensor

logger = logging.getLogger(__name__)


class Adam:
    """
    Bias-corrected Adam. Parameters whose grad is None after a
    backward pass are left untouched and keep their moments.

    Args:
        params: Mapping of name to leaf Tensor
        lr: Learning rate
        beta1: First-moment decay
        beta2: Second-moment decay
        eps: Denominator floor
    """

    def __init__(
        self,
        params: Dict[str, Tensor],
        lr: float = 3e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {lr}")

        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {beta1}, {beta2}")

        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self):
        self.step_count += 1
        correction1 = 1.0 - self.beta1**self.step_count
        correction2 = 1.0 - self.beta2**self.step_count

        for name, param in self.params.items():
            if param.grad is None:
                continue

            g = param.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g

            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            param.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for param in self.params.values():
            param.zero_grad()

    def state_dict(self) -> dict:
        """
        Moments keyed by parameter name plus the step counter.
        """

        return {
            "step": self.step_count,
            "m": {name: value.copy() for name, value in self.m.items()},
            "v": {name: value.copy() for name, value in self.v.items()},
        }

    def load_state_dict(self, state: dict):
        missing = set(self.params) - set(state["m"]) | set(self.params) - set(state["v"])

        if missing:
            raise FormatError(f"optimizer state lacks {sorted(missing)}")

        for name, param in self.params.items():
            for moments in (state["m"], state["v"]):
                if moments[name].shape != param.shape:
                    raise FormatError(
                        f"optimizer state for {name} has shape {moments[name].shape}, "
                        f"expected {param.shape}"
                    )

        self.step_count = int(state["step"])
        self.m = {name: np.array(state["m"][name], dtype=np.float64) for name in self.params}
        self.v = {name: np.array(state["v"][name], dtype=np.float64) for name in self.params}

        logger.debug("adam state loaded step=%d params=%d", self.step_count, len(self.params))
