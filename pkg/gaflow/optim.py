""" Adam with bias correction and per-parameter moment buffers. """
from __future__ import annotations

import logging

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class Adam(object):
    """ Adam optimizer.

    Parameters
    ----------
    params : dict[str, Tensor]
        named parameters; names key the moment buffers in checkpoints
    lr : float
    betas : tuple[float, float]
        first and second moment coefficients
    eps : float
    """
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m1: dict[str, np.ndarray] = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.m2: dict[str, np.ndarray] = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise ContractError(f"adam_step: no gradient for {', '.join(missing[:5])}"
                                f"{' ...' if len(missing) > 5 else ''}.")
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            m1 = self.m1[k]
            m2 = self.m2[k]
            m1 *= self.beta1
            m1 += (1 - self.beta1) * g
            m2 *= self.beta2
            m2 += (1 - self.beta2) * g * g
            update = self.lr * (m1 / c1) / (np.sqrt(m2 / c2) + self.eps)
            p.data -= update.astype(p.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for k in self.params:
            state[f"{k}.m1"] = self.m1[k]
            state[f"{k}.m2"] = self.m2[k]
        state["adam.step"] = np.asarray(float(self.t))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if f"{k}.m1" in state:
                self.m1[k] = np.asarray(state[f"{k}.m1"], dtype=p.dtype).reshape(p.shape).copy()
                self.m2[k] = np.asarray(state[f"{k}.m2"], dtype=p.dtype).reshape(p.shape).copy()
        if "adam.step" in state:
            self.t = int(np.asarray(state["adam.step"]).reshape(-1)[0])
        logger.debug(f"Restored Adam state at step {self.t}.")


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


logger = logging.getLogger(__name__)
