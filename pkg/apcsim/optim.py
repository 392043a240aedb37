"""
Simple Adam optimizer over Tensor parameters.
"""

from typing import List, Sequence, Tuple

import numpy as np

from .errors import DomainError
from .tensor import Tensor


class Adam:
    """
    Adam with bias-corrected first and second moments.

    Args:
        params: Leaf tensors with requires_grad=True
        lr: Step size
        betas: Decay rates of the moment estimates
        eps: Denominator offset
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 0.01,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if not lr > 0:
            raise DomainError(f"learning rate must be > 0, got {lr}")
        self.params: List[Tensor] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * p.grad
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * p.grad ** 2
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
