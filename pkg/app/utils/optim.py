import numpy as np
from typing import Dict, Sequence

from app.utils.tensor_core import GradMap, Tensor


class AdamW:
    """
    AdamW with decoupled weight decay over named tensor parameters

    The optimizer is the only thing that mutates parameter data, and only
    between forward/backward passes.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        weight_decay: float = 0.0,
        eps: float = 1e-8
    ):
        self.params: Dict[str, Tensor] = {p.name: p for p in params}
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data, dtype=np.float64) for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.data, dtype=np.float64) for name, p in self.params.items()}

    def step(self, grads: GradMap) -> None:
        """
        Apply one descent step

        Args:
            grads: Gradients of the loss (parameters missing from the map are left untouched)
        """
        self.step_count += 1
        bias1 = 1.0 - self.beta1 ** self.step_count
        bias2 = 1.0 - self.beta2 ** self.step_count
        for name in sorted(grads):
            if name not in self.params:
                continue
            param = self.params[name]
            g = grads[name]
            self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * g
            self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * g * g
            m_hat = self._m[name] / bias1
            v_hat = self._v[name] / bias2
            update = m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * param.data
            param.data -= (self.lr * update).astype(param.data.dtype)
