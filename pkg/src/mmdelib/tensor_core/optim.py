"""Adam with bias correction and the inverse-square-root warmup schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import FaultError, Parameter


def noam_lr(step: int, d_model: int, base: float = 0.02, warmup: int = 8000) -> float:
    """Linear warmup for ``warmup`` steps, then decay with ``step**-0.5``."""
    if step < 1:
        raise ValueError("step counts from 1")
    return base * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


class Adam:
    """Adam over named parameters; parameters without a gradient are skipped."""

    def __init__(self, named_params, d_model: int, base_lr: float = 0.02, warmup: int = 8000,
                 beta1: float = 0.9, beta2: float = 0.997, eps: float = 1e-9,
                 fixed_lr: float | None = None):
        self.params: dict[str, Parameter] = dict(named_params)
        self.d_model = d_model
        self.base_lr = base_lr
        self.warmup = warmup
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.fixed_lr = fixed_lr
        self.state = AdamState()

    def lr(self, step: int) -> float:
        if self.fixed_lr is not None:
            return self.fixed_lr
        return noam_lr(step, self.d_model, self.base_lr, self.warmup)

    def step(self) -> float:
        """Apply one update from the current ``.grad`` buffers; returns the lr used."""
        bad = [n for n, p in self.params.items()
               if p.grad is not None and not np.all(np.isfinite(p.grad))]
        if bad:
            raise FaultError(f"non-finite gradients in {len(bad)} parameter(s): {bad[:5]}")
        st = self.state
        st.t += 1
        lr = self.lr(st.t)
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** st.t
        c2 = 1.0 - b2 ** st.t
        for name, p in self.params.items():
            if p.grad is None or not p.requires_grad:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m = st.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                st.m[name] = m
                st.v[name] = np.zeros_like(p.data)
            v = st.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
            p.data = p.data - update
        return lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
