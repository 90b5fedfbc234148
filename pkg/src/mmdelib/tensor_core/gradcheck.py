"""Central finite differences, used as the independent gradient oracle."""

from __future__ import annotations

from typing import Callable

import numpy as np


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6,
                     coords: np.ndarray | None = None) -> np.ndarray:
    """(f(x + eps e_i) - f(x - eps e_i)) / 2 eps for every (or each listed) flat coordinate i.

    ``x`` is perturbed in place and restored; run ``f`` in float64.
    """
    x = np.asarray(x)
    grad = np.zeros(x.size, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(x.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        grad[i] = (hi - lo) / (2 * eps)
    return grad.reshape(x.shape)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def check_module_gradients(loss_fn: Callable[[], "object"], named_params, eps: float = 1e-6,
                           max_coords: int = 48, seed: int = 0) -> dict[str, float]:
    """Compare backward() against finite differences for each named parameter.

    ``loss_fn`` builds a fresh scalar loss Tensor from the current parameter
    values.  Large tensors are checked on a seeded random subset of
    ``max_coords`` coordinates.  Returns the relative error per parameter.

    A parameter whose true gradient vanishes (a key bias, say) would turn pure
    finite-difference noise into an error of 1, so each denominator is floored
    at 1e-3 of the whole model's analytic gradient norm.
    """
    from .autograd import backward

    named_params = list(named_params)
    for _, p in named_params:
        p.grad = None
    backward(loss_fn())
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for n, p in named_params}
    floor = max(1e-3 * float(np.sqrt(sum(np.sum(np.square(g, dtype=np.float64)) for g in analytic.values()))),
                1e-12)
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in named_params:
        coords = None
        if p.size > max_coords:
            coords = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        numeric = finite_diff_grad(lambda _x: loss_fn().item(), p.data, eps, coords)
        a = analytic[name].reshape(-1)
        n = numeric.reshape(-1)
        if coords is not None:
            a, n = a[coords], n[coords]
        errors[name] = relative_error(a, n, floor)
    return errors
