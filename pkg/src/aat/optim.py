"""Momentum SGD and a central-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from aat.tensor import NumericError, Tensor, no_record


class SGD:
    """Momentum SGD with L2 weight decay.

    The update for each parameter is::

        v <- momentum * v + (grad + weight_decay * param)
        param <- param - lr * v

    Velocity buffers are keyed by parameter name and persist across calls.
    """

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {name!r}; step refused")
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient {g.shape} does not match parameter {name!r} {p.shape}")
            d = g + self.weight_decay * p.data if self.weight_decay else g
            v = self.velocity.get(name)
            v = d.copy() if v is None else self.momentum * v + d
            self.velocity[name] = v
            p.data = (p.data - self.lr * v).astype(p.dtype, copy=False)


def sgd_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    state: SGD | None = None,
) -> SGD:
    """Functional wrapper around :class:`SGD`; pass the returned state back in to keep momentum."""
    opt = state if state is not None else SGD(lr, momentum, weight_decay)
    opt.step(params, grads)
    return opt


def finite_difference_gradient(fn: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference estimate of d fn(x) / dx, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = x.data.astype(np.float64 if x.dtype == np.float64 else x.dtype, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def value(arr: np.ndarray) -> float:
        out = fn(Tensor(arr))
        return float(out.data.reshape(-1)[0]) if isinstance(out, Tensor) else float(out)

    with no_record():
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = value(base)
            flat[k] = orig - eps
            down = value(base)
            flat[k] = orig
            gflat[k] = (up - down) / (2 * eps)
    return Tensor(grad)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def probe_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Mapping[str, Tensor],
    analytic: Mapping[str, np.ndarray],
    n_probes: int,
    rng: np.random.Generator,
    eps: float = 1e-5,
) -> float:
    """Compare ``analytic`` gradients with central differences at random coordinates.

    ``loss_fn`` re-evaluates the loss from the current contents of ``tensors``,
    which are perturbed in place and restored. Returns the largest relative error.
    """
    names = list(tensors)
    worst = 0.0
    with no_record():
        for _ in range(n_probes):
            name = names[int(rng.integers(len(names)))]
            t = tensors[name]
            flat = t.data.reshape(-1)
            k = int(rng.integers(flat.size))
            orig = flat[k]
            flat[k] = orig + eps
            up = float(loss_fn().data)
            flat[k] = orig - eps
            down = float(loss_fn().data)
            flat[k] = orig
            numeric = (up - down) / (2 * eps)
            worst = max(worst, relative_error(float(analytic[name].reshape(-1)[k]), numeric))
    return worst
