from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamSet


@dataclass
class OptState:
    kind: str  # "sgd" or "adam"
    base_lr: float
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def sgd(base_lr: float, momentum: float = 0.9) -> OptState:
    return OptState("sgd", base_lr, momentum=momentum)


def adam(base_lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> OptState:
    return OptState("adam", base_lr, betas=tuple(betas), eps=eps)


def opt_step(params: ParamSet, state: OptState, lr: float) -> None:
    """Apply one update in place.  Gradients are left for the caller to clear."""
    for name, t in params.items():
        if t.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient; call zero_grad() before backward")
    state.step += 1
    params.step += 1
    if state.kind == "sgd":
        for name, t in params.items():
            g = t.grad
            if state.momentum:
                buf = state.m.get(name)
                if buf is None:
                    buf = state.m[name] = g.copy()
                else:
                    buf *= state.momentum
                    buf += g
                g = buf
            t.data -= lr * g
        return

    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    # in-place arithmetic: discriminator tensors are large and this runs every iteration
    for name, t in params.items():
        g = t.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        tmp = np.multiply(g, g)
        tmp *= 1 - b2
        v += tmp
        # lr * (m / c1) / (sqrt(v / c2) + eps)
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= lr / c1
        t.data -= tmp


def poly_lr(base_lr: float, it: int, max_iter: int, power: float = 0.9) -> float:
    """Polynomial decay: ``base_lr * (1 - it/max_iter) ** power``."""
    if max_iter <= 0:
        raise ValueError("max_iter must be positive")
    if it < 0 or it > max_iter:
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    return base_lr * (1.0 - it / max_iter) ** power
