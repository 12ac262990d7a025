"""Adam over the flat dictionary of posterior parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    tau: int = 0

    def __post_init__(self):
        if not self.lr > 0.0:
            raise ValueError("learning rate must be positive")
        if self.tau < 0:
            raise ValueError("step count must be non-negative")


def init_adam(params: dict[str, np.ndarray], lr: float, **kwargs) -> AdamState:
    state = AdamState(lr=lr, **kwargs)
    for key, p in params.items():
        state.m[key] = np.zeros_like(p)
        state.v[key] = np.zeros_like(p)
    return state


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> None:
    """Bias-corrected Adam update, applied to the parameter arrays in place."""
    state.tau += 1
    c1 = 1.0 - state.beta1**state.tau
    c2 = 1.0 - state.beta2**state.tau
    for key, p in params.items():
        if key not in grads:
            raise KeyError(f"missing gradient for parameter {key!r}")
        g = np.asarray(grads[key], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(
                f"gradient for {key!r} has shape {g.shape}, parameter has {p.shape}"
            )
        if g.size and not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {key!r}")
        m = state.m[key]
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def flatten_params(params: dict[str, np.ndarray]) -> tuple[np.ndarray, list[tuple[str, tuple]]]:
    """Concatenate parameter arrays into one vector plus a layout record."""
    layout = [(key, p.shape) for key, p in params.items()]
    if not layout:
        return np.zeros(0), layout
    vec = np.concatenate([p.ravel() for p in params.values()])
    return vec, layout


def set_params_from_vector(params: dict[str, np.ndarray], vec: np.ndarray) -> None:
    """Write a flat vector back into the parameter arrays (in place)."""
    offset = 0
    for key, p in params.items():
        n = p.size
        p[...] = vec[offset:offset + n].reshape(p.shape)
        offset += n
    if offset != vec.size:
        raise ValueError(f"vector of size {vec.size} does not match parameters ({offset})")
