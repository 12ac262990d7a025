"""Known-physics drift functions and the partial-knowledge mask.

The drifts are plain vectorized functions of the state; each also exposes a
hand-coded vector-Jacobian product so it can participate in reverse-mode
differentiation through rollouts (see :func:`masked_drift_node`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

LORENZ_PARAMS = (10.0, 28.0, 2.67)
LOTKA_VOLTERRA_PARAMS = (2.0, 1.0, 4.0, 1.0)

_PRIOR_DIMS = {"lorenz": 3, "lotka_volterra": 2}
_PRIOR_NPARAMS = {"lorenz": 3, "lotka_volterra": 4}


def lorenz_drift(h, params=LORENZ_PARAMS) -> np.ndarray:
    """Drift of the Lorenz system; ``h[..., :]`` is (x, y, z)."""
    h = np.asarray(h, dtype=np.float64)
    zeta, kappa, rho = (float(p) for p in params)
    x, y, z = h[..., 0], h[..., 1], h[..., 2]
    return np.stack([zeta * (y - x), x * (kappa - z) - y, x * y - rho * z], axis=-1)


def lorenz_drift_vjp(h, g, params=LORENZ_PARAMS) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    zeta, kappa, rho = (float(p) for p in params)
    x, y, z = h[..., 0], h[..., 1], h[..., 2]
    g0, g1, g2 = g[..., 0], g[..., 1], g[..., 2]
    return np.stack(
        [
            -zeta * g0 + (kappa - z) * g1 + y * g2,
            zeta * g0 - g1 + x * g2,
            -x * g1 - rho * g2,
        ],
        axis=-1,
    )


def lotka_volterra_drift(h, params=LOTKA_VOLTERRA_PARAMS) -> np.ndarray:
    """Drift of the Lotka-Volterra system; ``h[..., :]`` is (prey, predator)."""
    h = np.asarray(h, dtype=np.float64)
    t1, t2, t3, t4 = (float(p) for p in params)
    x, y = h[..., 0], h[..., 1]
    return np.stack([t1 * x - t2 * x * y, -t3 * y + t4 * x * y], axis=-1)


def lotka_volterra_drift_vjp(h, g, params=LOTKA_VOLTERRA_PARAMS) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    t1, t2, t3, t4 = (float(p) for p in params)
    x, y = h[..., 0], h[..., 1]
    g0, g1 = g[..., 0], g[..., 1]
    return np.stack(
        [
            (t1 - t2 * y) * g0 + t4 * y * g1,
            -t2 * x * g0 + (-t3 + t4 * x) * g1,
        ],
        axis=-1,
    )


@dataclass
class PriorOde:
    """An ODE drift encoding (possibly distorted) domain knowledge."""

    kind: str
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dim: int | None = None

    def __post_init__(self):
        if self.kind not in ("lorenz", "lotka_volterra", "zero"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        self.params = np.asarray(self.params, dtype=np.float64).ravel()
        if self.kind == "zero":
            if self.dim is None or self.dim < 1:
                raise ValueError("zero prior requires an explicit positive dim")
            if self.params.size:
                raise ValueError("zero prior takes no parameters")
        else:
            expected = _PRIOR_NPARAMS[self.kind]
            if self.params.size != expected:
                raise ValueError(
                    f"{self.kind} prior expects {expected} parameters, got {self.params.size}"
                )
            want_dim = _PRIOR_DIMS[self.kind]
            if self.dim is None:
                self.dim = want_dim
            elif self.dim != want_dim:
                raise ValueError(f"{self.kind} prior has dim {want_dim}, got {self.dim}")

    def drift(self, h: np.ndarray) -> np.ndarray:
        if self.kind == "lorenz":
            return lorenz_drift(h, self.params)
        if self.kind == "lotka_volterra":
            return lotka_volterra_drift(h, self.params)
        return np.zeros_like(np.asarray(h, dtype=np.float64))

    def drift_vjp(self, h: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.kind == "lorenz":
            return lorenz_drift_vjp(h, g, self.params)
        if self.kind == "lotka_volterra":
            return lotka_volterra_drift_vjp(h, g, self.params)
        return np.zeros_like(np.asarray(g, dtype=np.float64))


@dataclass
class GammaMask:
    """Per-dimension weight in [0, 1] selecting where prior knowledge enters."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.values.size == 0:
            raise ValueError("gamma mask must have at least one component")
        if np.any(self.values < 0.0) or np.any(self.values > 1.0):
            raise ValueError("gamma mask components must lie in [0, 1]")

    @property
    def dim(self) -> int:
        return self.values.size

    @classmethod
    def ones(cls, dim: int) -> "GammaMask":
        return cls(np.ones(dim))


def apply_mask(r, gamma: GammaMask) -> np.ndarray:
    """Elementwise ``gamma * r`` along the trailing state dimension."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != gamma.dim:
        raise ValueError(
            f"apply_mask: drift dim {r.shape[-1]} does not match mask dim {gamma.dim}"
        )
    return r * gamma.values


def perturb_params(params, std: float, seed, component: int | None = None) -> np.ndarray:
    """Add N(0, std^2) noise to all parameters or to one designated component."""
    params = np.asarray(params, dtype=np.float64).ravel()
    if std < 0.0:
        raise ValueError("perturb std must be non-negative")
    rng = np.random.default_rng(seed)
    draw = rng.standard_normal(params.size) * std
    if component is None:
        return params + draw
    if not 0 <= component < params.size:
        raise ValueError(f"component {component} out of range for {params.size} parameters")
    out = params.copy()
    out[component] += draw[component]
    return out


def masked_drift_node(h: dc.Node, ode: PriorOde, gamma: GammaMask) -> dc.Node:
    """Differentiable ``gamma * r(h)``; the Jacobian w.r.t. h is hand-coded."""
    hv = h.value
    value = apply_mask(ode.drift(hv), gamma)
    gv = gamma.values

    def vjp(g):
        return ode.drift_vjp(hv, g * gv)

    return dc.make_node(value, [(h, vjp)])
