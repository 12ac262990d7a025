"""Euler-Maruyama simulation of black-box, prior, and hybrid SDEs.

Rollouts are differentiable: the state at every grid point is a graph node,
and the neural part of the drift is retained per step so the path-space KL
can be assembled afterwards.  All Monte-Carlo samples of one initial
condition are batched as rows of a single graph; rows never interact, so
this is equivalent to independent per-sample rollouts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import bnn
from . import diffcore as dc
from . import priors

DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    """A rollout state left the finite/bounded region."""

    def __init__(self, message: str, step: int | None = None, sample: int | None = None):
        super().__init__(message)
        self.step = step
        self.sample = sample


@dataclass
class TimeGrid:
    """Strictly increasing time points t_0 < t_1 < ... < t_K (possibly irregular)."""

    times: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).ravel()
        if self.times.size == 0:
            raise ValueError("time grid must contain at least one point")
        if not np.all(np.isfinite(self.times)):
            raise ValueError("time grid contains non-finite values")
        if self.times.size > 1 and not np.all(np.diff(self.times) > 0.0):
            raise ValueError("time grid must be strictly increasing")

    @property
    def n_points(self) -> int:
        return self.times.size

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def dts(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])


@dataclass
class DiffusionSpec:
    """Constant diagonal diffusion with per-dimension scale g (std units)."""

    scale: np.ndarray

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64).ravel()
        if self.scale.size == 0:
            raise ValueError("diffusion scale must have at least one component")
        if not np.all(np.isfinite(self.scale)) or np.any(self.scale <= 0.0):
            raise ValueError("diffusion scale must be strictly positive and finite")

    @property
    def dim(self) -> int:
        return self.scale.size

    @property
    def variance(self) -> np.ndarray:
        return self.scale**2

    @classmethod
    def isotropic(cls, value: float, dim: int) -> "DiffusionSpec":
        return cls(np.full(dim, float(value)))


@dataclass
class HybridDriftSpec:
    """Neural drift plus gamma-masked prior drift; either part is optional."""

    neural: bnn.PosteriorNodes | None = None
    prior: priors.PriorOde | None = None
    gamma: priors.GammaMask | None = None

    def __post_init__(self):
        if self.neural is None and self.prior is None:
            raise ValueError("hybrid drift needs a neural part, a prior part, or both")
        if self.prior is not None:
            if self.gamma is None:
                self.gamma = priors.GammaMask.ones(self.prior.dim)
            elif self.gamma.dim != self.prior.dim:
                raise ValueError(
                    f"gamma dim {self.gamma.dim} does not match prior dim {self.prior.dim}"
                )
        if self.neural is not None:
            arch = self.neural.arch
            arch.validate_state_dim(arch.state_dim)
            if self.prior is not None and self.prior.dim != arch.state_dim:
                raise ValueError("prior dim does not match neural state dim")

    @property
    def state_dim(self) -> int:
        if self.neural is not None:
            return self.neural.arch.state_dim
        assert self.prior is not None
        return self.prior.dim

    @property
    def has_prior_term(self) -> bool:
        return self.prior is not None and self.prior.kind != "zero"


@dataclass
class LatentPath:
    """Differentiable rollout: S samples over one time grid.

    ``state_nodes[k]`` holds the [S, P] state at grid point k; ``drift_nodes``
    retains the neural drift evaluated at each of the K steps (None when the
    drift has no neural part).  The stored noise makes rollouts replayable.
    """

    grid: TimeGrid
    state_nodes: list[dc.Node]
    drift_nodes: list[dc.Node] | None
    wiener: np.ndarray
    layer_noise: list[np.ndarray] | None
    n_samples: int

    @property
    def state_dim(self) -> int:
        return self.state_nodes[0].value.shape[1]

    @property
    def states(self) -> np.ndarray:
        """Values as one array of shape [S, K+1, P]."""
        return np.stack([n.value for n in self.state_nodes], axis=1)

    @property
    def drift_values(self) -> np.ndarray | None:
        if self.drift_nodes is None:
            return None
        if not self.drift_nodes:
            return np.zeros((self.n_samples, 0, self.state_dim))
        return np.stack([n.value for n in self.drift_nodes], axis=1)


def _seed_sequence(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def sample_noise_bundle(
    grid: TimeGrid, n_samples: int, arch: bnn.MlpArch | None, state_dim: int, seed
) -> tuple[np.ndarray, list[np.ndarray] | None]:
    """Draw Wiener increments and per-step layer noise from per-sample substreams.

    Sample s uses its own child stream, so the first S' samples of an S-sample
    bundle coincide with an S'-sample bundle drawn from the same seed.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    K = grid.n_steps
    dts = grid.dts
    sqrt_dt = np.sqrt(dts)[:, None] if K else np.zeros((0, 1))
    wiener = np.empty((n_samples, K, state_dim))
    widths = arch.layer_widths[1:] if arch is not None else ()
    layer_noise = [np.empty((n_samples, K, w)) for w in widths] if arch is not None else None
    children = _seed_sequence(seed).spawn(n_samples)
    for s, child in enumerate(children):
        rng = np.random.default_rng(child)
        wiener[s] = rng.standard_normal((K, state_dim)) * sqrt_dt
        if layer_noise is not None:
            for li, w in enumerate(widths):
                layer_noise[li][s] = rng.standard_normal((K, w))
    return wiener, layer_noise


def wiener_increments(grid: TimeGrid, n_samples: int, state_dim: int, seed) -> np.ndarray:
    """Gaussian increments with per-step variance dt_k, shape [S, K, P]."""
    if state_dim < 1:
        raise ValueError("state dimension must be positive")
    wiener, _ = sample_noise_bundle(grid, n_samples, None, state_dim, seed)
    return wiener


def _check_state(value: np.ndarray) -> None:
    bad = ~np.isfinite(value) | (np.abs(value) > DIVERGENCE_LIMIT)
    if bad.any():
        sample = int(np.argwhere(bad.any(axis=1))[0][0])
        raise DivergenceError(
            f"state diverged (|h| > {DIVERGENCE_LIMIT:g} or non-finite) in sample {sample}",
            sample=sample,
        )


def em_step(
    h: dc.Node,
    t: float,
    dt: float,
    drift: HybridDriftSpec,
    diffusion: DiffusionSpec,
    dW: np.ndarray,
    layer_noise=None,
) -> tuple[dc.Node, dc.Node | None]:
    """One Euler-Maruyama step; returns the new state and the neural drift value."""
    if dt <= 0.0:
        raise ValueError("time step must be positive")
    f_node = None
    terms = []
    if drift.neural is not None:
        if layer_noise is None:
            raise ValueError("layer noise required for a neural drift")
        f_node = bnn.drift_forward(h, t, drift.neural, layer_noise)
        terms.append(f_node)
    if drift.has_prior_term:
        terms.append(priors.masked_drift_node(h, drift.prior, drift.gamma))
    if terms:
        total = terms[0] if len(terms) == 1 else dc.add(terms[0], terms[1])
        h_next = dc.add(h, dc.scalar_mul(total, dt))
    else:
        h_next = h
    h_next = dc.add(h_next, dc.constant(diffusion.scale * dW))
    _check_state(h_next.value)
    return h_next, f_node


def simulate(
    h0,
    grid: TimeGrid,
    drift: HybridDriftSpec,
    diffusion: DiffusionSpec,
    n_samples: int,
    seed=0,
    *,
    wiener: np.ndarray | None = None,
    layer_noise: list[np.ndarray] | None = None,
) -> LatentPath:
    """Roll S Euler-Maruyama trajectories from a point-mass initial state.

    Noise is drawn from ``seed`` unless explicit ``wiener`` ([S, K, P]) and
    ``layer_noise`` (per layer [S, K, width]) arrays are injected, which makes
    frozen-noise replays and finite-difference checks possible.
    """
    if n_samples < 1:
        raise ValueError("need at least one Monte-Carlo sample")
    P = drift.state_dim
    if diffusion.dim != P:
        raise ValueError(f"diffusion dim {diffusion.dim} does not match state dim {P}")
    h0 = np.asarray(h0, dtype=np.float64)
    if h0.ndim == 1:
        h0 = np.broadcast_to(h0, (n_samples, h0.size)).copy()
    if h0.shape != (n_samples, P):
        raise ValueError(f"initial state has shape {h0.shape}, expected {(n_samples, P)}")

    arch = drift.neural.arch if drift.neural is not None else None
    if wiener is None:
        wiener, drawn = sample_noise_bundle(grid, n_samples, arch, P, seed)
        if layer_noise is None:
            layer_noise = drawn
    K = grid.n_steps
    if wiener.shape != (n_samples, K, P):
        raise ValueError(f"wiener has shape {wiener.shape}, expected {(n_samples, K, P)}")

    states = [dc.constant(h0)]
    drifts: list[dc.Node] | None = [] if drift.neural is not None else None
    times = grid.times
    dts = grid.dts
    for k in range(K):
        noise_k = (
            [layer_noise[li][:, k, :] for li in range(len(layer_noise))]
            if layer_noise is not None
            else None
        )
        try:
            h_next, f_node = em_step(
                states[-1], float(times[k]), float(dts[k]), drift, diffusion,
                wiener[:, k, :], noise_k,
            )
        except DivergenceError as exc:
            raise DivergenceError(
                f"{exc} at step {k}", step=k, sample=exc.sample
            ) from None
        states.append(h_next)
        if drifts is not None:
            drifts.append(f_node)
    return LatentPath(
        grid=grid,
        state_nodes=states,
        drift_nodes=drifts,
        wiener=wiener,
        layer_noise=layer_noise,
        n_samples=n_samples,
    )


# --- strong-convergence study -------------------------------------------------

@dataclass
class OrnsteinUhlenbeckOracle:
    """dX = -rate*X dt + sigma dW; reference is the exact discretization."""

    rate: float = 1.0
    sigma: float = 1.0
    x0: float = 1.0
    horizon: float = 1.0
    name: str = "ou"

    def drift(self, x):
        return -self.rate * x

    def noise_scale(self, x):
        return self.sigma * np.ones_like(x)

    def exact_path(self, dW: np.ndarray, dt: float) -> np.ndarray:
        S, K = dW.shape
        decay = math.exp(-self.rate * dt)
        scale = self.sigma * math.sqrt((1.0 - math.exp(-2.0 * self.rate * dt)) / (2.0 * self.rate))
        xi = dW / math.sqrt(dt)
        out = np.empty((S, K + 1))
        out[:, 0] = self.x0
        for k in range(K):
            out[:, k + 1] = out[:, k] * decay + scale * xi[:, k]
        return out


@dataclass
class GeometricBrownianOracle:
    """dX = mu*X dt + sigma*X dW; reference is the closed form in W_t."""

    mu: float = 1.0
    sigma: float = 0.5
    x0: float = 1.0
    horizon: float = 1.0
    name: str = "gbm"

    def drift(self, x):
        return self.mu * x

    def noise_scale(self, x):
        return self.sigma * x

    def exact_path(self, dW: np.ndarray, dt: float) -> np.ndarray:
        S, K = dW.shape
        t = np.arange(K + 1) * dt
        W = np.concatenate([np.zeros((S, 1)), np.cumsum(dW, axis=1)], axis=1)
        return self.x0 * np.exp((self.mu - 0.5 * self.sigma**2) * t[None, :] + self.sigma * W)


@dataclass
class DeterministicLinearOracle:
    """dX = rate*X dt with no noise; reference is the exponential flow."""

    rate: float = 1.0
    x0: float = 1.0
    horizon: float = 1.0
    name: str = "linear"

    def drift(self, x):
        return self.rate * x

    def noise_scale(self, x):
        return np.zeros_like(x)

    def exact_path(self, dW: np.ndarray, dt: float) -> np.ndarray:
        S, K = dW.shape
        t = np.arange(K + 1) * dt
        return self.x0 * np.exp(self.rate * t)[None, :] * np.ones((S, 1))


ORACLES = {
    "ou": OrnsteinUhlenbeckOracle,
    "gbm": GeometricBrownianOracle,
    "linear": DeterministicLinearOracle,
}


@dataclass
class ConvergenceReport:
    oracle: str
    dts: list[float]
    errors: list[float]
    slope: float

    def to_dict(self) -> dict:
        return {"oracle": self.oracle, "dts": self.dts, "errors": self.errors, "slope": self.slope}


def convergence_study(oracle, dts, n_paths: int, seed=0) -> ConvergenceReport:
    """Pathwise strong error of Euler-Maruyama against an exact per-path oracle.

    For each step size, EM and the oracle share the same Wiener increments;
    the error is the mean over paths of the sup-norm difference along the
    trajectory.  Returns the least-squares slope of log error vs log dt.
    """
    dts = [float(dt) for dt in dts]
    if len(dts) < 3:
        raise ValueError("convergence study needs at least 3 step sizes")
    if n_paths < 1:
        raise ValueError("need at least one path")
    errors = []
    children = _seed_sequence(seed).spawn(len(dts))
    for j, dt in enumerate(dts):
        K = int(round(oracle.horizon / dt))
        if K < 1:
            raise ValueError(f"step size {dt} exceeds the horizon {oracle.horizon}")
        rng = np.random.default_rng(children[j])
        dW = rng.standard_normal((n_paths, K)) * math.sqrt(dt)
        em = np.empty((n_paths, K + 1))
        em[:, 0] = oracle.x0
        for k in range(K):
            x = em[:, k]
            em[:, k + 1] = x + oracle.drift(x) * dt + oracle.noise_scale(x) * dW[:, k]
        exact = oracle.exact_path(dW, dt)
        errors.append(float(np.mean(np.max(np.abs(em - exact), axis=1))))
    slope = float(np.polyfit(np.log(dts), np.log(errors), 1)[0])
    return ConvergenceReport(oracle=getattr(oracle, "name", "custom"), dts=dts,
                             errors=errors, slope=slope)
