"""Objective-side math: bounded Gaussian likelihood, Monte-Carlo marginal
likelihood, path-space KL, the PAC complexity functional, the nested risk
bounds, and the trainable loss.

All likelihood products live in log space; the [0, 1]-valued risk exponent is
mathematically non-positive and is clamped to 0 against rounding.  The
per-sequence quantities are reduced in fixed index order so results do not
depend on scheduling.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import bnn
from . import diffcore as dc
from .sde import DiffusionSpec, DivergenceError, LatentPath


@dataclass
class LikelihoodSpec:
    """Diagonal Gaussian observation model with a variance floor.

    The floor keeps the density uniformly bounded, which the [0, 1]-valued
    risk construction requires.
    """

    obs_std: np.ndarray
    sigma_min: float = 1e-3

    def __init__(self, obs_std, dim: int | None = None, sigma_min: float = 1e-3):
        if not sigma_min > 0.0:
            raise ValueError("sigma_min must be positive")
        std = np.asarray(obs_std, dtype=np.float64).ravel()
        if std.size == 1 and dim is not None:
            std = np.full(dim, float(std[0]))
        elif dim is not None and std.size != dim:
            raise ValueError(f"obs_std has {std.size} entries, expected {dim}")
        if not np.all(np.isfinite(std)) or np.any(std <= 0.0):
            raise ValueError("observation std must be positive and finite")
        self.obs_std = np.maximum(std, sigma_min)
        self.sigma_min = float(sigma_min)

    @property
    def dim(self) -> int:
        return self.obs_std.size

    @property
    def variance(self) -> np.ndarray:
        return self.obs_std**2

    @property
    def log_bbar(self) -> float:
        """Log of the density maximum (the mode): sum_d -0.5*log(2*pi*sigma_d^2)."""
        return float(np.sum(-0.5 * np.log(2.0 * math.pi * self.variance)))

    def std_for(self, dim: int) -> np.ndarray:
        if self.obs_std.size == dim:
            return self.obs_std
        if self.obs_std.size == 1:
            return np.full(dim, self.obs_std[0])
        raise ValueError(f"likelihood spec has dim {self.obs_std.size}, data has dim {dim}")


@dataclass
class PacConfig:
    """PAC-bound bookkeeping: confidence, sequence count, samples, length."""

    delta: float
    n_sequences: int
    mc_samples: int
    seq_len: int

    def __post_init__(self):
        if not 0.0 < self.delta <= 1.0:
            raise ValueError("delta must lie in (0, 1]")
        if self.n_sequences < 1:
            raise ValueError("need at least one sequence")
        if self.mc_samples < 1:
            raise ValueError("need at least one Monte-Carlo sample")
        if self.seq_len < 1:
            raise ValueError("sequence length must be positive")
        if self.n_sequences <= 8:
            warnings.warn(
                f"PAC theorem precondition N > 8 not met (N={self.n_sequences}); "
                "the bound value is not certified",
                stacklevel=2,
            )


@dataclass
class LossBreakdown:
    """Per-step loss report; ``total_node`` is the differentiable scalar."""

    mll: float
    kl_path: float
    kl_weights: float
    complexity: float
    total: float
    pac_bound_linear: float
    risk_empirical: float
    nll_per_step: float
    total_node: dc.Node | None = field(default=None, repr=False, compare=False)

    CSV_FIELDS = ("mll", "kl_path", "kl_weights", "complexity", "total",
                  "pac_bound_linear", "risk_empirical")


def gaussian_loglik(y, h, spec: LikelihoodSpec) -> float:
    """Diagonal Gaussian log density of observation y given state h."""
    y = np.asarray(y, dtype=np.float64).ravel()
    h = np.asarray(h, dtype=np.float64).ravel()
    if y.shape != h.shape:
        raise ValueError(f"gaussian_loglik: shapes {y.shape} vs {h.shape} disagree")
    if y.size == 0:
        return 0.0
    var = spec.std_for(y.size) ** 2
    return float(np.sum(-0.5 * np.log(2.0 * math.pi * var) - (y - h) ** 2 / (2.0 * var)))


def log_uniform_bound(spec: LikelihoodSpec, seq_len: int) -> float:
    """K * log(max density): the log of the uniform bound on the K-step product."""
    if seq_len < 0:
        raise ValueError("sequence length must be non-negative")
    return seq_len * spec.log_bbar


def _aligned_observations(path: LatentPath, observations) -> np.ndarray:
    y = np.asarray(getattr(observations, "values", observations), dtype=np.float64)
    K = path.grid.n_points
    if y.ndim != 2 or y.shape[0] != K or y.shape[1] != path.state_dim:
        raise ValueError(
            f"observations of shape {y.shape} do not align with a path of "
            f"{K} points in dim {path.state_dim}"
        )
    return y


def sequence_logliks(path: LatentPath, observations, spec: LikelihoodSpec) -> np.ndarray:
    """Total log-likelihood of one observed sequence per MC sample, shape [S]."""
    y = _aligned_observations(path, observations)
    var = spec.std_for(path.state_dim) ** 2
    resid = path.states - y[None, :, :]
    quad = 0.5 * np.sum(resid**2 / var[None, None, :], axis=(1, 2))
    return path.grid.n_points * spec.log_bbar - quad


def empirical_risk(paths: Sequence[LatentPath], observations, spec: LikelihoodSpec) -> float:
    """MC estimate of the [0, 1]-valued empirical risk over the given sequences."""
    if len(paths) != len(observations) or not paths:
        raise ValueError("paths and observations must align and be non-empty")
    acc = 0.0
    count = 0
    for path, obs in zip(paths, observations):
        ll = sequence_logliks(path, obs, spec)
        expo = np.minimum(ll - path.grid.n_points * spec.log_bbar, 0.0)
        acc += float(np.sum(np.exp(expo)))
        count += ll.size
    return 1.0 - acc / count


def _logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    if not np.isfinite(m):
        raise DivergenceError("all likelihood products vanished (log-likelihoods are -inf)")
    return m + math.log(float(np.sum(np.exp(x - m))))


def mc_marginal_nll(paths: Sequence[LatentPath], observations, spec: LikelihoodSpec) -> float:
    """Negative log of the per-sequence MC marginal likelihood, averaged over sequences."""
    if len(paths) != len(observations) or not paths:
        raise ValueError("paths and observations must align and be non-empty")
    total = 0.0
    for path, obs in zip(paths, observations):
        ll = sequence_logliks(path, obs, spec)
        total += _logsumexp(ll) - math.log(ll.size)
    return -total / len(paths)


def jensen_nll(paths: Sequence[LatentPath], observations, spec: LikelihoodSpec) -> float:
    """Mean over (sequence, sample) of the negative per-sequence log-likelihood."""
    if len(paths) != len(observations) or not paths:
        raise ValueError("paths and observations must align and be non-empty")
    total = 0.0
    n_terms = 0
    for path, obs in zip(paths, observations):
        ll = sequence_logliks(path, obs, spec)
        total += float(np.sum(ll))
        n_terms += ll.size
    return -total / n_terms


def path_kl(path: LatentPath, diffusion: DiffusionSpec) -> float:
    """Discretized path-space KL contribution of one sequence.

    ``(1/S) sum_s sum_k 0.5 * f_k' diag(g^2)^{-1} f_k * dt_k`` where f is the
    neural part of the drift; a purely prior-driven path contributes zero.
    """
    fv = path.drift_values
    if fv is None or fv.size == 0:
        return 0.0
    var = diffusion.variance
    dts = path.grid.dts
    per_step = np.sum(fv**2 / var[None, None, :], axis=2) * dts[None, :]
    return float(0.5 * np.sum(per_step) / path.n_samples)


def complexity(kl_total: float, pac: PacConfig, split_delta: bool = True) -> float:
    """PAC complexity sqrt((KL + log(2*sqrt(N)) - log(delta'))/(2N)).

    With ``split_delta`` the confidence is halved (delta' = delta/2), which is
    the algebraically identical log(4*sqrt(N)/delta) form used at training
    time; otherwise the whole budget is spent here (delta' = delta).
    """
    if kl_total < -1e-9:
        raise ValueError(f"negative KL ({kl_total}) passed to complexity")
    kl = max(kl_total, 0.0)
    n = pac.n_sequences
    dprime = pac.delta / 2.0 if split_delta else pac.delta
    return math.sqrt((kl + math.log(2.0 * math.sqrt(n)) - math.log(dprime)) / (2.0 * n))


def hoeffding_slack(pac: PacConfig) -> float:
    """Sampling slack sqrt(log(2N/delta)/(2S)) from the per-sequence MC average."""
    return math.sqrt(math.log(2.0 * pac.n_sequences / pac.delta) / (2.0 * pac.mc_samples))


def _loglik_node(path: LatentPath, observations, spec: LikelihoodSpec) -> dc.Node:
    """Differentiable total log-likelihood of one sequence (summed over s, k, d)."""
    y = _aligned_observations(path, observations)
    S = path.n_samples
    var = spec.std_for(path.state_dim) ** 2
    weights = dc.constant(np.broadcast_to(0.5 / var, (S, path.state_dim)).copy())
    quad: dc.Node | None = None
    for k, h_node in enumerate(path.state_nodes):
        resid = dc.sub(h_node, dc.constant(np.broadcast_to(y[k], (S, path.state_dim)).copy()))
        term = dc.sum(dc.mul(dc.square(resid), weights))
        quad = term if quad is None else dc.add(quad, term)
    norm_const = S * path.grid.n_points * spec.log_bbar
    return dc.sub(dc.constant(norm_const), quad)


def _path_kl_node(path: LatentPath, diffusion: DiffusionSpec) -> dc.Node | None:
    if path.drift_nodes is None or not path.drift_nodes:
        return None
    S = path.n_samples
    var = diffusion.variance
    dts = path.grid.dts
    acc: dc.Node | None = None
    for k, f_node in enumerate(path.drift_nodes):
        w = np.broadcast_to(dts[k] / (2.0 * S * var), (S, path.state_dim)).copy()
        term = dc.sum(dc.mul(dc.square(f_node), dc.constant(w)))
        acc = term if acc is None else dc.add(acc, term)
    return acc


def training_loss(
    paths: Sequence[LatentPath],
    observations,
    spec: LikelihoodSpec,
    posterior_nodes: bnn.PosteriorNodes,
    weight_prior: bnn.WeightPrior,
    diffusion: DiffusionSpec,
    pac: PacConfig,
    *,
    include_complexity: bool = True,
) -> LossBreakdown:
    """Assemble the trainable objective over a batch of sequences.

    ``pac.n_sequences`` is the dataset-level N; when the batch is smaller the
    summed path KL is scaled by N/m, reducing to the full-batch loss when the
    batch covers the dataset.  With ``include_complexity`` off the objective
    is the plain Monte-Carlo negative log-likelihood (no PAC regularizer).
    """
    m = len(paths)
    if m == 0 or m != len(observations):
        raise ValueError("paths and observations must align and be non-empty")
    S = paths[0].n_samples
    if any(p.n_samples != S for p in paths):
        raise ValueError("all paths in a batch must share the sample count")
    if m > pac.n_sequences:
        raise ValueError("batch is larger than the configured dataset size")

    ll_sum: dc.Node | None = None
    total_points = 0
    for path, obs in zip(paths, observations):
        node = _loglik_node(path, obs, spec)
        ll_sum = node if ll_sum is None else dc.add(ll_sum, node)
        total_points += path.grid.n_points
    mll_node = dc.scalar_mul(ll_sum, 1.0 / (S * m))

    kl_scale = pac.n_sequences / m
    pkl_sum: dc.Node | None = None
    for path in paths:
        node = _path_kl_node(path, diffusion)
        if node is not None:
            pkl_sum = node if pkl_sum is None else dc.add(pkl_sum, node)
    kl_path_node = (
        dc.scalar_mul(pkl_sum, kl_scale) if pkl_sum is not None else dc.constant(0.0)
    )
    kl_w_node = bnn.weight_kl_node(posterior_nodes, weight_prior)
    kl_total_node = dc.add(kl_path_node, kl_w_node)

    if include_complexity:
        n = pac.n_sequences
        log_term = math.log(4.0 * math.sqrt(n) / pac.delta)
        inner = dc.scalar_mul(
            dc.add(kl_total_node, dc.constant(log_term)), 1.0 / (2.0 * n)
        )
        complexity_node = dc.sqrt(inner)
        total_node = dc.sub(complexity_node, mll_node)
        complexity_value = float(complexity_node.value)
    else:
        total_node = dc.neg(mll_node)
        complexity_value = 0.0

    kl_total = float(kl_total_node.value)
    risk = empirical_risk(paths, observations, spec)
    bound = risk + complexity(kl_total, pac, split_delta=True) + hoeffding_slack(pac)
    mll = float(mll_node.value)
    return LossBreakdown(
        mll=mll,
        kl_path=float(kl_path_node.value),
        kl_weights=float(kl_w_node.value),
        complexity=complexity_value,
        total=float(total_node.value),
        pac_bound_linear=bound,
        risk_empirical=risk,
        nll_per_step=-float(ll_sum.value) / (S * total_points),
        total_node=total_node,
    )


@dataclass
class TiedGradientAudit:
    """Fractions of optimizer steps on which the linear-risk bound moved down."""

    decrease_fraction: float
    non_increase_fraction: float
    n_steps: int


def tied_gradient_audit(trace: Sequence[tuple[float, float]]) -> TiedGradientAudit:
    """Audit a per-step trace of (training loss, linear-risk bound) pairs.

    Reports the fraction of transitions on which the bound strictly decreased
    and the fraction on which it did not increase.
    """
    if len(trace) < 2:
        raise ValueError("tied-gradient audit needs at least two recorded steps")
    bounds = np.asarray([b for _, b in trace], dtype=np.float64)
    diffs = np.diff(bounds)
    return TiedGradientAudit(
        decrease_fraction=float(np.mean(diffs < 0.0)),
        non_increase_fraction=float(np.mean(diffs <= 0.0)),
        n_steps=len(trace),
    )
