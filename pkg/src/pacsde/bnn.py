"""Bayesian MLP drift network with a factorized Gaussian weight posterior.

Layers are sampled with the local reparameterization trick: instead of
drawing weights, the pre-activation of each layer is drawn from its implied
Gaussian, which keeps gradient variance low.  Variances are parameterized in
log space so unconstrained optimization preserves positivity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

HIDDEN_ACTIVATIONS = ("softplus", "relu")


@dataclass
class WeightPrior:
    """Isotropic Gaussian prior applied to every weight and bias."""

    mean: float = 0.0
    variance: float = 1.0

    def __post_init__(self):
        if not self.variance > 0.0:
            raise ValueError("prior variance must be positive")


@dataclass(frozen=True)
class MlpArch:
    """Layer widths and activation of the drift net; output is identity."""

    layer_widths: tuple[int, ...]
    hidden_activation: str = "softplus"
    time_input: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ValueError("architecture needs at least input and output widths")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError("layer widths must be positive")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.hidden_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def state_dim(self) -> int:
        return self.layer_widths[-1]

    def validate_state_dim(self, state_dim: int) -> None:
        want_in = state_dim + (1 if self.time_input else 0)
        if self.layer_widths[0] != want_in:
            raise ValueError(
                f"first layer width {self.layer_widths[0]} does not match "
                f"drift input dim {want_in}"
            )
        if self.layer_widths[-1] != state_dim:
            raise ValueError(
                f"last layer width {self.layer_widths[-1]} does not match state dim {state_dim}"
            )


@dataclass
class LayerPosterior:
    """Gaussian posterior of one dense layer: means and log-variances."""

    weight_mean: np.ndarray
    weight_logvar: np.ndarray
    bias_mean: np.ndarray
    bias_logvar: np.ndarray

    def __post_init__(self):
        for arr in (self.weight_mean, self.weight_logvar, self.bias_mean, self.bias_logvar):
            if not np.all(np.isfinite(arr)):
                raise ValueError("posterior parameters must be finite")
        din, dout = self.weight_mean.shape
        if self.weight_logvar.shape != (din, dout):
            raise ValueError("weight mean/logvar shapes disagree")
        if self.bias_mean.shape != (dout,) or self.bias_logvar.shape != (dout,):
            raise ValueError("bias mean/logvar shapes disagree with layer width")


@dataclass
class WeightPosterior:
    """Per-layer factorized Gaussian over all drift-net weights and biases."""

    arch: MlpArch
    layers: list[LayerPosterior]

    def __post_init__(self):
        widths = self.arch.layer_widths
        if len(self.layers) != self.arch.n_layers:
            raise ValueError("layer count does not match architecture")
        for i, lp in enumerate(self.layers):
            if lp.weight_mean.shape != (widths[i], widths[i + 1]):
                raise ValueError(f"layer {i} has shape {lp.weight_mean.shape}, "
                                 f"expected {(widths[i], widths[i + 1])}")

    @property
    def n_parameters(self) -> int:
        """Count of stored reals (means and log-variances)."""
        total = 0
        for lp in self.layers:
            total += 2 * (lp.weight_mean.size + lp.bias_mean.size)
        return total

    def to_flat_dict(self) -> dict[str, np.ndarray]:
        """Live references keyed ``layer{i}.{M|L|b|c}`` (checkpoint keys)."""
        out: dict[str, np.ndarray] = {}
        for i, lp in enumerate(self.layers):
            out[f"layer{i}.M"] = lp.weight_mean
            out[f"layer{i}.L"] = lp.weight_logvar
            out[f"layer{i}.b"] = lp.bias_mean
            out[f"layer{i}.c"] = lp.bias_logvar
        return out

    @classmethod
    def from_flat_dict(cls, arch: MlpArch, arrays: dict[str, np.ndarray]) -> "WeightPosterior":
        layers = []
        for i in range(arch.n_layers):
            try:
                layers.append(
                    LayerPosterior(
                        weight_mean=np.array(arrays[f"layer{i}.M"], dtype=np.float64),
                        weight_logvar=np.array(arrays[f"layer{i}.L"], dtype=np.float64),
                        bias_mean=np.array(arrays[f"layer{i}.b"], dtype=np.float64),
                        bias_logvar=np.array(arrays[f"layer{i}.c"], dtype=np.float64),
                    )
                )
            except KeyError as exc:
                raise KeyError(f"missing checkpoint key for layer {i}: {exc}") from None
        return cls(arch=arch, layers=layers)


INIT_LOGVAR = -6.0


def init_posterior(arch: MlpArch, seed) -> WeightPosterior:
    """Xavier-style Gaussian means, log-variances at a small constant."""
    rng = np.random.default_rng(seed)
    layers = []
    for din, dout in zip(arch.layer_widths[:-1], arch.layer_widths[1:]):
        std = math.sqrt(2.0 / (din + dout))
        layers.append(
            LayerPosterior(
                weight_mean=rng.normal(0.0, std, size=(din, dout)),
                weight_logvar=np.full((din, dout), INIT_LOGVAR),
                bias_mean=rng.normal(0.0, std, size=dout),
                bias_logvar=np.full(dout, INIT_LOGVAR),
            )
        )
    return WeightPosterior(arch=arch, layers=layers)


@dataclass
class LayerNodes:
    """Lifted (differentiable) view of one layer, with cached variance nodes."""

    M: dc.Node
    L: dc.Node
    b: dc.Node
    c: dc.Node
    weight_var: dc.Node
    bias_var: dc.Node


@dataclass
class PosteriorNodes:
    """Lifted posterior: leaf nodes shared by every graph built this step."""

    posterior: WeightPosterior
    layers: list[LayerNodes]
    params: dict[str, dc.Node] = field(default_factory=dict)

    @property
    def arch(self) -> MlpArch:
        return self.posterior.arch


def lift(posterior: WeightPosterior) -> PosteriorNodes:
    """Wrap posterior arrays in leaf nodes and precompute variance nodes."""
    layers = []
    params: dict[str, dc.Node] = {}
    for i, lp in enumerate(posterior.layers):
        m = dc.leaf(lp.weight_mean, name=f"layer{i}.M")
        l = dc.leaf(lp.weight_logvar, name=f"layer{i}.L")
        b = dc.leaf(lp.bias_mean, name=f"layer{i}.b")
        c = dc.leaf(lp.bias_logvar, name=f"layer{i}.c")
        layers.append(
            LayerNodes(M=m, L=l, b=b, c=c, weight_var=dc.exp(l), bias_var=dc.exp(c))
        )
        params.update({n.name: n for n in (m, l, b, c)})
    return PosteriorNodes(posterior=posterior, layers=layers, params=params)


def sample_layer_output(x: dc.Node, layer: LayerNodes, noise) -> dc.Node:
    """Locally reparameterized layer output ``mu + sigma * noise``.

    ``mu = x M + b`` and ``sigma^2 = x^2 exp(L) + exp(c)``; the caller supplies
    standard-normal noise of shape ``[batch, out]`` from outside the tape.
    """
    mu = dc.add_bias(dc.matmul(x, layer.M), layer.b)
    var = dc.add_bias(dc.matmul(dc.square(x), layer.weight_var), layer.bias_var)
    sigma = dc.sqrt(var)
    noise = noise if isinstance(noise, dc.Node) else dc.constant(noise)
    return dc.add(mu, dc.mul(sigma, noise))


def drift_forward(h: dc.Node, t: float, nodes: PosteriorNodes, layer_noise) -> dc.Node:
    """Full MLP pass with one independent noise tensor per layer."""
    arch = nodes.arch
    if len(layer_noise) != arch.n_layers:
        raise ValueError(
            f"expected {arch.n_layers} noise tensors, got {len(layer_noise)}"
        )
    x = h
    if arch.time_input:
        x = dc.append_const_col(x, t)
    activation = dc.softplus if arch.hidden_activation == "softplus" else dc.relu
    last = arch.n_layers - 1
    for i, layer in enumerate(nodes.layers):
        x = sample_layer_output(x, layer, layer_noise[i])
        if i != last:
            x = activation(x)
    return x


def draw_layer_noise(arch: MlpArch, n_rows: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One standard-normal tensor per layer for a single forward pass."""
    return [rng.standard_normal((n_rows, w)) for w in arch.layer_widths[1:]]


def weight_kl(posterior: WeightPosterior, prior: WeightPrior | None = None) -> float:
    """Closed-form KL from the factorized posterior to the isotropic prior."""
    prior = prior or WeightPrior()
    m0, v0 = prior.mean, prior.variance
    total = 0.0
    for lp in posterior.layers:
        for mean, logvar in ((lp.weight_mean, lp.weight_logvar),
                             (lp.bias_mean, lp.bias_logvar)):
            v = np.exp(logvar)
            total += 0.5 * float(
                np.sum(v / v0 + (mean - m0) ** 2 / v0 - 1.0 + math.log(v0) - logvar)
            )
    return total


def weight_kl_node(nodes: PosteriorNodes, prior: WeightPrior | None = None) -> dc.Node:
    """Differentiable version of :func:`weight_kl` over the lifted leaves."""
    prior = prior or WeightPrior()
    m0, v0 = prior.mean, prior.variance
    acc: dc.Node | None = None
    const_part = 0.0
    for layer in nodes.layers:
        for mean, logvar, var in (
            (layer.M, layer.L, layer.weight_var),
            (layer.b, layer.c, layer.bias_var),
        ):
            centered = mean if m0 == 0.0 else dc.sub(mean, dc.constant(np.full(mean.shape, m0)))
            term = dc.add(
                dc.scalar_mul(dc.sum(var), 0.5 / v0),
                dc.add(
                    dc.scalar_mul(dc.sum(dc.square(centered)), 0.5 / v0),
                    dc.scalar_mul(dc.sum(logvar), -0.5),
                ),
            )
            const_part += 0.5 * mean.value.size * (math.log(v0) - 1.0)
            acc = term if acc is None else dc.add(acc, term)
    assert acc is not None
    return dc.add(acc, dc.constant(const_part))
