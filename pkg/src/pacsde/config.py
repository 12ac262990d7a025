"""Experiment configuration: schema, validation, and file loading."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VARIANTS = ("e_bayes", "e_pac_bayes", "e_bayes_hybrid", "e_pac_bayes_hybrid")
PAC_VARIANTS = ("e_pac_bayes", "e_pac_bayes_hybrid")
HYBRID_VARIANTS = ("e_bayes_hybrid", "e_pac_bayes_hybrid")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def _require_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


@dataclass
class DatasetConfig:
    system: str | None = None
    seed: int = 0
    train_path: str | None = None
    test_path: str | None = None

    def __post_init__(self):
        from_files = self.train_path is not None and self.test_path is not None
        if self.system is None and not from_files:
            raise ConfigError("dataset needs either a system name or train/test paths")
        if self.system is not None and self.system not in ("lorenz", "lotka_volterra"):
            raise ConfigError(f"unknown dataset system {self.system!r}")


@dataclass
class PriorConfig:
    kind: str = "zero"
    params: list[float] = field(default_factory=list)
    gamma: list[float] = field(default_factory=list)
    perturb_std: float = 0.0
    perturb_seed: int = 0
    perturb_component: int | None = None


@dataclass
class ExperimentConfig:
    variant: str
    dataset: DatasetConfig
    layer_widths: tuple[int, ...]
    activation: str = "softplus"
    time_input: bool = False
    prior: PriorConfig | None = None
    delta: float = 0.05
    obs_std: float | list[float] = 1.0
    sigma_min: float = 1e-3
    diffusion_scale: float | list[float] = 1.0
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 2
    mc_samples: int = 8
    data_seed: int = 1
    init_seed: int = 2
    training_seed: int = 3
    eval_samples: int = 32
    eval_horizon: int | None = None
    eval_seed: int = 0
    threads: int = 1
    checkpoint_every: int = 25

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if not 0.0 < self.delta <= 1.0:
            raise ConfigError("delta must lie in (0, 1]")
        if self.is_hybrid:
            if self.prior is None or self.prior.kind == "zero":
                raise ConfigError("hybrid variants require a non-zero prior spec")
            gamma = np.asarray(self.prior.gamma, dtype=float)
            if gamma.size and not gamma.any():
                raise ConfigError("hybrid variants require a non-zero gamma mask")
        for name in ("epochs", "batch_size", "mc_samples", "eval_samples", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.lr <= 0.0:
            raise ConfigError("learning rate must be positive")
        for name in ("data_seed", "init_seed", "training_seed", "eval_seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    @property
    def is_pac(self) -> bool:
        return self.variant in PAC_VARIANTS

    @property
    def is_hybrid(self) -> bool:
        return self.variant in HYBRID_VARIANTS


_TOP_KEYS = {
    "variant", "dataset", "arch", "prior", "pac", "likelihood",
    "diffusion_scale", "optimizer", "training", "seeds", "evaluation", "threads",
}


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration root must be a mapping")
    _require_keys(raw, _TOP_KEYS, "configuration")
    try:
        variant = raw["variant"]
        ds_raw = dict(raw["dataset"])
        arch_raw = dict(raw["arch"])
    except KeyError as exc:
        raise ConfigError(f"missing required section {exc}") from None

    _require_keys(ds_raw, {"system", "seed", "train_path", "test_path"}, "dataset")
    _require_keys(arch_raw, {"layer_widths", "activation", "time_input"}, "arch")

    prior = None
    if raw.get("prior") is not None:
        p_raw = dict(raw["prior"])
        _require_keys(
            p_raw,
            {"kind", "params", "gamma", "perturb_std", "perturb_seed", "perturb_component"},
            "prior",
        )
        prior = PriorConfig(**p_raw)

    pac_raw = dict(raw.get("pac", {}))
    _require_keys(pac_raw, {"delta"}, "pac")
    lik_raw = dict(raw.get("likelihood", {}))
    _require_keys(lik_raw, {"obs_std", "sigma_min"}, "likelihood")
    opt_raw = dict(raw.get("optimizer", {}))
    _require_keys(opt_raw, {"lr"}, "optimizer")
    train_raw = dict(raw.get("training", {}))
    _require_keys(train_raw, {"epochs", "batch_size", "mc_samples", "checkpoint_every"},
                  "training")
    seeds_raw = dict(raw.get("seeds", {}))
    _require_keys(seeds_raw, {"data", "init", "training", "eval"}, "seeds")
    eval_raw = dict(raw.get("evaluation", {}))
    _require_keys(eval_raw, {"samples", "horizon"}, "evaluation")

    try:
        dataset = DatasetConfig(**ds_raw)
        return ExperimentConfig(
            variant=variant,
            dataset=dataset,
            layer_widths=tuple(arch_raw["layer_widths"]),
            activation=arch_raw.get("activation", "softplus"),
            time_input=bool(arch_raw.get("time_input", False)),
            prior=prior,
            delta=float(pac_raw.get("delta", 0.05)),
            obs_std=lik_raw.get("obs_std", 1.0),
            sigma_min=float(lik_raw.get("sigma_min", 1e-3)),
            diffusion_scale=raw.get("diffusion_scale", 1.0),
            lr=float(opt_raw.get("lr", 1e-3)),
            epochs=int(train_raw.get("epochs", 100)),
            batch_size=int(train_raw.get("batch_size", 2)),
            mc_samples=int(train_raw.get("mc_samples", 8)),
            checkpoint_every=int(train_raw.get("checkpoint_every", 25)),
            data_seed=int(seeds_raw.get("data", 1)),
            init_seed=int(seeds_raw.get("init", 2)),
            training_seed=int(seeds_raw.get("training", 3)),
            eval_seed=int(seeds_raw.get("eval", 0)),
            eval_samples=int(eval_raw.get("samples", 32)),
            eval_horizon=(None if eval_raw.get("horizon") in (None, "")
                          else int(eval_raw["horizon"])),
            threads=int(raw.get("threads", 1)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib  # py>=3.11
        except ModuleNotFoundError:
            try:
                import tomli as tomllib
            except ModuleNotFoundError:
                raise ConfigError("TOML configs need the 'tomli' package on this "
                                  "Python; use JSON instead") from None
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    else:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)
