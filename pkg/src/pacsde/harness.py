"""Training loop, evaluation, ablation harness, convergence study, self-checks.

Outputs per training run:
  metrics.csv   one row per optimizer step (deterministic given seeds)
  epochs.csv    per-epoch means plus wall-clock seconds
  checkpoint_epoch*.ckpt / checkpoint_final.ckpt
  run.json      run manifest
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bnn, checkpoint, datagen, optim, pacloss, priors, sde
from . import diffcore as dc
from .config import ExperimentConfig, PriorConfig

METRICS_HEADER = "step,mll,kl_path,kl_weights,complexity,total,pac_bound_linear,risk_empirical"
EPOCHS_HEADER = (
    "epoch,mll,kl_path,kl_weights,complexity,total,pac_bound_linear,"
    "risk_empirical,nll_per_step,wall_seconds"
)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def variant_flags(variant: str) -> tuple[bool, bool]:
    """(pac_enabled, hybrid_enabled) for one of the four training variants."""
    return ("pac" in variant, "hybrid" in variant)


def build_arch(config: ExperimentConfig) -> bnn.MlpArch:
    return bnn.MlpArch(
        layer_widths=config.layer_widths,
        hidden_activation=config.activation,
        time_input=config.time_input,
    )


def build_prior(config: ExperimentConfig, state_dim: int):
    """Instantiate the (possibly perturbed) prior drift and mask, or (None, None)."""
    if not config.is_hybrid:
        return None, None
    pc = config.prior
    base = np.asarray(pc.params, dtype=np.float64)
    if base.size == 0:
        defaults = {"lorenz": priors.LORENZ_PARAMS,
                    "lotka_volterra": priors.LOTKA_VOLTERRA_PARAMS}
        base = np.asarray(defaults[pc.kind])
    params = priors.perturb_params(base, pc.perturb_std, pc.perturb_seed,
                                   component=pc.perturb_component)
    ode = priors.PriorOde(kind=pc.kind, params=params)
    if ode.dim != state_dim:
        raise ValueError(f"prior dim {ode.dim} does not match data dim {state_dim}")
    gamma = (priors.GammaMask(np.asarray(pc.gamma, dtype=np.float64))
             if pc.gamma else priors.GammaMask.ones(state_dim))
    return ode, gamma


def build_likelihood(config: ExperimentConfig, dim: int) -> pacloss.LikelihoodSpec:
    return pacloss.LikelihoodSpec(config.obs_std, dim=dim, sigma_min=config.sigma_min)


def build_diffusion(config: ExperimentConfig, dim: int) -> sde.DiffusionSpec:
    scale = np.asarray(config.diffusion_scale, dtype=np.float64).ravel()
    if scale.size == 1:
        return sde.DiffusionSpec.isotropic(float(scale[0]), dim)
    return sde.DiffusionSpec(scale)


def prepare_data(config: ExperimentConfig) -> tuple[datagen.Dataset, datagen.Dataset]:
    ds = config.dataset
    if ds.train_path is not None and ds.test_path is not None:
        return (datagen.read_dataset(ds.train_path, "train"),
                datagen.read_dataset(ds.test_path, "test"))
    return datagen.GENERATORS[ds.system](config.data_seed)


@dataclass
class TrainingResult:
    out_dir: Path
    checkpoint: Path
    metrics_csv: Path
    epochs_csv: Path
    n_steps: int
    final: pacloss.LossBreakdown | None


def _checkpoint_meta(config: ExperimentConfig, prior, gamma, lik, diffusion, epoch: int) -> dict:
    return {
        "variant": config.variant,
        "epoch": epoch,
        "obs_std": [float(v) for v in lik.obs_std],
        "sigma_min": lik.sigma_min,
        "diffusion_scale": [float(v) for v in diffusion.scale],
        "prior": None if prior is None else {
            "kind": prior.kind,
            "params": [float(v) for v in prior.params],
            "gamma": [float(v) for v in gamma.values],
        },
    }


def _rollout_batch(sequences, lift, prior, gamma, diffusion, n_samples, seeds, threads):
    """Simulate one path per sequence; reductions stay in list order."""
    drift = sde.HybridDriftSpec(neural=lift, prior=prior, gamma=gamma)

    def one(args):
        seq, seed = args
        return sde.simulate(seq.values[0], seq.grid, drift, diffusion, n_samples, seed)

    items = list(zip(sequences, seeds))
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, items))
    return [one(item) for item in items]


def run_training(config: ExperimentConfig, out_dir) -> TrainingResult:
    """Train one variant per its objective; returns paths to artifacts.

    On divergence the most recent checkpoint is kept and the error re-raised.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, _ = prepare_data(config)
    state_dim = train.dim
    arch = build_arch(config)
    arch.validate_state_dim(state_dim)
    prior, gamma = build_prior(config, state_dim)
    lik = build_likelihood(config, state_dim)
    diffusion = build_diffusion(config, state_dim)
    pac = pacloss.PacConfig(
        delta=config.delta,
        n_sequences=train.n_sequences,
        mc_samples=config.mc_samples,
        seq_len=train.sequences[0].length,
    )
    pac_on, _ = variant_flags(config.variant)
    weight_prior = bnn.WeightPrior()

    posterior = bnn.init_posterior(arch, config.init_seed)
    params = posterior.to_flat_dict()
    adam = optim.init_adam(params, config.lr)

    metrics_path = out_dir / "metrics.csv"
    epochs_path = out_dir / "epochs.csv"
    metrics_rows = [METRICS_HEADER]
    epoch_rows = [EPOCHS_HEADER]
    last_checkpoint = checkpoint.checkpoint_path(out_dir, "final")
    step = 0
    final_bd: pacloss.LossBreakdown | None = None
    diverged: sde.DivergenceError | None = None

    def save(label: str, epoch: int) -> Path:
        path = checkpoint.checkpoint_path(out_dir, label)
        checkpoint.save_training_state(
            path, posterior, adam,
            meta=_checkpoint_meta(config, prior, gamma, lik, diffusion, epoch),
        )
        return path

    n_seq = train.n_sequences
    try:
        with dc.unchecked():
            for epoch in range(config.epochs):
                t0 = time.perf_counter()
                order = np.random.default_rng(
                    np.random.SeedSequence((config.training_seed, epoch))
                ).permutation(n_seq)
                epoch_bds = []
                for lo in range(0, n_seq, config.batch_size):
                    batch_idx = order[lo:lo + config.batch_size]
                    sequences = [train.sequences[int(i)] for i in batch_idx]
                    seeds = [
                        np.random.SeedSequence((config.training_seed, epoch, int(i)))
                        for i in batch_idx
                    ]
                    lift = bnn.lift(posterior)
                    paths = _rollout_batch(sequences, lift, prior, gamma, diffusion,
                                           config.mc_samples, seeds, config.threads)
                    bd = pacloss.training_loss(
                        paths, sequences, lik, lift, weight_prior, diffusion, pac,
                        include_complexity=pac_on,
                    )
                    grads_by_node = dc.backward(bd.total_node,
                                                leaves=list(lift.params.values()))
                    grads = {name: grads_by_node[node]
                             for name, node in lift.params.items()}
                    optim.adam_step(params, grads, adam)
                    step += 1
                    metrics_rows.append(",".join(
                        [str(step)] + [_fmt(getattr(bd, f))
                                       for f in pacloss.LossBreakdown.CSV_FIELDS]
                    ))
                    epoch_bds.append(bd)
                    final_bd = bd
                wall = time.perf_counter() - t0
                means = [
                    float(np.mean([getattr(b, f) for b in epoch_bds]))
                    for f in (*pacloss.LossBreakdown.CSV_FIELDS, "nll_per_step")
                ]
                epoch_rows.append(",".join(
                    [str(epoch + 1)] + [_fmt(v) for v in means] + [_fmt(wall)]
                ))
                if (epoch + 1) % config.checkpoint_every == 0 and epoch + 1 < config.epochs:
                    save(f"epoch{epoch + 1:04d}", epoch + 1)
        last_checkpoint = save("final", config.epochs)
    except sde.DivergenceError as exc:
        # parameters are still finite; keep them under a separate label so any
        # periodic "good" checkpoint survives untouched
        diverged = exc
        last_checkpoint = save("diverged", -1)
    finally:
        metrics_path.write_text("\n".join(metrics_rows) + "\n")
        epochs_path.write_text("\n".join(epoch_rows) + "\n")
        manifest = {
            "variant": config.variant,
            "steps": step,
            "epochs": config.epochs,
            "divergence": None if diverged is None else str(diverged),
            "checkpoint": last_checkpoint.name,
        }
        (out_dir / "run.json").write_text(json.dumps(manifest, indent=2) + "\n")
    if diverged is not None:
        raise diverged
    return TrainingResult(
        out_dir=out_dir,
        checkpoint=last_checkpoint,
        metrics_csv=metrics_path,
        epochs_csv=epochs_path,
        n_steps=step,
        final=final_bd,
    )


@dataclass
class EvalReport:
    mse: float
    nll: float
    per_sample_mse: float
    horizon: int
    n_sequences: int
    n_samples: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def evaluate_model(
    posterior: bnn.WeightPosterior,
    prior: priors.PriorOde | None,
    gamma: priors.GammaMask | None,
    lik: pacloss.LikelihoodSpec,
    diffusion: sde.DiffusionSpec,
    dataset: datagen.Dataset,
    n_samples: int,
    horizon: int | None = None,
    seed=0,
) -> EvalReport:
    """Forecast MSE of the MC-mean trajectory plus marginal NLL on a dataset.

    Each test sequence is rolled from its first observation for ``horizon``
    grid points (defaulting to the full sequence).
    """
    if not dataset.sequences:
        raise ValueError("cannot evaluate on an empty dataset")
    lift = bnn.lift(posterior)
    drift = sde.HybridDriftSpec(neural=lift, prior=prior, gamma=gamma)
    sq_mean_err = []
    sq_sample_err = []
    nll_terms = []
    with dc.unchecked():
        for idx, seq in enumerate(dataset.sequences):
            h = seq.length if horizon is None else int(horizon)
            if not 1 <= h <= seq.length:
                raise ValueError(
                    f"horizon {h} outside [1, {seq.length}] for sequence {seq.seq_id}"
                )
            grid = sde.TimeGrid(seq.grid.times[:h])
            target = seq.values[:h]
            path = sde.simulate(
                seq.values[0], grid, drift, diffusion, n_samples,
                np.random.SeedSequence((int(seed), idx)),
            )
            states = path.states
            mean_traj = states.mean(axis=0)
            sq_mean_err.append((mean_traj - target) ** 2)
            sq_sample_err.append((states - target[None, :, :]) ** 2)
            clipped = datagen.ObservationSequence(target, grid, seq.seq_id)
            lls = pacloss.sequence_logliks(path, clipped, lik)
            m = float(np.max(lls))
            lse = m + math.log(float(np.sum(np.exp(lls - m))))
            nll_terms.append(-(lse - math.log(n_samples)))
    return EvalReport(
        mse=float(np.mean(np.concatenate([a.ravel() for a in sq_mean_err]))),
        nll=float(np.mean(nll_terms)),
        per_sample_mse=float(np.mean(np.concatenate([a.ravel() for a in sq_sample_err]))),
        horizon=h,
        n_sequences=dataset.n_sequences,
        n_samples=n_samples,
    )


def _model_from_checkpoint(checkpoint_path):
    posterior, _, meta = checkpoint.load_training_state(checkpoint_path)
    prior = None
    gamma = None
    if meta.get("prior"):
        prior = priors.PriorOde(kind=meta["prior"]["kind"],
                                params=np.asarray(meta["prior"]["params"]))
        gamma = priors.GammaMask(np.asarray(meta["prior"]["gamma"]))
    dim = posterior.arch.state_dim
    lik = pacloss.LikelihoodSpec(np.asarray(meta.get("obs_std", [1.0] * dim)),
                                 sigma_min=float(meta.get("sigma_min", 1e-3)))
    diffusion = sde.DiffusionSpec(np.asarray(meta.get("diffusion_scale", [1.0] * dim)))
    return posterior, prior, gamma, lik, diffusion


def evaluate(checkpoint_path, dataset: datagen.Dataset, n_samples: int,
             horizon: int | None = None, seed=0) -> EvalReport:
    """Evaluate a checkpointed model on a dataset (model context from metadata)."""
    posterior, prior, gamma, lik, diffusion = _model_from_checkpoint(checkpoint_path)
    return evaluate_model(posterior, prior, gamma, lik, diffusion, dataset,
                          n_samples, horizon, seed)


def export_forecast(checkpoint_path, sequence: datagen.ObservationSequence,
                    out_csv, n_trajectories: int = 21, horizon: int | None = None,
                    seed=0) -> Path:
    """Write forecast mean and +/-2 std envelope against one observed sequence."""
    posterior, prior, gamma, _, diffusion = _model_from_checkpoint(checkpoint_path)
    h = sequence.length if horizon is None else int(horizon)
    if not 1 <= h <= sequence.length:
        raise ValueError(f"horizon {h} outside [1, {sequence.length}]")
    grid = sde.TimeGrid(sequence.grid.times[:h])
    lift = bnn.lift(posterior)
    drift = sde.HybridDriftSpec(neural=lift, prior=prior, gamma=gamma)
    with dc.unchecked():
        path = sde.simulate(sequence.values[0], grid, drift, diffusion,
                            n_trajectories, np.random.SeedSequence((int(seed), 0)))
    states = path.states
    mean = states.mean(axis=0)
    std = states.std(axis=0)
    dim = sequence.dim
    header = ["t"]
    for d in range(dim):
        header += [f"obs{d}", f"mean{d}", f"std{d}"]
    lines = [",".join(header)]
    for k in range(h):
        row = [_fmt(grid.times[k])]
        for d in range(dim):
            row += [_fmt(sequence.values[k, d]), _fmt(mean[k, d]), _fmt(std[k, d])]
        lines.append(",".join(row))
    out_csv = Path(out_csv)
    out_csv.write_text("\n".join(lines) + "\n")
    return out_csv


ABLATION_ROWS = (
    {"label": "none", "gamma": None, "component": None,
     "variants": ("e_bayes", "e_pac_bayes")},
    {"label": "eq1", "gamma": (1.0, 0.0, 0.0), "component": 0,
     "variants": ("e_bayes_hybrid", "e_pac_bayes_hybrid")},
    {"label": "eq2", "gamma": (0.0, 1.0, 0.0), "component": 1,
     "variants": ("e_bayes_hybrid", "e_pac_bayes_hybrid")},
    {"label": "eq3", "gamma": (0.0, 0.0, 1.0), "component": 2,
     "variants": ("e_bayes_hybrid", "e_pac_bayes_hybrid")},
    {"label": "full", "gamma": (1.0, 1.0, 1.0), "component": None,
     "variants": ("e_bayes_hybrid", "e_pac_bayes_hybrid")},
)

ABLATION_HEADER = "prior_row,variant,mse_mean,mse_stderr,nll_mean,nll_stderr,n_ok"


def _ablation_config(base: ExperimentConfig, variant: str, row: dict, rep: int,
                     perturb_std: float) -> ExperimentConfig:
    prior = None
    if "hybrid" in variant:
        kind = base.dataset.system or (base.prior.kind if base.prior else None)
        if kind is None:
            raise ValueError("ablation rows with priors need a known dataset system")
        prior = PriorConfig(
            kind=kind,
            params=[],
            gamma=list(row["gamma"]),
            perturb_std=perturb_std,
            perturb_seed=7000 + rep,
            perturb_component=row["component"],
        )
    return dataclasses.replace(
        base,
        variant=variant,
        prior=prior,
        data_seed=base.data_seed + rep,
        init_seed=base.init_seed + rep,
        training_seed=base.training_seed + rep,
    )


def run_ablation(base: ExperimentConfig, repetitions: int, out_dir,
                 rows=ABLATION_ROWS, perturb_std: float = 1.0) -> list[dict]:
    """Train/evaluate each (prior row, variant) over paired repetitions.

    A diverged repetition is recorded, warned about, and excluded from the
    summary statistics.
    """
    if repetitions < 2:
        raise ValueError("ablation needs at least 2 repetitions")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    test_cache: dict[int, datagen.Dataset] = {}
    summary = []
    for row in rows:
        for variant in row["variants"]:
            mses, nlls, failures = [], [], 0
            for rep in range(repetitions):
                cfg = _ablation_config(base, variant, row, rep, perturb_std)
                run_dir = out_dir / row["label"] / variant / f"rep{rep}"
                try:
                    result = run_training(cfg, run_dir)
                    if cfg.data_seed not in test_cache:
                        test_cache[cfg.data_seed] = prepare_data(cfg)[1]
                    report = evaluate(
                        result.checkpoint, test_cache[cfg.data_seed],
                        cfg.eval_samples, cfg.eval_horizon, cfg.eval_seed,
                    )
                    mses.append(report.mse)
                    nlls.append(report.nll)
                except sde.DivergenceError as exc:
                    failures += 1
                    print(f"warning: {row['label']}/{variant}/rep{rep} diverged: {exc}")
            n_ok = len(mses)
            entry = {
                "prior_row": row["label"],
                "variant": variant,
                "mse_mean": float(np.mean(mses)) if n_ok else float("nan"),
                "mse_stderr": float(np.std(mses, ddof=1) / math.sqrt(n_ok)) if n_ok > 1 else 0.0,
                "nll_mean": float(np.mean(nlls)) if n_ok else float("nan"),
                "nll_stderr": float(np.std(nlls, ddof=1) / math.sqrt(n_ok)) if n_ok > 1 else 0.0,
                "n_ok": n_ok,
            }
            summary.append(entry)
    lines = [ABLATION_HEADER]
    for e in summary:
        lines.append(",".join([
            e["prior_row"], e["variant"], _fmt(e["mse_mean"]), _fmt(e["mse_stderr"]),
            _fmt(e["nll_mean"]), _fmt(e["nll_stderr"]), str(e["n_ok"]),
        ]))
    (out_dir / "ablation_summary.csv").write_text("\n".join(lines) + "\n")
    return summary


CONVERGENCE_DTS = tuple(2.0**-k for k in range(4, 10))


def run_convergence(oracle_name: str, out_path=None, n_paths: int = 256,
                    seed: int = 1234, base_dt: float = 1.0) -> dict:
    """Strong-convergence slope study for one oracle; optionally writes JSON."""
    if oracle_name not in sde.ORACLES:
        raise ValueError(f"unknown oracle {oracle_name!r}; choose from {sorted(sde.ORACLES)}")
    oracle = sde.ORACLES[oracle_name]()
    dts = [base_dt * dt for dt in CONVERGENCE_DTS]
    report = sde.convergence_study(oracle, dts, n_paths, seed).to_dict()
    if out_path is not None:
        Path(out_path).write_text(json.dumps(report, indent=2) + "\n")
    return report


# --- self-checks ---------------------------------------------------------------

def _check_op_gradients():
    rng = np.random.default_rng(0)
    unary = [dc.square, dc.exp, dc.softplus, dc.relu, dc.neg, dc.sum, dc.mean]
    for op in unary:
        for _ in range(10):
            x0 = rng.normal(size=(2, 3))
            probe = rng.normal(size=(2, 3))

            def f(x, op=op, probe=probe):
                out = op(x)
                if out.value.shape == ():
                    return out
                return dc.sum(dc.mul(out, dc.constant(probe)))

            err = dc.finite_diff_check(f, x0, 1e-5)
            assert err < 1e-4, f"{op.__name__}: {err}"


def _check_shared_subexpression():
    x = dc.leaf(np.array([1.0, 2.0]))
    g = dc.square(x)
    loss = dc.sum(dc.add(g, g))
    grads = dc.backward(loss)
    assert np.array_equal(grads[x], 4.0 * x.value)


def _check_weight_kl():
    arch = bnn.MlpArch((1, 1))
    post = bnn.init_posterior(arch, 0)
    post.layers[0].weight_mean[:] = 0.0
    post.layers[0].weight_logvar[:] = 0.0
    post.layers[0].bias_mean[:] = 0.0
    post.layers[0].bias_logvar[:] = 0.0
    assert abs(bnn.weight_kl(post)) < 1e-15
    post.layers[0].weight_mean[:] = 1.0
    assert abs(bnn.weight_kl(post) - 0.5) < 1e-12


def _check_reparam_moments():
    rng = np.random.default_rng(3)
    arch = bnn.MlpArch((2, 3))
    post = bnn.init_posterior(arch, 3)
    post.layers[0].weight_mean[:] = rng.uniform(0.5, 1.0, size=(2, 3))
    post.layers[0].bias_mean[:] = rng.uniform(0.5, 1.0, size=3)
    lift = bnn.lift(post)
    x = np.array([[1.0, 0.5]])
    n = 20000
    noise = rng.standard_normal((n, 3))
    out = bnn.sample_layer_output(dc.constant(np.repeat(x, n, axis=0)),
                                  lift.layers[0], noise).value
    lp = post.layers[0]
    mu = x @ lp.weight_mean + lp.bias_mean
    var = x**2 @ np.exp(lp.weight_logvar) + np.exp(lp.bias_logvar)
    assert np.all(np.abs(out.mean(axis=0) - mu) / np.abs(mu) < 0.02)
    assert np.all(np.abs(out.var(axis=0) - var) / var < 0.05)


def _check_path_kl():
    grid = sde.TimeGrid(np.array([0.0, 0.3, 0.55, 1.7]))
    S, c, g = 3, 1.7, 0.6
    f_nodes = [dc.constant(np.full((S, 1), c)) for _ in range(3)]
    path = sde.LatentPath(grid, [dc.constant(np.zeros((S, 1)))] * 4, f_nodes,
                          np.zeros((S, 3, 1)), None, S)
    got = pacloss.path_kl(path, sde.DiffusionSpec(np.array([g])))
    want = 0.5 * grid.duration * c**2 / g**2
    assert abs(got - want) / want < 1e-12


def _check_bound_chain():
    rng = np.random.default_rng(7)
    grid = sde.TimeGrid(0.1 * np.arange(5))
    spec = pacloss.LikelihoodSpec(1.0, dim=2)
    for _ in range(5):
        S = 4
        states = [dc.constant(rng.normal(size=(S, 2))) for _ in range(5)]
        path = sde.LatentPath(grid, states, None, np.zeros((S, 4, 2)), None, S)
        y = rng.normal(size=(5, 2))
        jen = pacloss.jensen_nll([path], [y], spec)
        mc = pacloss.mc_marginal_nll([path], [y], spec)
        assert jen - mc >= -1e-12
        risk = pacloss.empirical_risk([path], [y], spec)
        assert 0.0 <= risk <= 1.0


def _check_complexity_values():
    pac = pacloss.PacConfig(delta=0.1, n_sequences=20, mc_samples=100, seq_len=10)
    want = math.sqrt((math.log(2 * math.sqrt(20)) + math.log(20)) / 40.0)
    assert abs(pacloss.complexity(0.0, pac) - want) < 1e-12
    want_slack = math.sqrt(math.log(400.0) / 200.0)
    assert abs(pacloss.hoeffding_slack(pac) - want_slack) < 1e-12


def _check_wiener_moments():
    grid = sde.TimeGrid(0.01 * np.arange(11))
    draws = sde.wiener_increments(grid, 10_000, 10, seed=5)
    assert abs(draws.std() - 0.1) / 0.1 < 0.02


def _check_adam_first_step():
    params = {"w": np.zeros(3)}
    state = optim.init_adam(params, lr=1e-3)
    optim.adam_step(params, {"w": np.ones(3)}, state)
    assert np.allclose(params["w"], -1e-3 / (1.0 + 1e-8), rtol=1e-9)


def _check_em_hand_step():
    arch = bnn.MlpArch((1, 1))
    post = bnn.init_posterior(arch, 0)
    post.layers[0].weight_mean[:] = 0.0
    post.layers[0].weight_logvar[:] = -60.0
    post.layers[0].bias_mean[:] = 2.0
    post.layers[0].bias_logvar[:] = -60.0
    drift = sde.HybridDriftSpec(neural=bnn.lift(post))
    h = dc.constant(np.array([[1.0]]))
    h_next, f = sde.em_step(h, 0.0, 0.01, drift, sde.DiffusionSpec(np.array([1.0])),
                            np.array([[0.05]]), [np.zeros((1, 1))])
    assert abs(float(h_next.value[0, 0]) - 1.07) < 1e-9
    assert abs(float(f.value[0, 0]) - 2.0) < 1e-9


SELFTEST_CHECKS = (
    ("op-gradients", _check_op_gradients),
    ("shared-subexpression", _check_shared_subexpression),
    ("weight-kl-closed-form", _check_weight_kl),
    ("reparameterization-moments", _check_reparam_moments),
    ("path-kl-closed-form", _check_path_kl),
    ("bound-chain", _check_bound_chain),
    ("complexity-values", _check_complexity_values),
    ("wiener-moments", _check_wiener_moments),
    ("adam-first-step", _check_adam_first_step),
    ("em-hand-step", _check_em_hand_step),
)


def selftest(verbose: bool = True) -> int:
    """Run the invariant battery; returns the number of failed checks."""
    failures = 0
    for name, check in SELFTEST_CHECKS:
        try:
            check()
        except Exception as exc:  # noqa: BLE001 - report and continue
            failures += 1
            if verbose:
                print(f"FAIL {name}: {exc}")
        else:
            if verbose:
                print(f"ok   {name}")
    return failures
