"""Synthetic ground-truth generation, sequence splitting, and dataset file I/O.

Both generators run a fine Euler-Maruyama simulation, keep every 100th point
so observations land on a 0.01-spaced grid, and split the halves into fixed
sequence counts.  Stored times are exact multiples of the observation
spacing (computed as k * spacing, not accumulated sums).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import priors
from .sde import TimeGrid


class DatasetParseError(ValueError):
    """Malformed dataset file."""


@dataclass
class ObservationSequence:
    """One observed trajectory: values [K, D] on a time grid of length K."""

    values: np.ndarray
    grid: TimeGrid
    seq_id: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError("sequence values must be a non-empty [K, D] array")
        if self.values.shape[0] != self.grid.n_points:
            raise ValueError(
                f"sequence has {self.values.shape[0]} rows but grid has "
                f"{self.grid.n_points} points"
            )

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class Dataset:
    sequences: list[ObservationSequence]
    role: str

    def __post_init__(self):
        if self.role not in ("train", "test"):
            raise ValueError(f"dataset role must be 'train' or 'test', got {self.role!r}")
        dims = {seq.dim for seq in self.sequences}
        if len(dims) > 1:
            raise ValueError(f"sequences have mixed dimensions {sorted(dims)}")

    @property
    def dim(self) -> int:
        if not self.sequences:
            raise ValueError("empty dataset has no dimension")
        return self.sequences[0].dim

    @property
    def n_sequences(self) -> int:
        return len(self.sequences)


def simulate_fine(drift_fn, noise_scale, x0, dt: float, n_steps: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Plain Euler-Maruyama ground-truth simulation; returns [n_steps+1, P]."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.asarray(noise_scale, dtype=np.float64)
    sqrt_dt = math.sqrt(dt)
    out = np.empty((n_steps + 1, x0.size))
    out[0] = x0
    x = x0.copy()
    for k in range(n_steps):
        x = x + drift_fn(x) * dt + g * (sqrt_dt * rng.standard_normal(x0.size))
        out[k + 1] = x
    return out


def _downsample(fine: np.ndarray, factor: int, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """Keep every ``factor``-th state (dropping t=0); times are k * spacing."""
    n_obs = fine.shape[0] // factor
    values = fine[factor::factor][:n_obs]
    times = spacing * np.arange(1, n_obs + 1)
    return times, values


def _split_block(times: np.ndarray, values: np.ndarray, seq_len: int,
                 prefix: str) -> list[ObservationSequence]:
    n_seq = values.shape[0] // seq_len
    if n_seq * seq_len != values.shape[0]:
        raise ValueError(f"block of {values.shape[0]} points does not split into "
                         f"length-{seq_len} sequences")
    out = []
    for i in range(n_seq):
        lo, hi = i * seq_len, (i + 1) * seq_len
        out.append(
            ObservationSequence(
                values=values[lo:hi].copy(),
                grid=TimeGrid(times[lo:hi].copy()),
                seq_id=f"{prefix}{i:03d}",
            )
        )
    return out


LORENZ_FINE_STEPS = 200_000
LORENZ_FINE_DT = 1e-4
LORENZ_X0 = (1.0, 1.0, 28.0)
OBS_SPACING = 0.01
DOWNSAMPLE_FACTOR = 100


def lorenz_series(seed, *, diffusion: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Downsampled stochastic-Lorenz observations: (times [2000], values [2000, 3])."""
    rng = np.random.default_rng(seed)
    fine = simulate_fine(
        lambda h: priors.lorenz_drift(h, priors.LORENZ_PARAMS),
        np.full(3, diffusion),
        LORENZ_X0,
        LORENZ_FINE_DT,
        LORENZ_FINE_STEPS,
        rng,
    )
    return _downsample(fine, DOWNSAMPLE_FACTOR, OBS_SPACING)


def generate_lorenz(seed) -> tuple[Dataset, Dataset]:
    """First half as 20 train sequences of 50, second half as 10 test sequences of 100."""
    times, values = lorenz_series(seed)
    half = values.shape[0] // 2
    train = _split_block(times[:half], values[:half], 50, "lorenz-train-")
    test = _split_block(times[half:], values[half:], 100, "lorenz-test-")
    return Dataset(train, "train"), Dataset(test, "test")


LV_FINE_STEPS = 100_000
LV_FINE_DT = 1e-4
# start on a tight orbit around the coexistence point (4, 2): Euler-Maruyama
# at the observation spacing leaves the stable basin (and blows up through the
# bilinear terms) once a population approaches zero, which wide orbits plus
# the diffusion noise make likely over a 200-step forecast
LV_X0 = (3.0, 1.5)
LV_DIFFUSION = (0.2, 0.3)
LV_MAX_ATTEMPTS = 20


def lotka_volterra_series(seed) -> tuple[np.ndarray, np.ndarray]:
    """Downsampled stochastic Lotka-Volterra observations, resampled until positive."""
    root = np.random.SeedSequence(seed)
    for attempt, child in enumerate(root.spawn(LV_MAX_ATTEMPTS)):
        rng = np.random.default_rng(child)
        fine = simulate_fine(
            lambda h: priors.lotka_volterra_drift(h, priors.LOTKA_VOLTERRA_PARAMS),
            np.asarray(LV_DIFFUSION),
            LV_X0,
            LV_FINE_DT,
            LV_FINE_STEPS,
            rng,
        )
        if np.all(fine > 0.0):
            return _downsample(fine, DOWNSAMPLE_FACTOR, OBS_SPACING)
    raise RuntimeError(
        f"no positive Lotka-Volterra trajectory within {LV_MAX_ATTEMPTS} attempts"
    )


def generate_lotka_volterra(seed) -> tuple[Dataset, Dataset]:
    """First 500 observations as ten train sequences of 50, rest as ten test sequences."""
    times, values = lotka_volterra_series(seed)
    half = values.shape[0] // 2
    train = _split_block(times[:half], values[:half], 50, "lv-train-")
    test = _split_block(times[half:], values[half:], 50, "lv-test-")
    return Dataset(train, "train"), Dataset(test, "test")


GENERATORS = {"lorenz": generate_lorenz, "lotka_volterra": generate_lotka_volterra}


def concat_sequences(dataset: Dataset, seq_id: str = "concat") -> ObservationSequence:
    """Reassemble a split stream into one contiguous sequence."""
    if not dataset.sequences:
        raise ValueError("cannot concatenate an empty dataset")
    times = np.concatenate([s.grid.times for s in dataset.sequences])
    values = np.concatenate([s.values for s in dataset.sequences], axis=0)
    return ObservationSequence(values=values, grid=TimeGrid(times), seq_id=seq_id)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_dataset(dataset: Dataset, path, manifest: dict | None = None) -> None:
    """CSV with header ``seq_id,t,dim0,...``; full f64 precision round trip."""
    path = Path(path)
    dim = dataset.sequences[0].dim if dataset.sequences else 0
    header = "seq_id,t," + ",".join(f"dim{d}" for d in range(dim)) if dataset.sequences \
        else "seq_id,t"
    lines = [header]
    for seq in dataset.sequences:
        for t, row in zip(seq.grid.times, seq.values):
            lines.append(",".join([seq.seq_id, _fmt(t), *(_fmt(v) for v in row)]))
    path.write_text("\n".join(lines) + "\n")
    info = {
        "role": dataset.role,
        "n_sequences": dataset.n_sequences,
        "sequence_lengths": [s.length for s in dataset.sequences],
        "dim": dim,
    }
    if manifest:
        info.update(manifest)
    Path(str(path) + ".manifest.json").write_text(json.dumps(info, indent=2) + "\n")


def read_dataset(path, role: str = "train") -> Dataset:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise DatasetParseError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[:2] != ["seq_id", "t"]:
        raise DatasetParseError(f"{path}: line 1: unexpected header {lines[0]!r}")
    dim = len(header) - 2
    by_seq: dict[str, tuple[list[float], list[list[float]]]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != dim + 2:
            raise DatasetParseError(
                f"{path}: line {lineno}: expected {dim + 2} fields, got {len(fields)}"
            )
        seq_id = fields[0]
        try:
            numbers = [float(tok) for tok in fields[1:]]
        except ValueError:
            raise DatasetParseError(f"{path}: line {lineno}: non-numeric value") from None
        if not all(math.isfinite(v) for v in numbers):
            raise DatasetParseError(f"{path}: line {lineno}: non-finite value")
        times, rows = by_seq.setdefault(seq_id, ([], []))
        times.append(numbers[0])
        rows.append(numbers[1:])
    sequences = []
    for seq_id, (times, rows) in by_seq.items():
        try:
            grid = TimeGrid(np.asarray(times))
        except ValueError as exc:
            raise DatasetParseError(f"{path}: sequence {seq_id!r}: {exc}") from None
        sequences.append(ObservationSequence(np.asarray(rows), grid, seq_id))
    return Dataset(sequences, role)
