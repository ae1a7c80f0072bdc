"""
Trajectory containers, samplers and dataset transforms.

Covers the base measure mu0 used for Monte-Carlo kernel integration, the
synthetic linear-system benchmark, per-dimension normalization, time-bound
rescaling of formulae and the dataset CSV format.
"""
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from utils.logging_utils import get_logger
from .formula import Atom, Interval, map_atoms, map_intervals

logger = get_logger("trajectories")

REFERENCE_POINTS = 100


class DatasetError(ValueError):
    """Raised for malformed, degenerate or incompatible trajectory data."""


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Uniformly sampled multivariate signal, values shaped (dim, n_points)."""

    values: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[None, :]
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise DatasetError(f"trajectory values must be shaped (dim, n_points), got {values.shape}")
        if not self.dt > 0:
            raise DatasetError(f"dt must be positive, got {self.dt}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def dim(self):
        return self.values.shape[0]

    @property
    def n_points(self):
        return self.values.shape[1]


def _as_batch(values, name):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 3:
        raise DatasetError(f"{name} must be shaped (n, dim, n_points), got {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """
    Positive (D_p) and negative (D_n) trajectory sets.

    Both sets are held as (n, dim, n_points) arrays sharing dim, n_points and dt.
    """

    positives: np.ndarray
    negatives: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        pos = _as_batch(self.positives, "positives")
        neg = _as_batch(self.negatives, "negatives")
        if pos.shape[1:] != neg.shape[1:]:
            raise DatasetError(f"positives {pos.shape[1:]} and negatives {neg.shape[1:]} disagree on (dim, n_points)")
        if not self.dt > 0:
            raise DatasetError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, "positives", pos)
        object.__setattr__(self, "negatives", neg)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def dim(self):
        return self.positives.shape[1]

    @property
    def n_points(self):
        return self.positives.shape[2]

    @property
    def n_pos(self):
        return self.positives.shape[0]

    @property
    def n_neg(self):
        return self.negatives.shape[0]

    def stacked(self):
        """All trajectories with labels (1 positive, 0 negative), positives first."""
        values = np.concatenate([self.positives, self.negatives])
        labels = np.concatenate([np.ones(self.n_pos, dtype=np.int64), np.zeros(self.n_neg, dtype=np.int64)])
        return values, labels

    def subset(self, pos_index, neg_index):
        return LabeledDataset(self.positives[pos_index], self.negatives[neg_index], self.dt)

    def swapped(self):
        return LabeledDataset(self.negatives, self.positives, self.dt)

    def require_both_classes(self):
        if self.n_pos == 0 or self.n_neg == 0:
            raise DatasetError(f"both classes must be non-empty (positives={self.n_pos}, negatives={self.n_neg})")


@dataclass(frozen=True)
class Mu0Params:
    """Parameters of the piecewise-linear base measure mu0."""

    delta: float = 1.0
    a: float = 0.0
    b: float = 100.0
    start_mean: float = 0.0
    start_std: float = 1.0
    variation_mean: float = 0.0
    variation_std: float = 1.0
    q: float = 0.1

    def __post_init__(self):
        if not self.delta > 0:
            raise DatasetError(f"delta must be positive, got {self.delta}")
        if not self.b > self.a:
            raise DatasetError(f"b must exceed a, got a={self.a} b={self.b}")
        if not (self.start_std > 0 and self.variation_std > 0):
            raise DatasetError("start_std and variation_std must be positive")
        if not 0.0 <= self.q <= 1.0:
            raise DatasetError(f"q must lie in [0, 1], got {self.q}")
        if self.n_points < 2:
            raise DatasetError("mu0 interval must hold at least two samples")

    @property
    def n_points(self):
        return int(round((self.b - self.a) / self.delta))


def sample_mu0_batch(params, n, dim, seed, return_variation=False):
    """
    Draw n independent mu0 trajectories, each dimension sampled independently.

    Each signal starts at N(start_mean, start_std), spends a total variation
    K = N(variation_mean, variation_std)^2 split at N-1 sorted uniform levels,
    and moves up or down with a sign that flips with probability q per step.

    Args:
        params: Mu0Params
        n: Number of trajectories
        dim: Signal dimension
        seed: RNG seed
        return_variation: Also return the drawn K, shaped (n, dim)

    Returns:
        Array (n, dim, n_points), optionally with the total variations
    """
    rng = np.random.default_rng(seed)
    steps = params.n_points - 1
    start = rng.normal(params.start_mean, params.start_std, size=(n, dim))
    variation = rng.normal(params.variation_mean, params.variation_std, size=(n, dim)) ** 2

    levels = np.sort(rng.uniform(0.0, 1.0, size=(n, dim, steps - 1)), axis=-1) * variation[..., None]
    levels = np.concatenate([np.zeros((n, dim, 1)), levels, variation[..., None]], axis=-1)
    increments = np.diff(levels, axis=-1)

    first_sign = rng.choice(np.array([-1.0, 1.0]), size=(n, dim, 1))
    flips = np.where(rng.random((n, dim, steps - 1)) < params.q, -1.0, 1.0)
    signs = first_sign * np.cumprod(np.concatenate([np.ones((n, dim, 1)), flips], axis=-1), axis=-1)

    path = np.concatenate([np.zeros((n, dim, 1)), np.cumsum(signs * increments, axis=-1)], axis=-1)
    values = start[..., None] + path
    if return_variation:
        return values, variation
    return values


def sample_mu0(params, dim, seed):
    """Single mu0 trajectory with dt = params.delta."""
    return Trajectory(sample_mu0_batch(params, 1, dim, seed)[0], params.delta)


def gen_linear_dataset(n_pos=100, n_neg=100, n_points=100, seed=0, x0=1.0, rate=0.03, noise_variance=0.04):
    """
    Generate the linear-system benchmark by Euler integration with dt = 1.

    Positives follow x' = rate*x + w, negatives x' = -rate*x + w, where w is
    white noise of the given variance.

    Args:
        n_pos: Number of positive (regular) trajectories
        n_neg: Number of negative (anomalous) trajectories
        n_points: Samples per trajectory
        seed: RNG seed
        x0: Initial condition
        rate: Growth / decay coefficient
        noise_variance: Variance of w; 0 gives the exact geometric recurrence

    Returns:
        LabeledDataset of 1-dimensional trajectories
    """
    if n_points < 2:
        raise DatasetError(f"n_points must be >= 2, got {n_points}")
    rng = np.random.default_rng(seed)
    noise_std = math.sqrt(noise_variance)

    def integrate(count, sign):
        x = np.empty((count, 1, n_points))
        x[:, 0, 0] = x0
        noise = rng.normal(0.0, noise_std, size=(count, n_points - 1)) if noise_std > 0 else np.zeros((count, n_points - 1))
        for k in range(n_points - 1):
            x[:, 0, k + 1] = x[:, 0, k] + sign * rate * x[:, 0, k] + noise[:, k]
        return x

    positives = integrate(n_pos, 1.0)
    negatives = integrate(n_neg, -1.0)
    logger.debug(f"Generated linear dataset: {n_pos} positives, {n_neg} negatives, {n_points} points, seed={seed}")
    return LabeledDataset(positives, negatives, 1.0)


@dataclass(frozen=True, eq=False)
class DatasetStats:
    """Per-dimension mean and (population) standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise DatasetError("mean and std must have the same length")
        if np.any(~(std > 0)):
            raise DatasetError(f"zero-variance dimension(s): {np.flatnonzero(~(std > 0)).tolist()}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self):
        return self.mean.shape[0]

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def compute_stats(d):
    values, _ = d.stacked()
    mean = values.mean(axis=(0, 2))
    std = values.std(axis=(0, 2))
    degenerate = np.flatnonzero(std <= 1e-12 * np.maximum(1.0, np.abs(mean)))
    if degenerate.size:
        raise DatasetError(f"zero-variance dimension(s) {degenerate.tolist()}; cannot normalize")
    return DatasetStats(mean, std)


def apply_stats(d, stats):
    """Normalize a dataset with given (e.g. training-fold) statistics."""
    if stats.dim != d.dim:
        raise DatasetError(f"stats cover {stats.dim} dimensions, dataset has {d.dim}")
    mean, std = stats.mean[None, :, None], stats.std[None, :, None]
    return LabeledDataset((d.positives - mean) / std, (d.negatives - mean) / std, d.dt)


def normalize(d):
    """
    Standardize each dimension with statistics pooled over both classes and all samples.

    Returns:
        (normalized dataset, DatasetStats)
    """
    stats = compute_stats(d)
    return apply_stats(d, stats), stats


def denormalize(d, stats):
    if stats.dim != d.dim:
        raise DatasetError(f"stats cover {stats.dim} dimensions, dataset has {d.dim}")
    mean, std = stats.mean[None, :, None], stats.std[None, :, None]
    return LabeledDataset(d.positives * std + mean, d.negatives * std + mean, d.dt)


def denormalize_thresholds(f, stats):
    """Map every atom threshold c on variable i to c * std_i + mean_i."""

    def rescale(atom):
        if atom.var_index >= stats.dim:
            raise DatasetError(f"no statistics for variable x{atom.var_index} (stats cover {stats.dim} dimensions)")
        i = atom.var_index
        return Atom(i, atom.direction, float(atom.threshold * stats.std[i] + stats.mean[i]))

    return map_atoms(f, rescale)


def rescale_time_bounds(f, n_test, dt=1.0, reference_points=REFERENCE_POINTS):
    """
    Map intervals defined over the reference (mu0) time domain onto a trace of n_test samples.

    [a, b] becomes [floor(a*r), floor(a*r) + ceil((b-a)*r)] with r = n_test / reference_points;
    an unbounded interval is rescaled as if b = reference_points and stays unbounded.
    The result is expressed in time units of the target trace (sample index * dt).

    Args:
        f: Formula over the reference domain
        n_test: Number of samples of the target trajectories
        dt: Sampling step of the target trajectories
        reference_points: Length of the reference domain

    Returns:
        Formula with rescaled intervals
    """
    if n_test < 1:
        raise DatasetError(f"n_test must be >= 1, got {n_test}")
    ratio = n_test / reference_points

    def rescale(interval):
        hi = reference_points if interval.unbounded else interval.hi
        lo = math.floor(interval.lo * ratio + 1e-9)
        width = max(1, math.ceil((hi - interval.lo) * ratio - 1e-9))
        new_hi = math.inf if interval.unbounded else (lo + width) * dt
        return Interval(lo * dt, new_hi)

    return map_intervals(f, rescale)


def write_dataset_csv(d, path):
    """Write `traj_id,label,t,x0[,x1..]`, one row per sample, positives first."""
    values, labels = d.stacked()
    n, dim, n_points = values.shape
    frame = pd.DataFrame({
        "traj_id": np.repeat(np.arange(n), n_points),
        "label": np.repeat(labels, n_points),
        "t": np.tile(np.arange(n_points) * d.dt, n),
    })
    for i in range(dim):
        frame[f"x{i}"] = values[:, i, :].reshape(-1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {n} trajectories ({n_points} points, dim {dim}) to {path}")
    return path


def read_dataset_csv(path):
    """
    Read a dataset CSV and validate that it is rectangular.

    Returns:
        LabeledDataset with dt inferred from the t column
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    frame = pd.read_csv(path)
    required = ["traj_id", "label", "t"]
    missing = [col for col in required if col not in frame.columns]
    var_cols = sorted((c for c in frame.columns if c.startswith("x") and c[1:].isdigit()), key=lambda c: int(c[1:]))
    if missing or not var_cols:
        raise DatasetError(f"{path}: expected columns traj_id,label,t,x0[,x1..]; missing {missing or ['x0']}")
    if var_cols != [f"x{i}" for i in range(len(var_cols))]:
        raise DatasetError(f"{path}: variable columns must be x0..x{len(var_cols) - 1} without gaps")
    if frame[var_cols].isna().any().any():
        raise DatasetError(f"{path}: missing signal values")

    frame = frame.sort_values(["traj_id", "t"], kind="stable")
    sizes = frame.groupby("traj_id", sort=True).size()
    if sizes.nunique() != 1:
        raise DatasetError(f"{path}: trajectories have different lengths {sorted(sizes.unique().tolist())}")
    labels = frame.groupby("traj_id", sort=True)["label"].agg(["min", "max"])
    if (labels["min"] != labels["max"]).any():
        raise DatasetError(f"{path}: label changes within a trajectory")
    if not set(labels["min"].unique()).issubset({0, 1}):
        raise DatasetError(f"{path}: labels must be 0 or 1")

    n_traj, n_points = len(sizes), int(sizes.iloc[0])
    times = frame["t"].to_numpy(dtype=np.float64).reshape(n_traj, n_points)
    if not np.allclose(times, times[0]):
        raise DatasetError(f"{path}: trajectories are sampled at different times")
    steps = np.diff(times[0])
    if n_points > 1 and (np.any(steps <= 0) or not np.allclose(steps, steps[0])):
        raise DatasetError(f"{path}: sampling must be uniform and ascending")
    dt = float(steps[0]) if n_points > 1 else 1.0

    values = frame[var_cols].to_numpy(dtype=np.float64).reshape(n_traj, n_points, len(var_cols)).transpose(0, 2, 1)
    positive = labels["min"].to_numpy() == 1
    dataset = LabeledDataset(values[positive], values[~positive], dt)
    logger.info(f"Read {n_traj} trajectories from {path}: {dataset.n_pos} positive, {dataset.n_neg} negative, "
                f"dim {dataset.dim}, {n_points} points")
    return dataset
