"""
Quantitative (robustness) and Boolean semantics over sampled trajectories.

Evaluation is vectorized over a batch shaped (n, dim, n_points): every node
produces an (n, n_points) signal. Time is discrete: an interval [a, b]
covers sample indices t + ceil(a/dt) .. t + floor(b/dt). Windows running
past the trace end are clipped to the samples where the operand is defined;
instants whose window is empty are undefined (NaN), and an undefined value
at the evaluation time is an EvaluationError.
"""
import math

import numpy as np

from .formula import And, Atom, Eventually, Globally, Not, Or, TrueFormula, Until, LE
from .trajectories import Trajectory

EPS_INDEX = 1e-9


class EvaluationError(ValueError):
    """Raised when a formula cannot be evaluated on the given trajectories."""


def as_batch(trajectories):
    """
    Coerce a Trajectory, a list of them, or an array into an (n, dim, n_points) float array.

    Returns:
        (values, dt) where dt is 1.0 for raw arrays
    """
    if isinstance(trajectories, Trajectory):
        return trajectories.values[None], trajectories.dt
    if isinstance(trajectories, (list, tuple)) and trajectories and isinstance(trajectories[0], Trajectory):
        dts = {tr.dt for tr in trajectories}
        if len(dts) != 1:
            raise EvaluationError("trajectories disagree on dt")
        return np.stack([tr.values for tr in trajectories]), dts.pop()
    values = np.asarray(trajectories, dtype=np.float64)
    if values.ndim == 2:
        values = values[None]
    if values.ndim != 3:
        raise EvaluationError(f"expected (n, dim, n_points) values, got shape {values.shape}")
    return values, 1.0


def interval_indices(interval, dt):
    """Sample-offset window [lo, hi] of an interval; hi is None when unbounded."""
    lo = math.ceil(interval.lo / dt - EPS_INDEX)
    hi = None if interval.unbounded else math.floor(interval.hi / dt + EPS_INDEX)
    return lo, hi


def _window_reduce(signal, lo, hi, reduce):
    """
    out[:, t] = reduce(signal[:, t+lo .. min(t+hi, T-1)]) ignoring undefined samples.

    Sliding-window reduction by a sparse table (doubling spans); reduce is
    np.fmax or np.fmin so NaN padding never wins against a defined value.
    """
    n, length = signal.shape
    out = np.full((n, length), np.nan)
    last = length - 1 if hi is None else min(hi, length - 1)
    if lo > length - 1 or last < lo:
        return out
    valid = length - lo
    width = last - lo + 1

    table = np.full((n, valid + width - 1), np.nan)
    table[:, :valid] = signal[:, lo:]
    span = 1
    while span * 2 <= width:
        table = reduce(table[:, :-span], table[:, span:])
        span *= 2
    offset = width - span
    out[:, :valid] = reduce(table[:, :valid], table[:, offset:offset + valid])
    return out


def _until(left, right, lo, hi):
    """
    out[:, t] = max over k in [lo, hi] of min(right[t+k], min(left[t .. t+k])).

    The running minimum over the left operand skips undefined samples; the
    outer maximum ignores offsets where the candidate term is undefined.
    """
    n, length = left.shape
    out = np.full((n, length), np.nan)
    last = length - 1 if hi is None else min(hi, length - 1)
    running = left.copy()
    for k in range(0, last + 1):
        size = length - k
        if k > 0:
            running = np.fmin(running[:, :size], left[:, k:])
        if k >= lo:
            term = np.minimum(right[:, k:], running)
            out[:, :size] = np.fmax(out[:, :size], term)
    return out


def _evaluate(f, values, dt, boolean):
    if isinstance(f, Atom):
        x = values[:, f.var_index, :]
        if boolean:
            return (x <= f.threshold if f.direction == LE else x >= f.threshold).astype(np.float64)
        return f.threshold - x if f.direction == LE else x - f.threshold
    if isinstance(f, TrueFormula):
        return np.full(values[:, 0, :].shape, 1.0 if boolean else np.inf)
    if isinstance(f, Not):
        child = _evaluate(f.child, values, dt, boolean)
        return 1.0 - child if boolean else -child
    if isinstance(f, And):
        return np.minimum(_evaluate(f.left, values, dt, boolean), _evaluate(f.right, values, dt, boolean))
    if isinstance(f, Or):
        return np.maximum(_evaluate(f.left, values, dt, boolean), _evaluate(f.right, values, dt, boolean))
    if isinstance(f, Eventually):
        lo, hi = interval_indices(f.interval, dt)
        return _window_reduce(_evaluate(f.child, values, dt, boolean), lo, hi, np.fmax)
    if isinstance(f, Globally):
        lo, hi = interval_indices(f.interval, dt)
        return _window_reduce(_evaluate(f.child, values, dt, boolean), lo, hi, np.fmin)
    if isinstance(f, Until):
        lo, hi = interval_indices(f.interval, dt)
        return _until(_evaluate(f.left, values, dt, boolean), _evaluate(f.right, values, dt, boolean), lo, hi)
    raise TypeError(f"not a formula node: {f!r}")


def _check_vars(f, values):
    max_var = f.max_var_index()
    if max_var >= values.shape[1]:
        raise EvaluationError(f"formula uses x{max_var} but trajectories have dimension {values.shape[1]}")


def robustness_signal(f, trajectories, dt=None):
    """
    Robustness of f at every sample index.

    Args:
        f: Formula
        trajectories: Trajectory, list of Trajectory, or array (n, dim, n_points)
        dt: Sampling step (overrides the trajectories' own dt)

    Returns:
        Array (n, n_points); NaN where the value is undefined
    """
    values, own_dt = as_batch(trajectories)
    _check_vars(f, values)
    return _evaluate(f, values, dt or own_dt, boolean=False)


def _at(signal, t, f):
    if not 0 <= t < signal.shape[1]:
        raise EvaluationError(f"time index {t} out of range for {signal.shape[1]}-point trajectories")
    column = signal[:, t]
    if np.isnan(column).any():
        raise EvaluationError(f"temporal window of '{f}' is empty at t={t} for these trajectories")
    return column


def robustness_batch(f, trajectories, dt=None, t=0):
    """Robustness of f at sample index t for every trajectory of a batch, shape (n,)."""
    return _at(robustness_signal(f, trajectories, dt), t, f)


def robustness(f, xi, t=0):
    """Robustness rho(f, xi, t) of a single trajectory."""
    return float(robustness_batch(f, xi, t=t)[0])


def satisfaction_batch(f, trajectories, dt=None, t=0):
    """Boolean satisfaction at sample index t, computed by its own recursion, shape (n,)."""
    values, own_dt = as_batch(trajectories)
    _check_vars(f, values)
    return _at(_evaluate(f, values, dt or own_dt, boolean=True), t, f) > 0.5


def satisfies(f, xi, t=0):
    """Boolean satisfaction s(f, xi, t) of a single trajectory."""
    return bool(satisfaction_batch(f, xi, t=t)[0])


def is_evaluable(f, n_points, dim, dt=1.0, t=0):
    """Whether f has a defined value at t on any trajectory of the given shape."""
    if f.max_var_index() >= dim:
        return False
    blank = np.zeros((1, dim, n_points))
    return not np.isnan(_evaluate(f, blank, dt, boolean=True)[0, t])
