"""
Tests for robustness and Boolean satisfaction.

The vectorized evaluator is checked against a brute-force oracle that
enumerates every window explicitly, one time index at a time.
"""
import math

import numpy as np
import pytest

from stlmine.formula import And, Atom, Eventually, Globally, Not, Or, TrueFormula, Until, LE
from stlmine.kernel import FDistParams, FormulaSampler
from stlmine.parser import parse_formula
from stlmine.semantics import (
    EvaluationError,
    interval_indices,
    is_evaluable,
    robustness,
    robustness_batch,
    robustness_signal,
    satisfaction_batch,
    satisfies,
)
from stlmine.trajectories import Mu0Params, Trajectory, sample_mu0_batch

NAN = float("nan")


def _window(interval, t, length, dt=1.0):
    lo = math.ceil(interval.lo / dt - 1e-9)
    hi = length - 1 if interval.unbounded else math.floor(interval.hi / dt + 1e-9)
    return range(t + lo, min(t + hi, length - 1) + 1)


def _defined(values):
    return [v for v in values if not math.isnan(v)]


def oracle_signal(f, x, dt=1.0, boolean=False):
    """Signal of f at every index of a (dim, T) trajectory, by explicit enumeration."""
    length = x.shape[1]
    if isinstance(f, Atom):
        row = x[f.var_index]
        if boolean:
            return [1.0 if (v <= f.threshold if f.direction == LE else v >= f.threshold) else 0.0 for v in row]
        return [(f.threshold - v) if f.direction == LE else (v - f.threshold) for v in row]
    if isinstance(f, TrueFormula):
        return [1.0 if boolean else math.inf] * length
    if isinstance(f, Not):
        return [(1.0 - v) if boolean else -v for v in oracle_signal(f.child, x, dt, boolean)]
    if isinstance(f, (And, Or)):
        left, right = oracle_signal(f.left, x, dt, boolean), oracle_signal(f.right, x, dt, boolean)
        pick = min if isinstance(f, And) else max
        return [NAN if math.isnan(a) or math.isnan(b) else pick(a, b) for a, b in zip(left, right)]
    if isinstance(f, (Eventually, Globally)):
        child = oracle_signal(f.child, x, dt, boolean)
        pick = max if isinstance(f, Eventually) else min
        out = []
        for t in range(length):
            values = _defined(child[s] for s in _window(f.interval, t, length, dt))
            out.append(pick(values) if values else NAN)
        return out
    if isinstance(f, Until):
        left, right = oracle_signal(f.left, x, dt, boolean), oracle_signal(f.right, x, dt, boolean)
        out = []
        for t in range(length):
            candidates = []
            for s in _window(f.interval, t, length, dt):
                prefix = _defined(left[t:s + 1])
                if not prefix or math.isnan(right[s]):
                    continue
                candidates.append(min(right[s], min(prefix)))
            out.append(max(candidates) if candidates else NAN)
        return out
    raise TypeError(f)


def _assert_signals_match(f, actual, expected):
    expected = np.asarray(expected)
    assert np.array_equal(np.isnan(actual), np.isnan(expected)), f"Undefined pattern differs for {f}"
    both = ~np.isnan(expected)
    assert np.allclose(actual[both], expected[both], rtol=0, atol=1e-9), f"Values differ for {f}"


def test_atom_and_negation():
    print("\n=== TESTING ATOMIC ROBUSTNESS ===")
    xi = Trajectory(np.full((1, 10), 2.5))
    assert robustness(parse_formula("x0 >= 0"), xi) == 2.5
    assert robustness(parse_formula("not (x0 >= 0)"), xi) == -2.5
    assert satisfies(parse_formula("x0 >= 0"), xi)
    assert robustness(parse_formula("true"), xi) == math.inf


def test_globally_on_ramp():
    xi = Trajectory(np.arange(10, dtype=float)[None, :])
    f = parse_formula("G[0,5] (x0 <= 3)")
    assert robustness(f, xi) == -2.0
    assert not satisfies(f, xi)
    assert robustness(parse_formula("F[0,5] (x0 >= 4)"), xi) == 1.0
    assert robustness(f, xi, t=1) == -3.0


def test_until_hand_built_signal():
    print("\n=== TESTING UNTIL AGAINST ENUMERATION ===")
    x = np.array([[2.0, 1.5, 3.0, 0.5, -1.0, 2.0]])
    f = parse_formula("(x0 >= 1) U[0,4] (x0 <= 0)")
    expected = max(min(-x[0, s], min(x[0, :s + 1] - 1.0)) for s in range(0, 5))
    assert robustness(f, Trajectory(x)) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(-0.5)


def test_unbounded_window_clips_to_trace_end():
    xi = Trajectory(np.arange(20, dtype=float)[None, :])
    assert robustness(parse_formula("F[5,inf] (x0 >= 0)"), xi) == 19.0
    assert robustness(parse_formula("G[5,inf] (x0 >= 0)"), xi) == 5.0
    assert robustness(parse_formula("F[15,100] (x0 >= 0)"), xi) == 19.0


def test_dt_scales_interval_indices():
    from stlmine.formula import Interval
    assert interval_indices(Interval(0, 1), 0.5) == (0, 2)
    assert interval_indices(Interval(0.3, 1.7), 0.5) == (1, 3)
    assert interval_indices(Interval(2), 1.0) == (2, None)
    xi = Trajectory(np.arange(10, dtype=float)[None, :], dt=0.5)
    assert robustness(parse_formula("F[0,1] (x0 >= 0)"), xi) == 2.0


def test_evaluation_errors():
    xi = Trajectory(np.zeros((1, 20)))
    with pytest.raises(EvaluationError):
        robustness(parse_formula("x1 >= 0"), xi)
    with pytest.raises(EvaluationError):
        robustness(parse_formula("x0 >= 0"), xi, t=20)
    with pytest.raises(EvaluationError):
        robustness(parse_formula("F[50,60] (x0 >= 0)"), xi)
    assert not is_evaluable(parse_formula("F[50,60] (x0 >= 0)"), 20, 1)
    assert is_evaluable(parse_formula("G[0,60] (x0 >= 0)"), 20, 1)
    assert not is_evaluable(parse_formula("x2 >= 0"), 20, 2)


def test_matches_oracle_on_random_formulae():
    """1000 random formulae with at most 5 nodes on 20-point signals."""
    print("\n=== TESTING EVALUATOR AGAINST BRUTE-FORCE ORACLE ===")
    params = FDistParams(n_vars=2, time_range=(0, 20), max_nodes=5, value_range=(-2.0, 2.0))
    sampler = FormulaSampler(params, seed=11)
    signals = sample_mu0_batch(Mu0Params(b=20.0), 3, 2, seed=5)
    for _ in range(1000):
        f = sampler.sample()
        actual = robustness_signal(f, signals)
        for i, x in enumerate(signals):
            _assert_signals_match(f, actual[i], oracle_signal(f, x))


def test_boolean_matches_oracle():
    params = FDistParams(n_vars=2, time_range=(0, 20), max_nodes=5)
    sampler = FormulaSampler(params, seed=12)
    signals = sample_mu0_batch(Mu0Params(b=20.0), 4, 2, seed=6)
    for _ in range(300):
        f = sampler.sample()
        expected = [oracle_signal(f, x, boolean=True)[0] for x in signals]
        if any(math.isnan(v) for v in expected):
            with pytest.raises(EvaluationError):
                satisfaction_batch(f, signals)
            continue
        assert satisfaction_batch(f, signals).tolist() == [v > 0.5 for v in expected], f"Mismatch for {f}"


def test_soundness_sweep():
    """Positive robustness implies satisfaction and negative robustness implies violation."""
    print("\n=== TESTING SOUNDNESS ===")
    params = FDistParams(n_vars=2, time_range=(0, 100), max_nodes=6)
    sampler = FormulaSampler(params, seed=13)
    trajectories = sample_mu0_batch(Mu0Params(), 20, 2, seed=7)
    violations = 0
    checked = 0
    for _ in range(500):
        f = sampler.sample()
        try:
            rho = robustness_batch(f, trajectories)
        except EvaluationError:
            with pytest.raises(EvaluationError):
                satisfaction_batch(f, trajectories)
            continue
        sat = satisfaction_batch(f, trajectories)
        decisive = np.abs(rho) > 1e-9
        violations += int(np.sum(sat[decisive] != (rho[decisive] > 0)))
        checked += int(np.sum(decisive))
    print(f"Checked {checked} decisive pairs")
    assert violations == 0, f"{violations} soundness violations"
    assert checked > 3000


def test_batch_agrees_with_single_trajectories():
    trajectories = sample_mu0_batch(Mu0Params(), 5, 1, seed=2)
    f = parse_formula("(G[10,40] (x0 <= 1.5)) or (F[0,inf] (x0 >= 2))")
    batch = robustness_batch(f, trajectories)
    singles = [robustness(f, Trajectory(x)) for x in trajectories]
    assert np.allclose(batch, singles, rtol=0, atol=0)
