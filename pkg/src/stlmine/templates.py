"""
Formula templates: exhaustive enumeration, grid instantiation and
signature-based redundancy filtering.
"""
import time
from dataclasses import dataclass
from functools import cached_property
from itertools import combinations

import numpy as np
from tqdm import tqdm

from utils.logging_utils import get_logger, progress_enabled
from utils.parallel import parallel_map
from .formula import (
    GE,
    LE,
    And,
    Atom,
    Eventually,
    Globally,
    Interval,
    InvalidIntervalError,
    Not,
    Or,
    Until,
    is_temporal,
)
from .semantics import EvaluationError, robustness_batch

logger = get_logger("templates")

PLACEHOLDER_INTERVAL = Interval(0.0)
UNARY_BUILDERS = (
    lambda child: Eventually(PLACEHOLDER_INTERVAL, child),
    lambda child: Globally(PLACEHOLDER_INTERVAL, child),
    Not,
)
BINARY_BUILDERS = (
    And,
    Or,
    lambda left, right: Until(PLACEHOLDER_INTERVAL, left, right),
)


class TemplateError(ValueError):
    """Raised for invalid template parameters or grids."""


@dataclass(frozen=True)
class Template:
    """
    Formula skeleton whose atom thresholds and interval bounds are parameters.

    Parameters are consumed in pre-order: one value per atom, a (lo, hi) time
    pair per temporal operator.
    """

    skeleton: object

    @cached_property
    def slots(self):
        kinds = []
        for node in self.skeleton.walk():
            if isinstance(node, Atom):
                kinds.append("value")
            elif is_temporal(node):
                kinds.append("interval")
        return tuple(kinds)

    @property
    def arity(self):
        return sum(1 if kind == "value" else 2 for kind in self.slots)

    @property
    def node_count(self):
        return self.skeleton.node_count()

    @property
    def var_count(self):
        return self.skeleton.var_count()

    @cached_property
    def text(self):
        """Grammar text with named placeholders (th0, th1.. and [a0,b0], ..)."""
        counters = {"value": 0, "interval": 0}

        def render(node):
            if isinstance(node, Atom):
                name = f"th{counters['value']}"
                counters["value"] += 1
                return f"x{node.var_index} {node.direction} {name}"
            if is_temporal(node):
                k = counters["interval"]
                counters["interval"] += 1
                bounds = f"[a{k},b{k}]"
                if isinstance(node, Until):
                    return f"({render(node.left)}) U{bounds} ({render(node.right)})"
                op = "F" if isinstance(node, Eventually) else "G"
                return f"{op}{bounds} ({render(node.child)})"
            if isinstance(node, Not):
                return f"not ({render(node.child)})"
            keyword = "and" if isinstance(node, And) else "or"
            return f"({render(node.left)}) {keyword} ({render(node.right)})"

        return render(self.skeleton)


def enumerate_templates(max_nodes, n_vars):
    """
    Enumerate every template with at most max_nodes nodes over variables x0..x{n_vars-1}.

    Atoms come first; a level of m nodes applies F, G and not to every
    (m-1)-node template, then and, or, U to every pair of templates with
    l + r = m - 1 nodes and l <= r.

    Args:
        max_nodes: Node budget M (>= 1)
        n_vars: Number of variables N (>= 1)

    Returns:
        List of Template, deterministic order, structurally deduplicated
    """
    if max_nodes < 1 or n_vars < 1:
        raise TemplateError(f"max_nodes and n_vars must be >= 1, got {max_nodes}, {n_vars}")
    levels = {1: [Atom(i, direction, 0.0) for i in range(n_vars) for direction in (LE, GE)]}
    for m in range(2, max_nodes + 1):
        level = [build(child) for build in UNARY_BUILDERS for child in levels[m - 1]]
        for left_size in range(1, m - 1):
            right_size = m - 1 - left_size
            if left_size > right_size:
                break
            for build in BINARY_BUILDERS:
                level.extend(build(left, right) for left in levels[left_size] for right in levels[right_size])
        levels[m] = level

    unique = dict.fromkeys(skeleton for m in sorted(levels) for skeleton in levels[m])
    return [Template(skeleton) for skeleton in unique]


@dataclass(frozen=True)
class ParameterGrid:
    """Threshold grid and time grid; interval pairs use grid points a < b."""

    values: tuple
    times: tuple

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        times = tuple(float(t) for t in self.times)
        if not values or not times:
            raise TemplateError("parameter grids must be non-empty")
        if list(values) != sorted(values) or list(times) != sorted(times):
            raise TemplateError("parameter grids must be sorted")
        if times[0] < 0:
            raise TemplateError("time grid must be non-negative")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "times", times)

    @classmethod
    def linear(cls, value_range=(-4.0, 4.0), n_values=10, time_range=(0.0, 100.0), n_times=10):
        values = np.round(np.linspace(value_range[0], value_range[1], n_values), 4)
        times = np.unique(np.round(np.linspace(time_range[0], time_range[1], n_times)))
        return cls(tuple(values.tolist()), tuple(times.tolist()))

    @classmethod
    def linear_benchmark(cls):
        """10 thresholds in [-4, 4]; 10 whole-sample time points in [0, 100]."""
        return cls.linear()

    @cached_property
    def time_pairs(self):
        return tuple(combinations(self.times, 2))


def instantiate(template, params):
    """
    Apply a flat parameter vector to a template.

    Args:
        template: Template
        params: Values in slot order (threshold, or lo then hi per interval)

    Returns:
        Concrete Formula with the same structure
    """
    params = list(params)
    if len(params) != template.arity:
        raise TemplateError(f"template {template.text} takes {template.arity} parameters, got {len(params)}")
    feed = iter(params)

    def fill(node):
        if isinstance(node, Atom):
            return Atom(node.var_index, node.direction, float(next(feed)))
        if is_temporal(node):
            lo, hi = float(next(feed)), float(next(feed))
            try:
                interval = Interval(lo, hi)
            except InvalidIntervalError as exc:
                raise TemplateError(f"invalid time pair ({lo}, {hi}): {exc}") from None
            children = tuple(fill(child) for child in node.children())
            if isinstance(node, Until):
                return Until(interval, *children)
            return type(node)(interval, children[0])
        kids = node.children()
        return node.replace_children(tuple(fill(child) for child in kids)) if kids else node

    return fill(template.skeleton)


def instantiate_all(template, grid, cap=10_000, seed=0):
    """
    Instantiate a template on every grid point, or on a seeded uniform subsample of cap points.

    Combinations are ordered lexicographically over slots (last slot fastest).

    Returns:
        List of Formula in grid order
    """
    radices = [len(grid.values) if kind == "value" else len(grid.time_pairs) for kind in template.slots]
    if any(r == 0 for r in radices):
        return []
    total = int(np.prod(radices, dtype=np.int64)) if radices else 1
    if cap is not None and total > cap:
        rng = np.random.default_rng(seed)
        flat = np.sort(rng.choice(total, size=cap, replace=False))
    else:
        flat = np.arange(total)
    if not radices:
        return [instantiate(template, [])]

    digits = np.unravel_index(flat, radices)
    formulas = []
    for row in range(len(flat)):
        params = []
        for kind, column in zip(template.slots, digits):
            if kind == "value":
                params.append(grid.values[column[row]])
            else:
                params.extend(grid.time_pairs[column[row]])
        formulas.append(instantiate(template, params))
    return formulas


def signature(f, trajectories):
    """Robustness of f at t = 0 on each trajectory of the signature set."""
    values = robustness_batch(f, trajectories, t=0)
    if not np.all(np.isfinite(values)):
        raise EvaluationError(f"non-finite robustness for '{f}'")
    return values


def compute_signatures(formulas, trajectories, threads=None):
    """
    Signatures of many formulae; unevaluable formulae are reported as None.

    Returns:
        List aligned with formulas: signature array or None
    """

    def safe_signature(f):
        try:
            return signature(f, trajectories)
        except EvaluationError:
            return None

    return parallel_map(safe_signature, formulas, threads=threads)


def greedy_filter(signatures, tau_sim):
    """
    Indices kept by a greedy cosine-similarity pass in input order.

    A signature is kept iff its similarity to every kept signature is < tau_sim.
    Zero signatures are similar (1) to each other and dissimilar (0) to the rest.
    """
    if not 0 < tau_sim <= 1:
        raise TemplateError(f"tau_sim must lie in (0, 1], got {tau_sim}")
    if not signatures:
        return []
    width = len(signatures[0])
    units = np.empty((len(signatures), width))
    kept, count, zero_kept = [], 0, False
    for index, sig in enumerate(signatures):
        norm = float(np.linalg.norm(sig))
        if norm < 1e-12:
            if not zero_kept:
                zero_kept = True
                kept.append(index)
            continue
        unit = np.asarray(sig, dtype=np.float64) / norm
        if count and float(np.max(units[:count] @ unit)) >= tau_sim:
            continue
        units[count] = unit
        count += 1
        kept.append(index)
    return kept


def signature_filter(candidates, trajectories, tau_sim=0.9, threads=None):
    """
    Drop candidates whose signature is too similar to an earlier kept one.

    Args:
        candidates: Iterable of Formula, in priority order
        trajectories: Signature trajectory set (array or list of Trajectory)
        tau_sim: Cosine-similarity threshold in (0, 1]
        threads: Worker cap for signature computation

    Returns:
        Kept formulae in candidate order (unevaluable candidates are dropped)
    """
    candidates = list(candidates)
    signatures = compute_signatures(candidates, trajectories, threads=threads)
    evaluable = [i for i, sig in enumerate(signatures) if sig is not None]
    kept = greedy_filter([signatures[i] for i in evaluable], tau_sim)
    return [candidates[evaluable[i]] for i in kept]


@dataclass
class FormulaSetReport:
    templates: int = 0
    instantiated: int = 0
    unevaluable: int = 0
    kept: int = 0


def generate_formula_set(max_nodes, n_vars, grid, signature_trajectories, tau_sim=0.9, cap=10_000, seed=0,
                         threads=None):
    """
    Enumerate, instantiate and filter templates; filtering runs per template.

    Returns:
        (list of Formula, FormulaSetReport)
    """
    start_time = time.time()
    templates = enumerate_templates(max_nodes, n_vars)
    report = FormulaSetReport(templates=len(templates))
    logger.info(f"Enumerated {len(templates)} templates (max_nodes={max_nodes}, n_vars={n_vars})")

    formulas = []
    for index, template in enumerate(tqdm(templates, desc="templates", disable=not progress_enabled(logger))):
        candidates = instantiate_all(template, grid, cap=cap, seed=seed + index)
        signatures = compute_signatures(candidates, signature_trajectories, threads=threads)
        evaluable = [i for i, sig in enumerate(signatures) if sig is not None]
        kept = greedy_filter([signatures[i] for i in evaluable], tau_sim)
        report.instantiated += len(candidates)
        report.unevaluable += len(candidates) - len(evaluable)
        formulas.extend(candidates[evaluable[i]] for i in kept)
        logger.debug(f"Template {template.text}: {len(candidates)} instances, {len(kept)} kept")

    report.kept = len(formulas)
    if report.unevaluable:
        logger.warning(f"Skipped {report.unevaluable} instantiations not evaluable on the signature trajectories")
    elapsed = time.time() - start_time
    logger.info(f"Formula set ready: {report.kept} of {report.instantiated} instantiations kept in {elapsed:.2f}s")
    return formulas, report
