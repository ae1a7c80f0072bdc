"""
Signal Temporal Logic abstract syntax.

Formulae are immutable trees of frozen dataclasses, so they hash, compare
structurally and can be shared freely between threads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Tuple

LE = "<="
GE = ">="
DIRECTIONS = (LE, GE)


class InvalidIntervalError(ValueError):
    """Raised when a temporal interval violates 0 <= lo < hi."""


@dataclass(frozen=True)
class Interval:
    """Time bounds [lo, hi] of a temporal operator; hi may be math.inf."""

    lo: float
    hi: float = math.inf

    def __post_init__(self):
        if math.isnan(self.lo) or math.isnan(self.hi):
            raise InvalidIntervalError("interval bounds must be numbers")
        if self.lo < 0 or math.isinf(self.lo):
            raise InvalidIntervalError(f"interval lower bound must be finite and >= 0, got {self.lo}")
        if not self.hi > self.lo:
            raise InvalidIntervalError(f"interval upper bound must exceed lower bound, got [{self.lo}, {self.hi}]")

    @property
    def unbounded(self) -> bool:
        return math.isinf(self.hi)


class Formula:
    """Base class of every STL syntax-tree node."""

    __slots__ = ()

    def children(self) -> Tuple["Formula", ...]:
        return ()

    def replace_children(self, children: Tuple["Formula", ...]) -> "Formula":
        return self

    def walk(self) -> Iterator["Formula"]:
        """Pre-order traversal of the tree."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children()))

    def node_count(self) -> int:
        return sum(1 for _ in self.walk())

    def var_indices(self) -> frozenset:
        return frozenset(node.var_index for node in self.walk() if isinstance(node, Atom))

    def var_count(self) -> int:
        return len(self.var_indices())

    def max_var_index(self) -> int:
        """Largest variable index used, -1 for formulae without atoms."""
        return max(self.var_indices(), default=-1)

    def depth(self) -> int:
        kids = self.children()
        return 1 + (max(child.depth() for child in kids) if kids else 0)

    def atoms(self) -> Iterator["Atom"]:
        return (node for node in self.walk() if isinstance(node, Atom))

    def intervals(self) -> Iterator[Interval]:
        return (node.interval for node in self.walk() if isinstance(node, _Temporal))

    def __str__(self) -> str:
        from .parser import format_formula
        return format_formula(self)


@dataclass(frozen=True)
class TrueFormula(Formula):
    """The Boolean constant tt."""


@dataclass(frozen=True)
class Atom(Formula):
    """Single-variable linear predicate x_i <= c or x_i >= c."""

    var_index: int
    direction: str
    threshold: float

    def __post_init__(self):
        if self.var_index < 0:
            raise ValueError(f"variable index must be >= 0, got {self.var_index}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if not math.isfinite(self.threshold):
            raise ValueError(f"threshold must be finite, got {self.threshold}")


@dataclass(frozen=True)
class Not(Formula):
    child: Formula

    def children(self):
        return (self.child,)

    def replace_children(self, children):
        return Not(children[0])


@dataclass(frozen=True)
class _Binary(Formula):
    left: Formula
    right: Formula

    def children(self):
        return (self.left, self.right)

    def replace_children(self, children):
        return type(self)(children[0], children[1])


@dataclass(frozen=True)
class And(_Binary):
    pass


@dataclass(frozen=True)
class Or(_Binary):
    pass


@dataclass(frozen=True)
class _Temporal(Formula):
    interval: Interval


@dataclass(frozen=True)
class Eventually(_Temporal):
    child: Formula

    def children(self):
        return (self.child,)

    def replace_children(self, children):
        return Eventually(self.interval, children[0])


@dataclass(frozen=True)
class Globally(_Temporal):
    child: Formula

    def children(self):
        return (self.child,)

    def replace_children(self, children):
        return Globally(self.interval, children[0])


@dataclass(frozen=True)
class Until(_Temporal):
    left: Formula
    right: Formula

    def children(self):
        return (self.left, self.right)

    def replace_children(self, children):
        return Until(self.interval, children[0], children[1])


TRUE = TrueFormula()

UNARY_OPERATORS = (Eventually, Globally, Not)
BINARY_OPERATORS = (And, Or, Until)
TEMPORAL_OPERATORS = (Eventually, Globally, Until)


def is_temporal(node: Formula) -> bool:
    return isinstance(node, _Temporal)


def with_interval(node: Formula, interval: Interval) -> Formula:
    """Copy of a temporal node carrying a different interval."""
    if isinstance(node, Until):
        return Until(interval, node.left, node.right)
    if isinstance(node, Eventually):
        return Eventually(interval, node.child)
    if isinstance(node, Globally):
        return Globally(interval, node.child)
    raise TypeError(f"{type(node).__name__} has no interval")


def transform(formula: Formula, fn: Callable[[Formula], Formula]) -> Formula:
    """Bottom-up rewrite: fn receives each node after its children were rewritten."""
    kids = formula.children()
    if kids:
        formula = formula.replace_children(tuple(transform(child, fn) for child in kids))
    return fn(formula)


def map_atoms(formula: Formula, fn: Callable[[Atom], Formula]) -> Formula:
    return transform(formula, lambda node: fn(node) if isinstance(node, Atom) else node)


def map_intervals(formula: Formula, fn: Callable[[Interval], Interval]) -> Formula:
    return transform(formula, lambda node: with_interval(node, fn(node.interval)) if is_temporal(node) else node)


def node_count(formula: Formula) -> int:
    """Number of AST nodes, atoms and operators alike (True counts as 1)."""
    return formula.node_count()


def var_count(formula: Formula) -> int:
    """Number of distinct variable indices used by the formula."""
    return formula.var_count()
