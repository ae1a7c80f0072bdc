"""
Text grammar for STL formulae: parser and canonical printer.

Grammar (whitespace-insensitive):

    formula := conj ("or" conj)*
    conj    := until ("and" until)*
    until   := unary ["U" interval until]      (right associative)
    unary   := "not" unary | "F" interval unary | "G" interval unary
             | "(" formula ")" | "true" | atom
    atom    := "x" INDEX ("<=" | ">=") NUMBER
    interval:= "[" NUMBER "," (NUMBER | "inf") "]"

The printer parenthesizes every operand, so parse(format(f)) == f.
"""
import math
from functools import lru_cache, reduce
from pathlib import Path

from pyparsing import (
    Forward,
    Keyword,
    Literal,
    Optional,
    ParseBaseException,
    ParseFatalException,
    Regex,
    Suppress,
    ZeroOrMore,
)

from .formula import (
    TRUE,
    And,
    Atom,
    Eventually,
    Formula,
    Globally,
    Interval,
    InvalidIntervalError,
    Not,
    Or,
    TrueFormula,
    Until,
)


class FormulaSyntaxError(ValueError):
    """Raised when formula text does not conform to the grammar."""

    def __init__(self, message, position=None, text=None):
        self.position = position
        self.text = text
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"{message}{where}")


def _make_interval(s, loc, toks):
    try:
        return Interval(toks[0], toks[1])
    except InvalidIntervalError as exc:
        raise ParseFatalException(s, loc, str(exc))


def _make_atom(s, loc, toks):
    return Atom(int(toks[0]), toks[1], toks[2])


def _make_until(toks):
    if len(toks) == 1:
        return toks[0]
    return Until(toks[1], toks[0], toks[2])


def make_grammar():
    """Build the pyparsing grammar; parse actions produce Formula nodes."""
    lpar, rpar, lbrack, rbrack, comma = map(Suppress, "()[],")

    number = Regex(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?")
    number.set_parse_action(lambda toks: float(toks[0]))
    inf = Keyword("inf").set_parse_action(lambda: math.inf)

    interval = lbrack + number + comma + (inf | number) + rbrack
    interval.set_parse_action(_make_interval)

    variable = Regex(r"x(\d+)(?![A-Za-z0-9_])").set_parse_action(lambda toks: toks[0][1:])
    comparator = Literal("<=") | Literal(">=")
    atom = (variable + comparator + number).set_parse_action(_make_atom)

    true = Keyword("true").set_parse_action(lambda: TRUE)
    not_kw, and_kw, or_kw = Keyword("not").suppress(), Keyword("and").suppress(), Keyword("or").suppress()
    ev_kw, glob_kw, until_kw = Keyword("F").suppress(), Keyword("G").suppress(), Keyword("U").suppress()

    formula = Forward()
    unary = Forward()
    until = Forward()

    negation = (not_kw + unary).set_parse_action(lambda toks: Not(toks[0]))
    eventually = (ev_kw + interval + unary).set_parse_action(lambda toks: Eventually(toks[0], toks[1]))
    globally = (glob_kw + interval + unary).set_parse_action(lambda toks: Globally(toks[0], toks[1]))
    group = lpar + formula + rpar

    unary <<= negation | eventually | globally | group | true | atom
    until <<= (unary + Optional(until_kw + interval + until)).set_parse_action(_make_until)
    conj = (until + ZeroOrMore(and_kw + until)).set_parse_action(lambda toks: reduce(And, toks))
    disj = (conj + ZeroOrMore(or_kw + conj)).set_parse_action(lambda toks: reduce(Or, toks))

    formula <<= disj
    return formula


_GRAMMAR = make_grammar()


@lru_cache(maxsize=65536)
def parse_formula(text):
    """
    Parse grammar text into a Formula.

    Args:
        text: Formula text, e.g. "G[0,36] (x0 <= 37.0)"

    Returns:
        The parsed Formula tree

    Raises:
        FormulaSyntaxError: malformed text or an invalid interval
    """
    if not isinstance(text, str) or not text.strip():
        raise FormulaSyntaxError("empty formula text", position=0, text=text)
    try:
        return _GRAMMAR.parse_string(text, parse_all=True)[0]
    except ParseBaseException as exc:
        raise FormulaSyntaxError(exc.msg, position=exc.loc, text=text) from None


def format_number(value):
    """Shortest exact text for a bound or threshold ("inf" for +infinity)."""
    value = float(value)
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def _format_interval(interval):
    return f"[{format_number(interval.lo)},{format_number(interval.hi)}]"


def format_formula(f: Formula) -> str:
    """
    Render a formula in canonical grammar text.

    Args:
        f: Formula to print

    Returns:
        Deterministic text such that parse_formula(text) == f
    """
    if isinstance(f, TrueFormula):
        return "true"
    if isinstance(f, Atom):
        return f"x{f.var_index} {f.direction} {format_number(f.threshold)}"
    if isinstance(f, Not):
        return f"not ({format_formula(f.child)})"
    if isinstance(f, And):
        return f"({format_formula(f.left)}) and ({format_formula(f.right)})"
    if isinstance(f, Or):
        return f"({format_formula(f.left)}) or ({format_formula(f.right)})"
    if isinstance(f, Eventually):
        return f"F{_format_interval(f.interval)} ({format_formula(f.child)})"
    if isinstance(f, Globally):
        return f"G{_format_interval(f.interval)} ({format_formula(f.child)})"
    if isinstance(f, Until):
        return f"({format_formula(f.left)}) U{_format_interval(f.interval)} ({format_formula(f.right)})"
    raise TypeError(f"not a formula node: {f!r}")


def write_formula_lines(formulas, path):
    """Write formulae as newline-delimited grammar text."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(format_formula(f) + "\n" for f in formulas), encoding="utf-8")


def read_formula_lines(path):
    """Read newline-delimited grammar text; blank lines and '#' comments are skipped."""
    formulas = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            formulas.append(parse_formula(line))
        except FormulaSyntaxError as exc:
            raise FormulaSyntaxError(f"line {lineno}: {exc}", position=exc.position, text=line) from None
    return formulas
