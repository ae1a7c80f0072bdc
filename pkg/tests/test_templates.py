"""
Tests for template enumeration, instantiation and signature filtering.
"""
import numpy as np
import pytest

from stlmine.formula import Not
from stlmine.parser import format_formula, parse_formula
from stlmine.templates import (
    ParameterGrid,
    Template,
    TemplateError,
    enumerate_templates,
    generate_formula_set,
    greedy_filter,
    instantiate,
    instantiate_all,
    signature,
    signature_filter,
)
from stlmine.trajectories import Mu0Params, sample_mu0_batch


def oracle_templates(max_nodes, n_vars):
    """Skeleton texts by exhaustive string expansion, independent of the enumerator."""
    by_size = {1: {f"x{i} {op} 0" for i in range(n_vars) for op in ("<=", ">=")}}
    for m in range(2, max_nodes + 1):
        level = set()
        for s in by_size[m - 1]:
            level |= {f"F[0,inf] ({s})", f"G[0,inf] ({s})", f"not ({s})"}
        for left in range(1, m - 1):
            right = m - 1 - left
            if left > right:
                continue
            for a in by_size[left]:
                for b in by_size[right]:
                    level |= {f"({a}) and ({b})", f"({a}) or ({b})", f"({a}) U[0,inf] ({b})"}
        by_size[m] = level
    return set().union(*by_size.values())


def _texts(templates):
    return [format_formula(t.skeleton) for t in templates]


def test_small_enumerations():
    print("\n=== TESTING TEMPLATE ENUMERATION ===")
    assert sorted(_texts(enumerate_templates(1, 1))) == ["x0 <= 0", "x0 >= 0"]
    level2 = enumerate_templates(2, 1)
    assert len(level2) == 8, f"Expected 8 templates, got {len(level2)}"
    assert {t.node_count for t in level2} == {1, 2}


def test_commutative_variants_are_both_enumerated():
    texts = set(_texts(enumerate_templates(3, 1)))
    assert "(x0 <= 0) and (x0 >= 0)" in texts
    assert "(x0 >= 0) and (x0 <= 0)" in texts
    assert "(x0 <= 0) and (x0 <= 0)" in texts


@pytest.mark.parametrize("max_nodes,n_vars", [(3, 1), (4, 2), (5, 3)])
def test_enumeration_matches_oracle(max_nodes, n_vars):
    templates = enumerate_templates(max_nodes, n_vars)
    texts = _texts(templates)
    print(f"M={max_nodes}, N={n_vars}: {len(texts)} templates")
    assert len(texts) == len(set(texts)), "Templates must be structurally unique"
    assert set(texts) == oracle_templates(max_nodes, n_vars)
    assert all(t.node_count <= max_nodes for t in templates)


def test_enumeration_is_monotone():
    base = set(_texts(enumerate_templates(3, 1)))
    assert base <= set(_texts(enumerate_templates(4, 1)))
    assert base <= set(_texts(enumerate_templates(3, 2)))
    with pytest.raises(TemplateError):
        enumerate_templates(0, 1)


def test_template_slots_and_text():
    template = Template(parse_formula("(x0 >= 0) U[0,inf] (F[0,inf] (x1 <= 0))"))
    assert template.slots == ("interval", "value", "interval", "value")
    assert template.arity == 6
    assert template.text == "(x0 >= th0) U[a0,b0] (F[a1,b1] (x1 <= th1))"


def test_instantiate():
    atom = Template(parse_formula("x0 <= 0"))
    assert format_formula(instantiate(atom, [0.0])) == "x0 <= 0"
    eventually = Template(parse_formula("F[0,inf] (x0 <= 0)"))
    f = instantiate(eventually, [70, 100, 1.16])
    assert f == parse_formula("F[70,100](x0 <= 1.16)")
    assert f.node_count() == eventually.node_count
    with pytest.raises(TemplateError):
        instantiate(eventually, [50, 50, 1.0])
    with pytest.raises(TemplateError):
        instantiate(eventually, [1.0])


def test_instantiate_all_grid_order_and_cap():
    grid = ParameterGrid((-1.0, 0.0, 1.0), (0.0, 50.0, 100.0))
    template = Template(parse_formula("F[0,inf] (x0 >= 0)"))
    formulas = instantiate_all(template, grid, cap=None)
    assert len(formulas) == 3 * 3
    assert formulas[0] == parse_formula("F[0,50] (x0 >= -1)")
    assert formulas[1] == parse_formula("F[0,50] (x0 >= 0)")
    assert formulas[-1] == parse_formula("F[50,100] (x0 >= 1)")

    capped = instantiate_all(template, grid, cap=4, seed=3)
    assert len(capped) == 4
    assert capped == instantiate_all(template, grid, cap=4, seed=3)
    assert all(f in formulas for f in capped)
    positions = [formulas.index(f) for f in capped]
    assert positions == sorted(positions), "Subsample keeps grid order"


def test_linear_benchmark_grid():
    grid = ParameterGrid.linear_benchmark()
    assert len(grid.values) == 10 and grid.values[0] == -4.0 and grid.values[-1] == 4.0
    assert len(grid.times) == 10 and all(float(t).is_integer() for t in grid.times)
    assert len(grid.time_pairs) == 45


def test_signature_examples():
    print("\n=== TESTING SIGNATURES ===")
    constants = np.array([np.full((1, 5), v) for v in (1.0, -2.0, 0.5)])
    f = parse_formula("x0 >= 0")
    assert signature(f, constants).tolist() == [1.0, -2.0, 0.5]
    assert signature(Not(f), constants).tolist() == [-1.0, 2.0, -0.5]

    samples = sample_mu0_batch(Mu0Params(), 5, 1, seed=0)
    g = parse_formula("G[0,99] (x0 <= 3)")
    expected = [min(3.0 - samples[i, 0, :100]) for i in range(5)]
    assert np.allclose(signature(g, samples), expected, rtol=0, atol=1e-12)


def test_filter_duplicates_and_negations():
    samples = sample_mu0_batch(Mu0Params(), 50, 1, seed=1)
    f = parse_formula("F[0,50] (x0 >= 0.5)")
    kept = signature_filter([f, f, Not(f)], samples, tau_sim=0.9)
    assert kept == [f, Not(f)]


def oracle_filter(signatures, tau_sim):
    kept = []
    for i, sig in enumerate(signatures):
        similar = False
        for j in kept:
            other = signatures[j]
            cosine = float(np.dot(sig, other) / (np.linalg.norm(sig) * np.linalg.norm(other)))
            if cosine >= tau_sim:
                similar = True
                break
        if not similar:
            kept.append(i)
    return kept


def test_filter_matches_quadratic_oracle():
    samples = sample_mu0_batch(Mu0Params(), 100, 1, seed=2)
    grid = ParameterGrid.linear_benchmark()
    candidates = [parse_formula(f"x0 >= {v}") for v in grid.values]
    signatures = [signature(f, samples) for f in candidates]
    expected = [candidates[i] for i in oracle_filter(signatures, 0.9)]
    kept = signature_filter(candidates, samples, tau_sim=0.9, threads=2)
    print(f"Kept {len(kept)} of {len(candidates)} thresholds")
    assert kept == expected

    kept_sigs = [signature(f, samples) for f in kept]
    for i in range(len(kept_sigs)):
        for j in range(i + 1, len(kept_sigs)):
            a, b = kept_sigs[i], kept_sigs[j]
            assert float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))) < 0.9


def test_greedy_filter_zero_signatures():
    zero = np.zeros(4)
    assert greedy_filter([zero, np.ones(4), zero], 0.9) == [0, 1]
    with pytest.raises(TemplateError):
        greedy_filter([np.ones(4)], 0.0)


def test_generate_formula_set_report():
    samples = sample_mu0_batch(Mu0Params(), 30, 1, seed=3)
    grid = ParameterGrid((-1.0, 0.0, 1.0), (0.0, 50.0, 100.0))
    formulas, report = generate_formula_set(2, 1, grid, samples, tau_sim=0.95, cap=100, seed=0, threads=1)
    assert report.templates == 8
    assert report.instantiated == 2 * 3 + 4 * 9 + 2 * 3
    assert report.kept == len(formulas) > 0
    assert all(f.node_count() <= 2 for f in formulas)
    again, _ = generate_formula_set(2, 1, grid, samples, tau_sim=0.95, cap=100, seed=0, threads=3)
    assert again == formulas
