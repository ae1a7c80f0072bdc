"""
Tests for the formula sampler, the Monte-Carlo STL kernel, embeddings and
the reference-set file.
"""
import math

import numpy as np
import pytest

from stlmine.formula import Atom, Not, GE
from stlmine.kernel import (
    FDistParams,
    FormulaSampler,
    KernelError,
    ReferenceFormatError,
    ReferenceSet,
    build_reference_set,
    embed,
    embed_many,
    gram_matrix,
    kernel,
    load_reference_set,
    raw_kernel,
    sample_formula,
    save_reference_set,
)
from stlmine.parser import parse_formula


@pytest.fixture(scope="module")
def hand_reference():
    """Three two-dimensional trajectories; x1 is identically zero."""
    x0 = np.array([[0.5, 1.0, 2.0], [-1.0, 0.0, 1.0], [3.0, 2.0, -2.0]])
    trajectories = np.stack([np.vstack([row, np.zeros(3)]) for row in x0])
    anchors = (parse_formula("x0 >= 0"), parse_formula("F[0,2] (x0 <= 1)"))
    rho = np.array([[0.5, -1.0, 3.0], [0.5, 2.0, 3.0]])
    return ReferenceSet(anchors, trajectories, rho)


def test_sampler_limits():
    print("\n=== TESTING FORMULA SAMPLER ===")
    params = FDistParams(p_leaf=0.999, n_vars=2)
    atoms = sum(isinstance(FormulaSampler(params, seed).sample(), Atom) for seed in range(200))
    assert atoms >= 195
    bounded = FormulaSampler(FDistParams(n_vars=3, max_nodes=4), seed=1).sample_many(200)
    assert all(f.node_count() <= 4 for f in bounded)
    assert all(f.max_var_index() < 3 for f in bounded)
    assert sample_formula(seed=5) == sample_formula(seed=5)
    with pytest.raises(ValueError):
        FDistParams(p_leaf=1.0)


def test_kernel_matches_direct_summation(hand_reference):
    f, g = parse_formula("x0 >= 0"), parse_formula("x0 >= 0.1")
    rf = np.array([0.5, -1.0, 3.0])
    rg = rf - 0.1
    expected = np.sum(rf * rg) / math.sqrt(np.sum(rf * rf) * np.sum(rg * rg))
    assert kernel(f, g, hand_reference) == pytest.approx(expected, abs=1e-12)
    assert raw_kernel(f, g, hand_reference) == pytest.approx(np.mean(rf * rg), abs=1e-12)


def test_embedding_against_anchors(hand_reference):
    e = embed(parse_formula("x0 >= 0"), hand_reference)
    assert e.shape == (2,)
    assert e[0] == pytest.approx(1.0, abs=1e-12), "An anchor has unit similarity with itself"
    assert np.all(np.abs(e) <= 1.0 + 1e-12)


def test_zero_self_norm_is_rejected(hand_reference):
    flat = parse_formula("x1 >= 0")
    with pytest.raises(KernelError):
        embed(flat, hand_reference)
    with pytest.raises(KernelError):
        kernel(flat, parse_formula("x0 >= 0"), hand_reference)
    matrix, kept = embed_many([parse_formula("x0 <= 1"), flat, parse_formula("x0 >= 2")], hand_reference,
                              threads=2, skip_invalid=True)
    assert kept == [0, 2] and matrix.shape == (2, 2)
    with pytest.raises(KernelError):
        embed_many([flat], hand_reference)


def test_kernel_properties():
    """Gram matrix of 50 sampled formulae: symmetric, unit diagonal, positive semi-definite."""
    print("\n=== TESTING KERNEL PROPERTIES ===")
    reference = build_reference_set(n_train=5, n_mc=2000, fparams=FDistParams(n_vars=2), seed=1, threads=2)
    sampler = FormulaSampler(FDistParams(n_vars=2, max_nodes=6), seed=2)
    formulas = []
    while len(formulas) < 50:
        f = sampler.sample()
        try:
            reference.features(f)
        except KernelError:
            continue
        if np.linalg.norm(reference.features(f)) > 1e-6:
            formulas.append(f)
    gram = gram_matrix(formulas, reference)
    assert np.max(np.abs(gram - gram.T)) <= 1e-12
    assert np.allclose(np.diag(gram), 1.0, rtol=0, atol=1e-9)
    eigenvalues = np.linalg.eigvalsh(gram)
    print(f"eigenvalues: min={eigenvalues.min():.3e} max={eigenvalues.max():.3e}")
    assert eigenvalues.min() >= -1e-6 * eigenvalues.max()
    for f in formulas[:10]:
        assert kernel(f, Not(Not(f)), reference) == pytest.approx(1.0, abs=1e-9)
        assert kernel(f, Not(f), reference) == pytest.approx(-1.0, abs=1e-9)


@pytest.mark.parametrize("child", ["x0 >= 0.5", "(x1 <= 1) and (x0 >= -1)", "F[0,10] (x1 >= 0)"])
@pytest.mark.parametrize("interval", ["[0,30]", "[10,inf]"])
def test_equivalent_formulae_share_an_embedding(small_reference, child, interval):
    """F[a,b] phi and not G[a,b] not phi are one point of the embedding space."""
    eventually = parse_formula(f"F{interval} ({child})")
    dual = parse_formula(f"not (G{interval} (not ({child})))")
    assert eventually != dual
    assert np.array_equal(embed(eventually, small_reference), embed(dual, small_reference))
    assert kernel(eventually, dual, small_reference) == pytest.approx(1.0, abs=1e-9)
    phi = parse_formula(child)
    assert np.array_equal(embed(phi, small_reference), embed(Not(Not(phi)), small_reference))


def test_reference_set_is_deterministic(small_reference):
    again = build_reference_set(n_train=60, n_mc=300, fparams=FDistParams(n_vars=2, max_nodes=5), seed=0,
                                threads=3)
    assert again.anchors == small_reference.anchors
    assert np.array_equal(again.anchor_rho, small_reference.anchor_rho)
    assert np.array_equal(again.trajectories, small_reference.trajectories)
    assert np.all(small_reference.anchor_selfnorm >= 1e-9)
    assert small_reference.n_train == 60 and small_reference.n_mc == 300 and small_reference.dim == 2


def test_reference_file_round_trip(tmp_path, small_reference):
    print("\n=== TESTING REFERENCE-SET FILE ===")
    path = tmp_path / "ref.bin"
    save_reference_set(small_reference, path)
    loaded = load_reference_set(path)
    assert loaded.anchors == small_reference.anchors
    assert np.array_equal(loaded.trajectories, small_reference.trajectories)
    assert np.array_equal(loaded.anchor_rho, small_reference.anchor_rho)
    assert loaded.manifest() == small_reference.manifest()
    f = Atom(1, GE, 0.25)
    assert np.array_equal(embed(f, loaded), embed(f, small_reference)), "Embeddings must survive a round trip"

    data = bytearray(path.read_bytes())
    data[20] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(ReferenceFormatError):
        load_reference_set(path)
    path.write_bytes(b"NOTAREF!" + bytes(40))
    with pytest.raises(ReferenceFormatError):
        load_reference_set(path)
