import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffcollage.errors import NumericalError
from diffcollage.graph import (
    FactorGraph,
    GaussianMarginal,
    JointLayout,
    NodeRef,
    bethe_coefficients,
    bethe_entropy,
    build_chain,
    build_cubemap,
    build_custom,
    build_cycle,
    build_grid,
    coefficient_sums,
    gaussian_entropy,
    is_acyclic,
    marginals_from_joint,
    validate,
)
from diffcollage.testbeds import random_chain_gaussian, random_markov_gaussian


def test_simple_example_chain():
    g = build_chain(2, 2, 1)
    assert g.factors == ((0, 1), (1, 2))
    assert g.variables == ((0,), (1,), (2,))
    assert g.degrees() == (1, 2, 1)
    assert bethe_coefficients(g).variable_coeffs == (0.0, -1.0, 0.0)


def test_single_factor_chain():
    g = build_chain(1, 4, 1)
    assert g.factors == ((0, 1, 2, 3),)
    assert g.degrees() == (1, 1)
    assert all(c == 0 for c in bethe_coefficients(g).variable_coeffs)


def test_chain_layout_arithmetic():
    g = build_chain(3, 4, 2)
    assert g.layout.total_dim == 8
    interior = [v for v, d in zip(g.variables, g.degrees()) if d == 2]
    assert interior == [(2, 3), (4, 5)]
    assert validate(g) == []


def test_chain_rejects_full_overlap():
    with pytest.raises(ValueError):
        build_chain(3, 4, 4)


def test_smallest_ring():
    g = build_cycle(2, 4, 2)
    assert g.layout.total_dim == 4
    assert g.coords(NodeRef("factor", 1)) == (2, 3, 0, 1)
    assert set(g.variables) == {(0, 1), (2, 3)}
    assert validate(g) == []


def test_ring_coefficients():
    g = build_cycle(4, 4, 2)
    assert g.layout.total_dim == 8
    assert set(g.degrees()) == {2}
    assert set(bethe_coefficients(g).variable_coeffs) == {-1.0}
    assert np.all(coefficient_sums(g) == 1)


def test_cycle_wrap_violation():
    with pytest.raises(ValueError):
        build_cycle(2, 4, 3)
    with pytest.raises(ValueError, match="whole ring"):
        build_cycle(5, 5, 4)


def test_grid_2x2_degrees():
    g = build_grid(2, 2, 4, 2)
    assert validate(g) == []
    interior = [i for i, d in enumerate(g.degrees()) if d == 2]
    assert len(interior) == 4
    for j, incident in enumerate(g.edges):
        assert len(incident) == 4
    assert all(d in (1, 2) for d in g.degrees())
    assert not is_acyclic(g)


def test_grid_single_row_behaves_like_chain():
    g = build_grid(1, 4, 4, 3)
    assert validate(g) == []
    assert all(d <= 2 for d in g.degrees())
    assert sum(d == 2 for d in g.degrees()) == 3
    assert is_acyclic(g)


def test_grid_rejects_hole_geometry():
    with pytest.raises(ValueError, match="covered by no factor"):
        build_grid(2, 2, 6, 2)


def test_cubemap_face_dim_one():
    g = build_cubemap(1)
    assert g.layout.total_dim == 6
    assert all(len(f) == 4 for f in g.factors)
    assert all(len(v) == 2 for v in g.variables)
    assert set(g.degrees()) == {2}
    assert validate(g) == []
    assert np.all(coefficient_sums(g) == 1)


def test_validate_reports_subset_violation():
    g = FactorGraph(JointLayout(4), [(0, 1, 2), (2, 3)], [(1, 2)], edges=[(0,), (0,)])
    problems = validate(g)
    subset = [p for p in problems if p.rule == "subset"]
    assert len(subset) == 1
    assert subset[0].kind == "variable" and subset[0].index == 0


def test_validate_reports_coverage_coordinate():
    g = build_custom(8, [(0, 1, 2, 3), (3, 4, 5, 6)], [(3,)])
    problems = validate(g)
    cov = [p for p in problems if p.rule == "coverage"]
    assert len(cov) == 1 and cov[0].index == 7
    assert "coordinate 7" in str(cov[0])


def test_star_coefficient():
    g = build_custom(4, [(0, 1), (0, 2), (0, 3)], [(0,)])
    assert g.degrees() == (3,)
    assert bethe_coefficients(g).variable_coeffs == (-2.0,)
    assert validate(g) == []


def test_acyclicity():
    assert is_acyclic(build_chain(5, 4, 2))
    assert not is_acyclic(build_cycle(3, 4, 2))
    assert not is_acyclic(build_cubemap(1))


def test_entropy_of_independent_units():
    g = build_custom(2, [(0,), (1,)], [])
    margs = [GaussianMarginal(NodeRef("factor", j), [0.0], [[1.0]]) for j in range(2)]
    assert bethe_entropy(g, margs) == pytest.approx(2 * 0.5 * math.log(2 * math.pi * math.e), abs=1e-12)
    assert bethe_entropy(g, margs) == pytest.approx(2.8379, abs=1e-4)


def test_entropy_three_coordinate_chain():
    J = np.array([[2.0, -0.8, 0.0], [-0.8, 2.0, -0.7], [0.0, -0.7, 1.5]])
    cov = np.linalg.inv(J)
    cov = 0.5 * (cov + cov.T)
    g = build_chain(2, 2, 1)
    margs = marginals_from_joint(g, np.zeros(3), cov)
    assert abs(bethe_entropy(g, margs) - gaussian_entropy(cov)) < 1e-9


def test_entropy_cycle_has_gap():
    g = build_cycle(4, 4, 2)
    mean, cov = random_markov_gaussian(g, np.random.default_rng(3))
    gap = bethe_entropy(g, marginals_from_joint(g, mean, cov)) - gaussian_entropy(cov)
    assert abs(gap) > 1e-6


def test_entropy_errors():
    g = build_chain(2, 2, 1)
    margs = marginals_from_joint(g, np.zeros(3), np.eye(3))
    del margs[NodeRef("variable", 1)]
    with pytest.raises(ValueError, match="variable:1"):
        bethe_entropy(g, margs)
    with pytest.raises(NumericalError):
        gaussian_entropy(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_marginal_rejects_asymmetric_covariance():
    with pytest.raises(ValueError):
        GaussianMarginal(NodeRef("factor", 0), [0, 0], [[1, 0.5], [0.4, 1]])


def test_node_ref_round_trip():
    assert NodeRef.parse(str(NodeRef("variable", 3))) == NodeRef("variable", 3)


def test_layout_shape_consistency():
    with pytest.raises(ValueError):
        JointLayout(5, "sequence", (2, 3))


chains = st.tuples(st.integers(1, 8), st.integers(2, 9)).flatmap(
    lambda mf: st.tuples(st.just(mf[0]), st.just(mf[1]), st.integers(1, mf[1] - 1))
)


@st.composite
def cycles(draw):
    F = draw(st.integers(2, 9))
    V = draw(st.integers(1, F - 1))
    m_min = max(2, -(-F // (F - V)))
    m = draw(st.integers(m_min, m_min + 5))
    if m > 2 and m * (F - V) == F:
        m += 1
    return m, F, V


@st.composite
def grids(draw):
    rows, cols = draw(st.integers(1, 3)), draw(st.integers(1, 3))
    if rows >= 2 and cols >= 2:
        V = draw(st.integers(1, 3))
        return rows, cols, 2 * V, V
    P = draw(st.integers(2, 6))
    return rows, cols, P, draw(st.integers(1, P - 1))


@given(chains)
def test_chain_valid_and_acyclic(args):
    g = build_chain(*args)
    assert validate(g) == []
    assert is_acyclic(g)
    assert np.all(coefficient_sums(g) == 1)


@given(cycles())
def test_cycle_valid_and_cyclic(args):
    g = build_cycle(*args)
    assert validate(g) == []
    assert not is_acyclic(g)
    assert np.all(coefficient_sums(g) == 1)


@given(grids())
def test_grid_valid(args):
    g = build_grid(*args)
    assert validate(g) == []
    assert np.all(coefficient_sums(g) == 1)
    assert all(d in (1, 2) for d in g.degrees())


@given(st.integers(1, 5))
def test_cubemap_valid(f):
    g = build_cubemap(f)
    assert validate(g) == []
    assert not is_acyclic(g)
    assert np.all(coefficient_sums(g) == 1)


@given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.integers(2, 5))
def test_bethe_entropy_exact_on_chains(seed, m, F):
    gen = np.random.default_rng(seed)
    g, mean, cov, margs = random_chain_gaussian(gen, m, F, max(1, F // 2))
    assert abs(bethe_entropy(g, margs) - gaussian_entropy(cov)) < 1e-9
