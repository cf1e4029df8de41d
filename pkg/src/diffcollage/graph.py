"""Factor graphs over a flat joint content vector.

Every node (factor or variable) owns a set of joint-coordinate indices.
Sets are stored sorted; a node may additionally carry a *content order*
(a permutation of its set) used when gathering node-local vectors, which
matters for windows that wrap around a ring.
"""

from __future__ import annotations

import dataclasses
import math
from collections.abc import Iterable, Mapping, Sequence
from typing import NamedTuple

import numpy as np

from .errors import NumericalError

FACTOR = "factor"
VARIABLE = "variable"


class NodeRef(NamedTuple):
    kind: str
    index: int

    def __str__(self):
        return f"{self.kind}:{self.index}"

    @classmethod
    def parse(cls, text: str) -> "NodeRef":
        kind, _, idx = text.partition(":")
        if kind not in (FACTOR, VARIABLE) or not idx.isdigit():
            raise ValueError(f"bad node reference {text!r}; expected 'factor:N' or 'variable:N'")
        return cls(kind, int(idx))


@dataclasses.dataclass(frozen=True)
class JointLayout:
    """Size of the joint vector plus optional rendering metadata.

    ``shape`` is (N,) for sequences and rings, (6, f, f) for cubemaps and the
    (H, W) bounding box for 2D content. When only part of the bounding box is
    covered, ``pixels`` lists the (row, col) of every joint coordinate.
    """

    total_dim: int
    kind: str = "flat"
    shape: tuple[int, ...] | None = None
    pixels: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if self.total_dim < 1:
            raise ValueError("total_dim must be >= 1")
        if self.pixels is not None:
            if len(self.pixels) != self.total_dim:
                raise ValueError("pixel map length must equal total_dim")
            if self.shape is None or len(self.shape) != 2:
                raise ValueError("a pixel map needs a 2D bounding shape")
        elif self.shape is not None and math.prod(self.shape) != self.total_dim:
            raise ValueError(f"shape {self.shape} inconsistent with total_dim {self.total_dim}")


@dataclasses.dataclass(frozen=True)
class Violation:
    kind: str  # factor | variable | coordinate | graph
    index: int
    rule: str
    detail: str

    def __str__(self):
        return f"{self.kind} {self.index}: {self.rule}: {self.detail}"


@dataclasses.dataclass(frozen=True)
class BetheCoefficients:
    factor_coeffs: tuple[float, ...]
    variable_coeffs: tuple[float, ...]

    def coeff(self, node: NodeRef) -> float:
        if node.kind == FACTOR:
            return self.factor_coeffs[node.index]
        return self.variable_coeffs[node.index]


def _as_sets(sets: Iterable[Iterable[int]]) -> tuple[tuple[int, ...], ...]:
    return tuple(tuple(int(c) for c in s) for s in sets)


@dataclasses.dataclass(frozen=True)
class FactorGraph:
    layout: JointLayout
    factors: tuple[tuple[int, ...], ...]
    variables: tuple[tuple[int, ...], ...]
    edges: tuple[tuple[int, ...], ...] | None = None
    condition_tags: Mapping[NodeRef, str] | None = None
    factor_orders: tuple[tuple[int, ...], ...] | None = None
    variable_orders: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "factors", _as_sets(self.factors))
        object.__setattr__(self, "variables", _as_sets(self.variables))
        if self.edges is None:
            object.__setattr__(self, "edges", subset_edges(self.factors, self.variables))
        else:
            object.__setattr__(self, "edges", _as_sets(self.edges))
        if len(self.edges) != len(self.factors):
            raise ValueError("edges must list one variable-index list per factor")
        for name in ("factor_orders", "variable_orders"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _as_sets(val))

    @property
    def num_factors(self) -> int:
        return len(self.factors)

    @property
    def num_variables(self) -> int:
        return len(self.variables)

    def nodes(self) -> list[NodeRef]:
        """Factors ascending, then variables ascending."""
        return [NodeRef(FACTOR, j) for j in range(self.num_factors)] + [
            NodeRef(VARIABLE, i) for i in range(self.num_variables)
        ]

    def degrees(self) -> tuple[int, ...]:
        deg = [0] * self.num_variables
        for incident in self.edges:
            for i in incident:
                if 0 <= i < self.num_variables:
                    deg[i] += 1
        return tuple(deg)

    def coords(self, node: NodeRef) -> tuple[int, ...]:
        """Node coordinates in content order (the order node models see)."""
        if node.kind == FACTOR:
            orders, sets = self.factor_orders, self.factors
        elif node.kind == VARIABLE:
            orders, sets = self.variable_orders, self.variables
        else:
            raise ValueError(f"unknown node kind {node.kind!r}")
        if not 0 <= node.index < len(sets):
            raise IndexError(f"{node} out of range")
        if orders is not None and orders[node.index]:
            return orders[node.index]
        return sets[node.index]

    def node_dim(self, node: NodeRef) -> int:
        return len(self.coords(node))


def subset_edges(factors, variables) -> tuple[tuple[int, ...], ...]:
    var_sets = [frozenset(v) for v in variables]
    out = []
    for f in factors:
        fs = frozenset(f)
        out.append(tuple(i for i, v in enumerate(var_sets) if v <= fs))
    return tuple(out)


def _sorted_with_order(seq: Sequence[int]) -> tuple[tuple[int, ...], tuple[int, ...] | None]:
    seq = tuple(int(c) for c in seq)
    srt = tuple(sorted(seq))
    return srt, (None if srt == seq else seq)


def _with_orders(layout, factor_seqs, variable_seqs, **kw) -> FactorGraph:
    fs, fo = zip(*(_sorted_with_order(s) for s in factor_seqs)) if factor_seqs else ((), ())
    vs, vo = zip(*(_sorted_with_order(s) for s in variable_seqs)) if variable_seqs else ((), ())
    f_orders = tuple(o or () for o in fo) if any(o is not None for o in fo) else None
    v_orders = tuple(o or () for o in vo) if any(o is not None for o in vo) else None
    return FactorGraph(layout, fs, vs, factor_orders=f_orders, variable_orders=v_orders, **kw)


# --------------------------------------------------------------------------
# builders


def build_chain(num_factors: int, factor_len: int, overlap: int) -> FactorGraph:
    """Linear chain of 1D windows.

    Factor j covers [j*S, j*S + F) with stride S = F - V. Variables are, in
    positional order: the leading leaf [0, S), the m - 1 overlaps of
    consecutive factors, and the trailing leaf [N - S, N).
    """
    m, F, V = int(num_factors), int(factor_len), int(overlap)
    if m < 1:
        raise ValueError("num_factors must be >= 1")
    if F < 2:
        raise ValueError("factor_len must be >= 2")
    if not 1 <= V < F:
        raise ValueError(f"overlap must satisfy 1 <= V < F, got V={V}, F={F}")
    S = F - V
    N = m * F - (m - 1) * V
    factors = [tuple(range(j * S, j * S + F)) for j in range(m)]
    variables = [tuple(range(0, S))]
    variables += [tuple(range((j + 1) * S, j * S + F)) for j in range(m - 1)]
    variables.append(tuple(range(N - S, N)))
    return FactorGraph(JointLayout(N, "sequence", (N,)), factors, variables)


def build_cycle(num_factors: int, factor_len: int, overlap: int) -> FactorGraph:
    """Ring of N = m*(F - V) coordinates; the last factor wraps onto the first."""
    m, F, V = int(num_factors), int(factor_len), int(overlap)
    if m < 2:
        raise ValueError("a cycle needs num_factors >= 2")
    if F < 2 or not 1 <= V < F:
        raise ValueError(f"need F >= 2 and 1 <= V < F, got F={F}, V={V}")
    S = F - V
    N = m * S
    if N < F:
        raise ValueError(f"ring of size m*(F-V)={N} is shorter than a factor (F={F}); a factor would wrap onto itself")
    if N == F and m > 2:
        raise ValueError(f"ring of size {N} equals the factor length; every factor would cover the whole ring")
    factors = [[(j * S + k) % N for k in range(F)] for j in range(m)]
    variables = [[((j + 1) * S + k) % N for k in range(V)] for j in range(m)]
    return _with_orders(JointLayout(N, "ring", (N,)), factors, variables)


def build_grid(rows: int, cols: int, patch: int, overlap: int) -> FactorGraph:
    """P x P patches on a diagonal lattice.

    Patch (r, c) sits at pixel (y, x) = ((r + c) S, (c - r + rows - 1) S) with
    S = P - V, so lattice neighbours (r, c +- 1) and (r +- 1, c) meet only at
    V x V corners. Those corners are the degree-2 variables; corners facing a
    missing neighbour become degree-1 leaf variables. Joint coordinates are
    the covered pixels of the bounding box in row-major order.
    """
    R, C, P, V = int(rows), int(cols), int(patch), int(overlap)
    if R < 1 or C < 1:
        raise ValueError("rows and cols must be >= 1")
    if P < 2 or not 1 <= V < P:
        raise ValueError(f"need P >= 2 and 1 <= V < P, got P={P}, V={V}")
    if R >= 2 and C >= 2 and 2 * V != P:
        if 2 * V < P:
            raise ValueError(
                f"overlap V={V} < P/2 leaves pixels between diagonal patches covered by no factor"
            )
        raise ValueError(
            f"overlap V={V} > P/2 makes non-neighbouring patches overlap; use V = P/2 for 2D lattices"
        )
    S = P - V
    side = (R + C - 2) * S + P
    origin = {(r, c): ((r + c) * S, (c - r + R - 1) * S) for r in range(R) for c in range(C)}

    covered = np.zeros((side, side), dtype=bool)
    for y, x in origin.values():
        covered[y : y + P, x : x + P] = True
    index = -np.ones((side, side), dtype=np.int64)
    rr, cc = np.nonzero(covered)
    index[rr, cc] = np.arange(rr.size)
    pixels = tuple(zip(rr.tolist(), cc.tolist()))

    def block(y, x, h, w):
        return tuple(sorted(int(i) for i in index[y : y + h, x : x + w].ravel()))

    keys = sorted(origin)
    factors = [block(*origin[k], P, P) for k in keys]
    variables = []
    for r, c in keys:
        y, x = origin[(r, c)]
        if (r, c + 1) in origin:  # bottom-right corner
            variables.append(block(y + S, x + S, V, V))
        if (r + 1, c) in origin:  # bottom-left corner
            variables.append(block(y + S, x, V, V))
    for r, c in keys:
        y, x = origin[(r, c)]
        if (r, c - 1) not in origin:
            variables.append(block(y, x, V, V))
        if (r - 1, c) not in origin:
            variables.append(block(y, x + S, V, V))
        if (r, c + 1) not in origin:
            variables.append(block(y + S, x + S, V, V))
        if (r + 1, c) not in origin:
            variables.append(block(y + S, x, V, V))
    layout = JointLayout(rr.size, "image", (side, side), pixels)
    return FactorGraph(layout, factors, variables)


CUBE_FACES = ("F", "B", "L", "R", "U", "D")


def build_cubemap(face_dim: int) -> FactorGraph:
    """Three four-face loops as factors; opposite-face pairs as variables.

    Faces are stored in the order F, B, L, R, U, D, each face_dim**2 values.
    """
    f = int(face_dim)
    if f < 1:
        raise ValueError("face_dim must be >= 1")
    n = f * f

    def faces(*names):
        out = []
        for name in names:
            k = CUBE_FACES.index(name)
            out.extend(range(k * n, (k + 1) * n))
        return tuple(sorted(out))

    factors = [faces("F", "B", "L", "R"), faces("F", "B", "U", "D"), faces("L", "R", "U", "D")]
    variables = [faces("L", "R"), faces("U", "D"), faces("F", "B")]
    return FactorGraph(JointLayout(6 * n, "cubemap", (6, f, f)), factors, variables)


def build_custom(total_dim: int, factors, variables) -> FactorGraph:
    return _with_orders(JointLayout(int(total_dim)), factors, variables)


# --------------------------------------------------------------------------
# analysis


def bethe_coefficients(graph: FactorGraph) -> BetheCoefficients:
    return BetheCoefficients(
        tuple(1.0 for _ in graph.factors),
        tuple(float(1 - d) for d in graph.degrees()),
    )


def validate(graph: FactorGraph) -> list[Violation]:
    """Check every structural invariant; violations are returned, not raised."""
    out: list[Violation] = []
    N = graph.layout.total_dim
    groups = (("factor", graph.factors, graph.factor_orders), ("variable", graph.variables, graph.variable_orders))
    for kind, sets, orders in groups:
        for idx, s in enumerate(sets):
            if not s:
                out.append(Violation(kind, idx, "empty", "coordinate set is empty"))
            bad = [c for c in s if not 0 <= c < N]
            if bad:
                out.append(Violation(kind, idx, "range", f"coordinates {bad} outside [0, {N})"))
            if any(a >= b for a, b in zip(s, s[1:])):
                out.append(Violation(kind, idx, "sorted", "coordinate set is not strictly ascending"))
            if orders is not None and idx < len(orders) and orders[idx] and sorted(orders[idx]) != list(s):
                out.append(Violation(kind, idx, "order", "content order is not a permutation of the set"))

    covered = np.zeros(N, dtype=np.int64)
    for s in graph.factors:
        for c in s:
            if 0 <= c < N:
                covered[c] += 1
    missing = np.flatnonzero(covered == 0)
    for c in missing:
        out.append(Violation("coordinate", int(c), "coverage", "not contained in any factor"))

    var_sets = [frozenset(v) for v in graph.variables]
    listed = set()
    for j, incident in enumerate(graph.edges):
        fs = frozenset(graph.factors[j])
        for i in incident:
            if not 0 <= i < graph.num_variables:
                out.append(Violation("factor", j, "edge", f"references unknown variable {i}"))
                continue
            listed.add((j, i))
            if not var_sets[i] <= fs:
                extra = sorted(var_sets[i] - fs)
                out.append(
                    Violation("variable", i, "subset", f"listed under factor {j} but coordinates {extra} lie outside it")
                )
        for i, vs in enumerate(var_sets):
            if vs and vs <= fs and (j, i) not in listed:
                out.append(Violation("variable", i, "edge", f"subset of factor {j} but edge is missing"))

    deg = graph.degrees()
    for i, d in enumerate(deg):
        if d < 1:
            out.append(Violation("variable", i, "degree", "not attached to any factor"))

    # per-coordinate sum rule: (#factors) + sum over containing variables of (1 - d_i) == 1
    total = covered.astype(np.float64)
    for i, s in enumerate(graph.variables):
        for c in s:
            if 0 <= c < N:
                total[c] += 1 - deg[i]
    for c in np.flatnonzero((total != 1.0) & (covered > 0)):
        out.append(Violation("coordinate", int(c), "sum-rule", f"coefficient sum is {total[c]:g}, expected 1"))
    return out


def coefficient_sums(graph: FactorGraph) -> np.ndarray:
    """Per-coordinate sum of Bethe coefficients over the nodes containing it."""
    coeffs = bethe_coefficients(graph)
    total = np.zeros(graph.layout.total_dim)
    for node in graph.nodes():
        total[list(graph.coords(node))] += coeffs.coeff(node)
    return total


def is_acyclic(graph: FactorGraph) -> bool:
    """Union-find over the bipartite graph; any edge closing a loop means a cycle."""
    parent = list(range(graph.num_factors + graph.num_variables))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for j, incident in enumerate(graph.edges):
        for i in incident:
            a, b = find(j), find(graph.num_factors + i)
            if a == b:
                return False
            parent[a] = b
    return True


# --------------------------------------------------------------------------
# Gaussian marginals and Bethe entropy


@dataclasses.dataclass(frozen=True)
class GaussianMarginal:
    node: NodeRef
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of length {mean.size}")
        if not np.allclose(cov, cov.T, atol=1e-12, rtol=0):
            raise ValueError(f"covariance for {self.node} is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)


def gaussian_entropy(cov: np.ndarray) -> float:
    """0.5 * log((2 pi e)^k det cov)."""
    cov = np.atleast_2d(cov)
    k = cov.shape[0]
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance is not positive definite") from exc
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return 0.5 * (k * math.log(2 * math.pi * math.e) + logdet)


def marginals_from_joint(graph: FactorGraph, mean, cov) -> dict[NodeRef, GaussianMarginal]:
    """Exact node marginals of a joint Gaussian, in each node's content order."""
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    out = {}
    for node in graph.nodes():
        idx = list(graph.coords(node))
        out[node] = GaussianMarginal(node, mean[idx], cov[np.ix_(idx, idx)])
    return out


def bethe_entropy(graph: FactorGraph, marginals) -> float:
    """sum_j H(f_j) + sum_i (1 - d_i) H(x_i) for Gaussian node marginals."""
    if isinstance(marginals, Mapping):
        by_node = dict(marginals)
    else:
        by_node = {m.node: m for m in marginals}
    coeffs = bethe_coefficients(graph)
    total = 0.0
    for node in graph.nodes():
        if node not in by_node:
            raise ValueError(f"missing Gaussian marginal for {node}")
        marg = by_node[node]
        if marg.mean.size != graph.node_dim(node):
            raise ValueError(f"marginal for {node} has dim {marg.mean.size}, node has {graph.node_dim(node)}")
        total += coeffs.coeff(node) * gaussian_entropy(marg.covariance)
    return total
