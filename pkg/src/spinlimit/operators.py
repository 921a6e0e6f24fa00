"""Sparse operators on the spin configuration basis.

A :class:`LocalOperator` acts on the sites listed in ``support`` (sorted site
indices). Within that support, local basis index bit ``j`` is the spin at
``support[j]`` with ``1 <-> +1``, so the single-site basis order is
``(|-1>, |+1>)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Literal, Sequence

import numpy as np
import scipy.sparse as sp

from .lattice import CouplingGraph, LatticeError, SpinConfiguration, _neighborhood_values

DENSE_LIMIT = 12
ATOL = 1e-12

_PAULI = {
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    "y": np.array([[0, 1j], [-1j, 0]], dtype=complex),
    "z": np.array([[-1, 0], [0, 1]], dtype=complex),
}


def _as_csr(matrix) -> sp.csr_array:
    m = sp.csr_array(matrix, dtype=complex)
    m.eliminate_zeros()
    m.sort_indices()
    return m


@dataclass(frozen=True, eq=False)
class LocalOperator:
    support: tuple[int, ...]
    matrix: sp.csr_array
    tag: str = ""

    def __post_init__(self):
        support = tuple(int(s) for s in self.support)
        if list(support) != sorted(set(support)):
            raise ValueError(f"support must be sorted and unique: {support!r}")
        dim = 1 << len(support)
        if self.matrix.shape != (dim, dim):
            raise ValueError(f"matrix shape {self.matrix.shape} does not match support size {len(support)}")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "matrix", _as_csr(self.matrix))

    @property
    def dim(self) -> int:
        return 1 << len(self.support)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def adjoint(self) -> LocalOperator:
        return LocalOperator(self.support, self.matrix.conj().T, f"({self.tag})*" if self.tag else "")

    def trace(self) -> complex:
        return complex(self.matrix.diagonal().sum())

    def full(self, n_sites: int) -> sp.csr_array:
        """Matrix on the whole ``n_sites`` lattice."""
        return embed(self, range(n_sites)).matrix

    def is_partial_permutation(self) -> bool:
        """At most one nonzero per column."""
        return bool(np.all(np.diff(self.matrix.tocsc().indptr) <= 1))

    def __matmul__(self, other: LocalOperator) -> LocalOperator:
        return algebra(self, other, "product")

    def __add__(self, other: LocalOperator) -> LocalOperator:
        a, b = unify(self, other)
        return LocalOperator(a.support, a.matrix + b.matrix)

    def __sub__(self, other: LocalOperator) -> LocalOperator:
        a, b = unify(self, other)
        return LocalOperator(a.support, a.matrix - b.matrix)

    def __neg__(self) -> LocalOperator:
        return LocalOperator(self.support, -self.matrix, self.tag)

    def __mul__(self, scalar) -> LocalOperator:
        return LocalOperator(self.support, self.matrix * complex(scalar), self.tag)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"LocalOperator(support={self.support}, nnz={self.matrix.nnz}, tag={self.tag!r})"


def zero(support: Sequence[int] = ()) -> LocalOperator:
    support = tuple(sorted(support))
    d = 1 << len(support)
    return LocalOperator(support, sp.csr_array((d, d), dtype=complex), "0")


def identity(support: Sequence[int] = ()) -> LocalOperator:
    support = tuple(sorted(support))
    return LocalOperator(support, sp.eye_array(1 << len(support), dtype=complex, format="csr"), "1")


def pauli(axis: Literal["x", "y", "z"], r: int) -> LocalOperator:
    return LocalOperator((r,), _PAULI[axis], f"sigma^{axis}_{r}")


def projector(r: int, spin: int) -> LocalOperator:
    """``|spin><spin|`` at site ``r``."""
    m = np.zeros((2, 2), dtype=complex)
    k = 1 if spin == 1 else 0
    m[k, k] = 1
    return LocalOperator((r,), m, f"P{'+' if spin == 1 else '-'}_{r}")


def flip_raise(r: int) -> LocalOperator:
    """``D_r = |+1><-1|`` at site ``r``."""
    return LocalOperator((r,), np.array([[0, 0], [1, 0]], dtype=complex), f"D_{r}")


def flip_lower(r: int) -> LocalOperator:
    return flip_raise(r).adjoint()


# ---------------------------------------------------------------------------
# embedding


def _scatter(values: np.ndarray, positions: Sequence[int]) -> np.ndarray:
    """Spread the low bits of ``values`` onto bit ``positions``."""
    out = np.zeros_like(values)
    for j, p in enumerate(positions):
        out |= ((values >> j) & 1) << p
    return out


def embed(op: LocalOperator, target_support: Iterable[int]) -> LocalOperator:
    """Tensor ``op`` with the identity on the remaining sites of the target."""
    target = tuple(sorted(set(int(s) for s in target_support)))
    if target == op.support:
        return op
    pos = {s: i for i, s in enumerate(target)}
    try:
        on = [pos[s] for s in op.support]
    except KeyError:
        raise ValueError(f"support {op.support} not contained in {target}") from None
    off = [i for i in range(len(target)) if i not in set(on)]
    offs = _scatter(np.arange(1 << len(off), dtype=np.int64), off)

    coo = op.matrix.tocoo()
    rows = _scatter(coo.row.astype(np.int64), on)
    cols = _scatter(coo.col.astype(np.int64), on)
    big_rows = (rows[:, None] | offs[None, :]).ravel()
    big_cols = (cols[:, None] | offs[None, :]).ravel()
    data = np.repeat(coo.data, len(offs))
    d = 1 << len(target)
    m = sp.coo_array((data, (big_rows, big_cols)), shape=(d, d)).tocsr()
    return LocalOperator(target, m, op.tag)


def embed_dense(op: LocalOperator, target_support: Sequence[int]) -> np.ndarray:
    """Dense matrix of ``embed(op, target_support)``."""
    target = tuple(target_support)
    if target == op.support:
        return op.dense()
    pos = {s: i for i, s in enumerate(target)}
    try:
        on = [pos[s] for s in op.support]
    except KeyError:
        raise ValueError(f"support {op.support} not contained in {target}") from None
    k = np.arange(1 << len(target), dtype=np.int64)
    loc = np.zeros_like(k)
    for j, p in enumerate(on):
        loc |= ((k >> p) & 1) << j
    rest = k & ~int(sum(1 << p for p in on))
    return op.dense()[np.ix_(loc, loc)] * (rest[:, None] == rest[None, :])


def restrict(op: LocalOperator, support: Sequence[int]) -> LocalOperator:
    """Inverse of :func:`embed` for operators of the form ``A (x) 1``.

    Reads ``A`` from the block where every dropped site is ``-1`` and checks
    that re-embedding reproduces ``op``.
    """
    support = tuple(sorted(support))
    pos = {s: i for i, s in enumerate(op.support)}
    on = [pos[s] for s in support]
    d = 1 << len(support)
    idx = _scatter(np.arange(d, dtype=np.int64), on)
    block = op.matrix[idx][:, idx]
    out = LocalOperator(support, block, op.tag)
    if operator_distance(embed(out, op.support), op) > ATOL:
        raise ValueError(f"operator is not the identity outside {support}")
    return out


def unify(*ops: LocalOperator) -> list[LocalOperator]:
    support = sorted(set().union(*(o.support for o in ops)))
    return [embed(o, support) for o in ops]


def algebra(
    a: LocalOperator, b: LocalOperator, kind: Literal["product", "commutator", "anticommutator"]
) -> LocalOperator:
    a, b = unify(a, b)
    if kind == "product":
        m = a.matrix @ b.matrix
    elif kind == "commutator":
        m = a.matrix @ b.matrix - b.matrix @ a.matrix
    elif kind == "anticommutator":
        m = a.matrix @ b.matrix + b.matrix @ a.matrix
    else:
        raise ValueError(f"unknown algebra kind {kind!r}")
    return LocalOperator(a.support, m)


def commutator(a: LocalOperator, b: LocalOperator) -> LocalOperator:
    return algebra(a, b, "commutator")


def anticommutator(a: LocalOperator, b: LocalOperator) -> LocalOperator:
    return algebra(a, b, "anticommutator")


def operator_norm(op: LocalOperator, kind: Literal["fro", "op"] = "fro") -> float:
    if kind == "fro":
        return float(np.sqrt(np.sum(np.abs(op.matrix.data) ** 2)))
    if op.matrix.nnz == 0:
        return 0.0
    return float(np.linalg.norm(op.dense(), 2))


def operator_distance(a: LocalOperator, b: LocalOperator, kind: Literal["fro", "op"] = "fro") -> float:
    return operator_norm(a - b, kind)


def product_operator(factors: Iterable[LocalOperator], tag: str = "") -> LocalOperator:
    out = identity()
    for f in factors:
        out = out @ f
    return LocalOperator(out.support, out.matrix, tag)


# ---------------------------------------------------------------------------
# flip operators


def _flip_matrix(r: int, nbrs: Sequence[int], values: Sequence[int], raise_: bool):
    support = tuple(sorted((r, *nbrs)))
    pos = {s: i for i, s in enumerate(support)}
    d = 1 << len(support)
    k = np.arange(d, dtype=np.int64)
    mask = np.ones(d, dtype=bool)
    for s, v in zip(nbrs, values):
        mask &= ((k >> pos[s]) & 1) == (1 if v == 1 else 0)
    centre = 1 << pos[r]
    if raise_:
        cols = k[mask & ((k & centre) == 0)]
        rows = cols | centre
    else:
        cols = k[mask & ((k & centre) != 0)]
        rows = cols & ~centre
    m = sp.coo_array((np.ones(len(cols), dtype=complex), (rows, cols)), shape=(d, d))
    return support, m


def build_G(graph: CouplingGraph, r, sigma) -> LocalOperator:
    """Raise the spin at ``r`` when its neighbors are in configuration ``sigma``."""
    r = graph.index(r)
    values = _neighborhood_values(graph, r, sigma)
    support, m = _flip_matrix(r, graph.neighbors[r], values, raise_=True)
    return LocalOperator(support, m, f"G[{r}:{_sign_string(values)}]")


def build_F(graph: CouplingGraph, r, sigma) -> LocalOperator:
    """``G*_{r,-sigma} + G_{r,sigma}``: raise under ``sigma``, lower under ``-sigma``."""
    r = graph.index(r)
    values = _neighborhood_values(graph, r, sigma)
    nbrs = graph.neighbors[r]
    support, up = _flip_matrix(r, nbrs, values, raise_=True)
    _, down = _flip_matrix(r, nbrs, [-v for v in values], raise_=False)
    # with no neighbors sigma == -sigma and both branches together form sigma^x
    return LocalOperator(support, up + down, f"F[{r}:{_sign_string(values)}]")


def _sign_string(values: Sequence[int]) -> str:
    return "".join("+" if v == 1 else "-" for v in values) or "."


# ---------------------------------------------------------------------------
# basis action


@dataclass(frozen=True)
class BasisAction:
    """Image of a basis configuration under a partial-permutation operator.

    ``configuration`` is ``None`` when the configuration is annihilated.
    """

    configuration: SpinConfiguration | None
    amplitude: complex = 0.0

    @property
    def annihilated(self) -> bool:
        return self.configuration is None


def apply_to_basis(op: LocalOperator, config: SpinConfiguration):
    """Act with ``op`` on one basis configuration.

    Partial-permutation operators (F, G, D, projectors, identity) give a
    :class:`BasisAction`; anything else gives the full image column as a list
    of ``(configuration, amplitude)`` pairs.
    """
    spins = config.as_dict()
    missing = [s for s in op.support if s not in spins]
    if missing:
        raise LatticeError(f"configuration does not cover operator support sites {missing}")
    col = sum(1 << j for j, s in enumerate(op.support) if spins[s] == 1)
    csc = op.matrix.tocsc()
    lo, hi = csc.indptr[col], csc.indptr[col + 1]
    image = []
    for row, amp in zip(csc.indices[lo:hi], csc.data[lo:hi]):
        new = dict(spins)
        for j, s in enumerate(op.support):
            new[s] = 1 if (row >> j) & 1 else -1
        image.append((SpinConfiguration(config.sites, tuple(new[s] for s in config.sites)), complex(amp)))
    if op.is_partial_permutation():
        if not image:
            return BasisAction(None)
        return BasisAction(*image[0])
    return image
