"""Markov generator of the spin system: structure maps, drift and predual.

For a channel with flip operator ``F`` the structure maps are

    theta_{-1}(X) = -i [X, F*]          theta_{+1}(X) = -i [X, F]
    kappa_{+1}(X) = 2 F* X F - {X, F*F}
    kappa_{-1}(X) = 2 F X F* - {X, F F*}

and the Heisenberg generator sums, over every channel,

    -i Im(g|g)^- [X, F*F] + i Im(g|g)^+ [X, F F*]
    + Re(g|g)^- kappa_{+1}(X) + Re(g|g)^+ kappa_{-1}(X).

Only channels with positive energy carry real parts, so only they produce
jumps; negative channels enter through the effective Hamiltonian alone.
"""

from __future__ import annotations

import dataclasses
import functools
import logging
import weakref
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .bath import BathModel, Susceptibility, susceptibility
from .lattice import Channel, CouplingGraph, SignClass, enumerate_channels
from .operators import (
    LocalOperator,
    build_F,
    embed_dense,
    flip_lower,
    zero,
)

logger = logging.getLogger(__name__)

TIME = (0, -1)


@dataclass(frozen=True, eq=False)
class ChannelTerm:
    """One flip operator with its susceptibilities."""

    F: LocalOperator
    susceptibility: Susceptibility
    channel: Channel | None = None
    label: str = ""
    F_star: LocalOperator = field(init=False, repr=False)
    FstarF: LocalOperator = field(init=False, repr=False)
    FFstar: LocalOperator = field(init=False, repr=False)

    def __post_init__(self):
        fs = self.F.adjoint()
        object.__setattr__(self, "F_star", fs)
        object.__setattr__(self, "FstarF", LocalOperator(self.F.support, fs.matrix @ self.F.matrix))
        object.__setattr__(self, "FFstar", LocalOperator(self.F.support, self.F.matrix @ fs.matrix))

    @property
    def support(self) -> tuple[int, ...]:
        return self.F.support

    @property
    def energy(self) -> float:
        return self.susceptibility.energy

    @property
    def gamma_minus(self) -> float:
        return self.susceptibility.gamma_minus

    @property
    def gamma_plus(self) -> float:
        return self.susceptibility.gamma_plus

    @property
    def dissipative(self) -> bool:
        return self.gamma_minus > 0 or self.gamma_plus > 0


@dataclass(frozen=True)
class Jump:
    operator: LocalOperator
    rate: float
    label: str
    kind: str  # "emission" (F, gamma-) or "absorption" (F*, gamma+)


@dataclass(frozen=True, eq=False)
class GeneratorBundle:
    """Channel terms of a finite lattice plus everything derived from them."""

    terms: tuple[ChannelTerm, ...]
    n_sites: int
    graph: CouplingGraph | None = None
    bath: BathModel | None = None

    @functools.cached_property
    def sites(self) -> tuple[int, ...]:
        return tuple(range(self.n_sites))

    @property
    def dim(self) -> int:
        return 1 << self.n_sites

    @functools.cached_property
    def noise_terms(self) -> tuple[int, ...]:
        """Indices of the terms that carry quantum noises (positive channels)."""
        return tuple(k for k, t in enumerate(self.terms) if t.dissipative)

    @functools.cached_property
    def effective_hamiltonian(self) -> LocalOperator:
        h = zero(self.sites)
        for t in self.terms:
            s = t.susceptibility
            if s.minus.imag:
                h = h + t.FstarF * s.minus.imag
            if s.plus.imag:
                h = h - t.FFstar * s.plus.imag
        return LocalOperator(h.support, h.matrix, "H_eff")

    @functools.cached_property
    def drift(self) -> LocalOperator:
        g = zero(self.sites)
        for t in self.terms:
            s = t.susceptibility
            if s.minus:
                g = g + t.FstarF * s.minus
            if s.plus:
                g = g + t.FFstar * s.plus.conjugate()
        return LocalOperator(g.support, g.matrix, "G")

    @functools.cached_property
    def jump_list(self) -> tuple[Jump, ...]:
        jumps = []
        for t in self.terms:
            if t.gamma_minus > 0:
                jumps.append(Jump(t.F, t.gamma_minus, t.label, "emission"))
            if t.gamma_plus > 0:
                jumps.append(Jump(t.F_star, t.gamma_plus, t.label, "absorption"))
        return tuple(jumps)

    # full-space matrices, cached for the dynamics
    @functools.cached_property
    def hamiltonian_full(self) -> sp.csr_array:
        return self.effective_hamiltonian.full(self.n_sites)

    @functools.cached_property
    def jumps_full(self) -> tuple[tuple[sp.csr_array, float], ...]:
        return tuple((j.operator.full(self.n_sites), j.rate) for j in self.jump_list)

    @functools.cached_property
    def decay_full(self) -> sp.csr_array:
        """``1/2 sum_k rate_k L_k* L_k``."""
        d = sp.csr_array((self.dim, self.dim), dtype=complex)
        for L, rate in self.jumps_full:
            d = d + 0.5 * rate * (L.conj().T @ L)
        return d.tocsr()

    @functools.cached_property
    def terms_full(self) -> tuple[tuple[sp.csr_array, Susceptibility], ...]:
        return tuple((t.F.full(self.n_sites), t.susceptibility) for t in self.terms)

    def degenerate_energy_classes(self, decimals: int = 12) -> dict[float, list[str]]:
        """Positive channels grouped by energy."""
        classes: dict[float, list[str]] = defaultdict(list)
        for k in self.noise_terms:
            t = self.terms[k]
            classes[round(t.energy, decimals)].append(t.label)
        return dict(classes)

    def susceptibility_table(self, decimals: int = 12) -> dict[float, Susceptibility]:
        """One entry per distinct energy among the positive channels."""
        return {round(self.terms[k].energy, decimals): self.terms[k].susceptibility for k in self.noise_terms}


def assemble_bundle(
    graph: CouplingGraph,
    bath: BathModel,
    null_tol: float | None = None,
    include_null_pv: bool | None = None,
) -> GeneratorBundle:
    """Enumerate channels, build their flip operators and susceptibilities."""
    if null_tol is None:
        null_tol = bath.null_tol
    if include_null_pv is None:
        include_null_pv = bath.include_null_pv
    if (null_tol, include_null_pv) != (bath.null_tol, bath.include_null_pv):
        bath = dataclasses.replace(bath, null_tol=null_tol, include_null_pv=include_null_pv)
    cache: dict[float, Susceptibility] = {}
    terms = []
    for ch in enumerate_channels(graph, null_tol):
        if ch.sign_class is SignClass.NULL and not include_null_pv:
            s = Susceptibility(ch.energy)
        else:
            if ch.energy not in cache:
                cache[ch.energy] = susceptibility(bath, ch.energy)
            s = cache[ch.energy]
        terms.append(ChannelTerm(build_F(graph, ch.site, ch.neighborhood), s, ch, ch.label(graph)))
    return GeneratorBundle(tuple(terms), graph.n_sites, graph, bath)


def two_level_bundle(
    gamma_minus: float,
    gamma_plus: float = 0.0,
    energy: float = 1.0,
    lamb_minus: float = 0.0,
    lamb_plus: float = 0.0,
) -> GeneratorBundle:
    """Single spin whose one channel lowers ``+1 -> -1`` (``F = D*``)."""
    s = Susceptibility(energy, complex(gamma_minus / 2, lamb_minus), complex(gamma_plus / 2, lamb_plus))
    return GeneratorBundle((ChannelTerm(flip_lower(0), s, None, "two-level"),), 1)


def bundle_from_terms(terms: Sequence[ChannelTerm], n_sites: int) -> GeneratorBundle:
    return GeneratorBundle(tuple(terms), n_sites)


# ---------------------------------------------------------------------------
# structure maps on local operators


_EMBED_CACHE: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()


def _dense_on(op: LocalOperator, support: tuple[int, ...], cache: bool = False) -> np.ndarray:
    if not cache:
        return embed_dense(op, support)
    per_op = _EMBED_CACHE.setdefault(op, {})
    m = per_op.get(support)
    if m is None:
        m = per_op[support] = embed_dense(op, support)
        m.setflags(write=False)
    return m


def _union(*supports: Iterable[int]) -> tuple[int, ...]:
    return tuple(sorted(set().union(*supports)))


def theta(direction: int, term: ChannelTerm, X: LocalOperator) -> LocalOperator:
    """``-i [X, F*]`` for ``direction=-1``, ``-i [X, F]`` for ``+1``."""
    if direction not in (-1, 1):
        raise ValueError("direction must be -1 or +1")
    u = _union(X.support, term.support)
    x = _dense_on(X, u)
    f = _dense_on(term.F_star if direction == -1 else term.F, u, cache=True)
    return LocalOperator(u, -1j * (x @ f - f @ x))


def kappa(sign: int, term: ChannelTerm, X: LocalOperator) -> LocalOperator:
    """``2F*XF - {X,F*F}`` for ``sign=+1``; ``2FXF* - {X,FF*}`` for ``-1``."""
    if sign not in (-1, 1):
        raise ValueError("sign must be -1 or +1")
    u = _union(X.support, term.support)
    x = _dense_on(X, u)
    f = _dense_on(term.F, u, cache=True)
    fs = f.conj().T
    a, b = (fs, f) if sign == 1 else (f, fs)
    ab = a @ b
    return LocalOperator(u, 2 * a @ x @ b - x @ ab - ab @ x)


def _theta_zero_dense(x: np.ndarray, f: np.ndarray, s: Susceptibility) -> np.ndarray:
    fs = f.conj().T
    fsf, ffs = fs @ f, f @ fs
    out = np.zeros_like(x)
    if s.minus.imag:
        out += -1j * s.minus.imag * (x @ fsf - fsf @ x)
    if s.plus.imag:
        out += 1j * s.plus.imag * (x @ ffs - ffs @ x)
    if s.minus.real:
        out += s.minus.real * (2 * fs @ x @ f - x @ fsf - fsf @ x)
    if s.plus.real:
        out += s.plus.real * (2 * f @ x @ fs - x @ ffs - ffs @ x)
    return out


def theta_zero(bundle: GeneratorBundle, X: LocalOperator) -> LocalOperator:
    """Heisenberg generator applied to a local operator.

    Only channels whose flip operator overlaps ``X`` contribute, so the result
    lives on ``support(X)`` plus those channel supports.
    """
    xs = set(X.support)
    touching = [t for t in bundle.terms if xs & set(t.support)]
    u = _union(X.support, *(t.support for t in touching))
    x = _dense_on(X, u)
    out = np.zeros_like(x)
    for t in touching:
        out += _theta_zero_dense(x, _dense_on(t.F, u, cache=True), t.susceptibility)
    return LocalOperator(u, out, "theta0")


def theta_zero_full(bundle: GeneratorBundle, X: np.ndarray) -> np.ndarray:
    """Heisenberg generator on a full-lattice dense matrix."""
    out = np.zeros_like(X, dtype=complex)
    for f, s in bundle.terms_full:
        out += _theta_zero_dense(X, f.toarray(), s)
    return out


def drift_operator(bundle: GeneratorBundle) -> LocalOperator:
    return bundle.drift


def structure_map(bundle: GeneratorBundle, alpha: tuple[int, int], X: LocalOperator) -> LocalOperator:
    """``theta_alpha`` for an Ito index ``(n, k)`` or :data:`TIME`."""
    if alpha == TIME:
        return theta_zero(bundle, X)
    n, k = alpha
    return theta(n, bundle.terms[k], X)


# ---------------------------------------------------------------------------
# Schrodinger picture


class StateError(ValueError):
    """Density operator fails self-adjointness or normalization."""


def _check_state(rho, tol: float = 1e-10) -> None:
    if sp.issparse(rho):
        dev = abs(rho - rho.conj().T)
        err = dev.max() if dev.nnz else 0.0
        tr = rho.diagonal().sum()
    else:
        err = np.abs(rho - rho.conj().T).max()
        tr = np.trace(rho)
    if err > tol:
        raise StateError(f"density operator is not self-adjoint (deviation {err:.2e})")
    if abs(tr - 1) > tol:
        raise StateError(f"density operator trace is {tr}, not 1")


def _right(rho, A):
    """``rho @ A`` for sparse ``A`` and dense or sparse ``rho``."""
    if sp.issparse(rho):
        return rho @ A
    return (A.T @ rho.T).T


def lindblad_rhs(bundle: GeneratorBundle, rho):
    """``L_*(rho)`` without input validation (dense or sparse ``rho``)."""
    H = bundle.hamiltonian_full
    D = bundle.decay_full
    out = -1j * (H @ rho - _right(rho, H)) - (D @ rho + _right(rho, D))
    for L, rate in bundle.jumps_full:
        out = out + rate * _right(L @ rho, L.conj().T)
    return out


def schrodinger_generator(bundle: GeneratorBundle, rho, check: bool = True):
    """Predual of :func:`theta_zero` in GKSL form.

    ``L_*(rho) = -i[H_eff, rho] + sum gamma- (F rho F* - {F*F, rho}/2)
    + gamma+ (F* rho F - {F F*, rho}/2)``.
    """
    if check:
        _check_state(rho)
    return lindblad_rhs(bundle, rho)


def liouvillian(bundle: GeneratorBundle) -> sp.csr_array:
    """Sparse superoperator of ``L_*`` acting on column-stacked ``vec(rho)``."""
    d = bundle.dim
    eye = sp.eye_array(d, dtype=complex, format="csr")
    H = bundle.hamiltonian_full
    D = bundle.decay_full
    # vec(A rho B) = (B^T kron A) vec(rho)
    out = -1j * (sp.kron(eye, H) - sp.kron(H.T, eye)) - (sp.kron(eye, D) + sp.kron(D.T, eye))
    for L, rate in bundle.jumps_full:
        out = out + rate * sp.kron(L.conj(), L)
    return sp.csr_array(out)


# ---------------------------------------------------------------------------
# Ito table


@dataclass(frozen=True)
class ItoTable:
    """Products of stochastic differentials: ``dM^b dM^c = sum_a c_a^{bc} dM^a``.

    Indices are ``(n, k)`` with ``n = -1`` for ``dB_k``, ``n = +1`` for
    ``dB_k*`` and ``k`` the term index in the bundle, or :data:`TIME`.
    """

    constants: dict[tuple[tuple[int, int], tuple[int, int]], tuple[tuple[tuple[int, int], complex], ...]]
    indices: tuple[tuple[int, int], ...]

    def product(self, b: tuple[int, int], c: tuple[int, int]) -> tuple[tuple[tuple[int, int], complex], ...]:
        return self.constants.get((b, c), ())

    def coefficient(self, a, b, c) -> complex:
        return sum((coef for idx, coef in self.product(b, c) if idx == a), 0j)

    @staticmethod
    def conjugate(index: tuple[int, int]) -> tuple[int, int]:
        if index == TIME:
            return TIME
        n, k = index
        return (-n, k)


def ito_table(bundle: GeneratorBundle) -> ItoTable:
    constants = {}
    indices = []
    for k in bundle.noise_terms:
        t = bundle.terms[k]
        indices += [(-1, k), (1, k)]
        if t.gamma_minus:
            constants[((-1, k), (1, k))] = ((TIME, complex(t.gamma_minus)),)
        if t.gamma_plus:
            constants[((1, k), (-1, k))] = ((TIME, complex(t.gamma_plus)),)
    return ItoTable(constants, tuple(indices) + (TIME,))


# ---------------------------------------------------------------------------
# identity checks


@dataclass(frozen=True)
class Residual:
    frobenius: float
    operator: float
    scaled: float  # Frobenius / sqrt(dimension)

    @classmethod
    def of(cls, m: np.ndarray | LocalOperator) -> Residual:
        if isinstance(m, LocalOperator):
            m = m.dense()
        fro = float(np.linalg.norm(m))
        op = float(np.linalg.norm(m, 2)) if m.size else 0.0
        return cls(fro, op, fro / np.sqrt(max(m.shape[0], 1)))

    @classmethod
    def worst(cls, items: Iterable[Residual]) -> Residual:
        items = list(items) or [cls(0.0, 0.0, 0.0)]
        return cls(
            max(r.frobenius for r in items), max(r.operator for r in items), max(r.scaled for r in items)
        )


def check_lemma1(term: ChannelTerm, X: LocalOperator, Y: LocalOperator) -> Residual:
    """``kappa_i(XY) - kappa_i(X)Y - X kappa_i(Y) - 2 theta_{-i}(X) theta_i(Y)`` for i = +-1."""
    u = _union(X.support, Y.support, term.support)
    x, y = _dense_on(X, u), _dense_on(Y, u)
    xy = LocalOperator(u, x @ y)
    out = []
    for i in (1, -1):
        r = (
            _dense_on(kappa(i, term, xy), u)
            - _dense_on(kappa(i, term, X), u) @ y
            - x @ _dense_on(kappa(i, term, Y), u)
            - 2 * _dense_on(theta(-i, term, X), u) @ _dense_on(theta(i, term, Y), u)
        )
        out.append(Residual.of(r))
    return Residual.worst(out)


@dataclass(frozen=True)
class Theorem1Report:
    structure: Residual
    conjugation: Residual
    per_index: dict


def check_theorem1(
    bundle: GeneratorBundle, X: LocalOperator, Y: LocalOperator, table: ItoTable | None = None
) -> Theorem1Report:
    """Structure equation for every Ito index, plus the *-flow rule."""
    table = table or ito_table(bundle)
    xy = X @ Y
    xs = X.adjoint()
    maps = {
        name: {a: structure_map(bundle, a, op) for a in table.indices}
        for name, op in (("x", X), ("y", Y), ("xy", xy), ("xs", xs))
    }
    u = _union(xy.support, *(m.support for d in maps.values() for m in d.values()))
    dense = {name: {a: _dense_on(m, u) for a, m in d.items()} for name, d in maps.items()}
    x, y = _dense_on(X, u), _dense_on(Y, u)
    per = {}
    for a in table.indices:
        r = dense["xy"][a] - dense["x"][a] @ y - x @ dense["y"][a]
        for (b, c), entries in table.constants.items():
            for idx, coef in entries:
                if idx == a:
                    r = r - coef * (dense["x"][b] @ dense["y"][c])
        per[a] = Residual.of(r)
    conj = [
        Residual.of(dense["xs"][a] - dense["x"][table.conjugate(a)].conj().T) for a in table.indices
    ]
    return Theorem1Report(Residual.worst(per.values()), Residual.worst(conj), per)


def random_local_operator(
    rng: np.random.Generator, n_sites: int, max_support: int = 2, hermitian: bool = False
) -> LocalOperator:
    """Complex Gaussian operator on a random set of 1..max_support sites."""
    k = int(rng.integers(1, max_support + 1))
    support = tuple(sorted(rng.choice(n_sites, size=min(k, n_sites), replace=False).tolist()))
    d = 1 << len(support)
    m = (rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))) / np.sqrt(2)
    if hermitian:
        m = (m + m.conj().T) / 2
    return LocalOperator(support, m, "random")


def random_density_matrix(rng: np.random.Generator, n_sites: int, rank: int | None = None) -> np.ndarray:
    d = 1 << n_sites
    rank = rank or d
    a = rng.standard_normal((d, rank)) + 1j * rng.standard_normal((d, rank))
    rho = a @ a.conj().T
    return rho / np.trace(rho).real
