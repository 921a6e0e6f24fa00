"""Finite spin lattices, coupling graphs and flip channels.

Sites are d-tuples of integers kept in lexicographic order. Everything
downstream refers to a site by its position in that order (its *index*), and
basis configurations are packed little-endian: bit ``i`` of a basis index is
the spin at site index ``i`` with ``1 <-> +1`` and ``0 <-> -1``.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

Site = tuple[int, ...]

MAX_ENUMERATION_SITES = 24
DEFAULT_NULL_TOL = 1e-12


class LatticeError(ValueError):
    """Invalid lattice description or configuration."""


@dataclass(frozen=True)
class CouplingGraph:
    """Sites of a finite lattice with symmetric finite-range couplings.

    ``couplings`` holds both orientations ``(i, j)`` and ``(j, i)`` keyed by
    site index. ``neighbors[i]`` is the sorted tuple of indices ``s`` with a
    nonzero ``J_is``.
    """

    dimension: int
    sites: tuple[Site, ...]
    couplings: Mapping[tuple[int, int], float]
    neighbors: tuple[tuple[int, ...], ...] = field(repr=False)
    _index: Mapping[Site, int] = field(repr=False, compare=False)

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    def index(self, site: Site | int) -> int:
        if isinstance(site, (int, np.integer)):
            if not 0 <= site < self.n_sites:
                raise LatticeError(f"site index {site} out of range")
            return int(site)
        try:
            return self._index[tuple(site)]
        except KeyError:
            raise LatticeError(f"unknown site {site!r}") from None

    def coupling(self, r: int, s: int) -> float:
        return self.couplings.get((r, s), 0.0)

    def neighbor_couplings(self, r: int) -> tuple[float, ...]:
        return tuple(self.couplings[(r, s)] for s in self.neighbors[r])

    def coupling_matrix(self) -> np.ndarray:
        J = np.zeros((self.n_sites, self.n_sites))
        for (r, s), j in self.couplings.items():
            J[r, s] = j
        return J

    def bonds(self) -> list[tuple[int, int, float]]:
        """Unordered coupled pairs ``(r, s, J)`` with ``r < s``."""
        return sorted((r, s, j) for (r, s), j in self.couplings.items() if r < s)


def build_lattice(
    dimension: int,
    sites: Iterable[Sequence[int]],
    couplings: Iterable[tuple[Sequence[int], Sequence[int], float]],
) -> CouplingGraph:
    """Build a :class:`CouplingGraph` from site labels and unordered couplings.

    A pair may be listed in both orientations only if the two values agree.
    Zero couplings are dropped, so they never create neighbors.
    """
    if dimension < 1:
        raise LatticeError("dimension must be a positive integer")
    labels = []
    for s in sites:
        label = tuple(int(c) for c in s)
        if len(label) != dimension:
            raise LatticeError(f"site {s!r} is not a {dimension}-tuple")
        labels.append(label)
    ordered = tuple(sorted(set(labels)))
    if len(ordered) != len(labels):
        raise LatticeError("duplicate site labels")
    index = {s: i for i, s in enumerate(ordered)}

    table: dict[tuple[int, int], float] = {}
    for a, b, j in couplings:
        a, b = tuple(int(c) for c in a), tuple(int(c) for c in b)
        for s in (a, b):
            if s not in index:
                raise LatticeError(f"coupling refers to unknown site {s!r}")
        if a == b:
            raise LatticeError(f"self-coupling at site {a!r}")
        j = float(j)
        key = (index[a], index[b])
        if key in table and table[key] != j:
            raise LatticeError(
                f"contradictory couplings for pair ({a!r}, {b!r}): {table[key]} vs {j}"
            )
        table[key] = j
        table[key[::-1]] = j

    table = {k: v for k, v in table.items() if v != 0.0}
    adjacency: list[list[int]] = [[] for _ in ordered]
    for r, s in table:
        adjacency[r].append(s)
    neighbors = tuple(tuple(sorted(a)) for a in adjacency)
    return CouplingGraph(dimension, ordered, table, neighbors, index)


def ring(n_sites: int, coupling_j: float = 1.0) -> CouplingGraph:
    if n_sites < 3:
        raise LatticeError("a ring needs at least 3 sites")
    sites = [(i,) for i in range(n_sites)]
    bonds = [((i,), ((i + 1) % n_sites,), coupling_j) for i in range(n_sites)]
    return build_lattice(1, sites, bonds)


def path(n_sites: int, coupling_j: float = 1.0) -> CouplingGraph:
    if n_sites < 1:
        raise LatticeError("a path needs at least 1 site")
    sites = [(i,) for i in range(n_sites)]
    bonds = [((i,), (i + 1,), coupling_j) for i in range(n_sites - 1)]
    return build_lattice(1, sites, bonds)


def grid(shape: Sequence[int], coupling_j: float = 1.0, periodic: bool = False) -> CouplingGraph:
    """Hypercubic open (or periodic) grid with nearest-neighbor couplings."""
    shape = tuple(int(n) for n in shape)
    if not shape or any(n < 1 for n in shape):
        raise LatticeError(f"bad grid shape {shape!r}")
    sites = list(itertools.product(*(range(n) for n in shape)))
    bonds = {}
    for s in sites:
        for axis, n in enumerate(shape):
            t = list(s)
            t[axis] += 1
            if t[axis] == n:
                if not periodic or n < 3:
                    continue
                t[axis] = 0
            bonds[frozenset((s, tuple(t)))] = (s, tuple(t), coupling_j)
    return build_lattice(len(shape), sites, bonds.values())


# ---------------------------------------------------------------------------
# configurations


@dataclass(frozen=True)
class SpinConfiguration:
    """Spin values (+1/-1) on an ordered set of site indices."""

    sites: tuple[int, ...]
    values: tuple[int, ...]

    def __post_init__(self):
        if len(self.sites) != len(self.values):
            raise LatticeError("sites and values differ in length")
        if any(v not in (1, -1) for v in self.values):
            raise LatticeError(f"spin values must be +1 or -1, got {self.values!r}")

    @classmethod
    def from_mapping(cls, spins: Mapping[int, int]) -> SpinConfiguration:
        keys = tuple(sorted(spins))
        return cls(keys, tuple(int(spins[k]) for k in keys))

    @classmethod
    def from_index(cls, sites: Sequence[int], index: int) -> SpinConfiguration:
        sites = tuple(sites)
        return cls(sites, tuple(1 if (index >> i) & 1 else -1 for i in range(len(sites))))

    @classmethod
    def from_string(cls, sites: Sequence[int], text: str) -> SpinConfiguration:
        """Parse ``"+-+"`` style strings, one character per site."""
        if len(text) != len(sites):
            raise LatticeError(f"{text!r} does not match {len(sites)} sites")
        lookup = {"+": 1, "-": -1, "u": 1, "d": -1}
        try:
            return cls(tuple(sites), tuple(lookup[c] for c in text))
        except KeyError as exc:
            raise LatticeError(f"bad spin character in {text!r}") from exc

    def index(self) -> int:
        return sum(1 << i for i, v in enumerate(self.values) if v == 1)

    def as_dict(self) -> dict[int, int]:
        return dict(zip(self.sites, self.values))

    def __getitem__(self, site: int) -> int:
        try:
            return self.values[self.sites.index(site)]
        except ValueError:
            raise LatticeError(f"configuration does not cover site {site}") from None

    def __neg__(self) -> SpinConfiguration:
        return SpinConfiguration(self.sites, tuple(-v for v in self.values))

    def restrict(self, sites: Sequence[int]) -> SpinConfiguration:
        spins = self.as_dict()
        missing = [s for s in sites if s not in spins]
        if missing:
            raise LatticeError(f"configuration is missing sites {missing}")
        return SpinConfiguration(tuple(sites), tuple(spins[s] for s in sites))

    def with_spin(self, site: int, value: int) -> SpinConfiguration:
        spins = self.as_dict()
        spins[site] = value
        return SpinConfiguration.from_mapping(spins)

    def to_string(self) -> str:
        return "".join("+" if v == 1 else "-" for v in self.values)


def all_configurations(sites: Sequence[int]) -> list[SpinConfiguration]:
    return [SpinConfiguration.from_index(sites, k) for k in range(1 << len(sites))]


def spin_table(n_sites: int) -> np.ndarray:
    """``(2**n, n)`` int8 array of spins for every basis index."""
    idx = np.arange(1 << n_sites)[:, None]
    bits = (idx >> np.arange(n_sites)[None, :]) & 1
    return (2 * bits - 1).astype(np.int8)


# ---------------------------------------------------------------------------
# energies and channels


class SignClass(enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    NULL = "null"


@dataclass(frozen=True)
class Channel:
    """A site together with one configuration of its interacting neighbors."""

    site: int
    neighborhood: SpinConfiguration
    energy: float
    sign_class: SignClass

    def label(self, graph: CouplingGraph | None = None) -> str:
        site = graph.sites[self.site] if graph is not None else self.site
        if isinstance(site, tuple) and len(site) == 1:
            site = site[0]
        return f"{site}:{self.neighborhood.to_string() or '.'}"


def _neighborhood_values(graph: CouplingGraph, r: int, sigma) -> tuple[int, ...]:
    nbrs = graph.neighbors[r]
    if isinstance(sigma, SpinConfiguration):
        spins = sigma.as_dict()
    elif isinstance(sigma, Mapping):
        spins = dict(sigma)
    else:
        values = tuple(sigma)
        if len(values) != len(nbrs):
            raise LatticeError(
                f"neighborhood of site {r} has {len(nbrs)} sites, got {len(values)} spins"
            )
        return values
    missing = [s for s in nbrs if s not in spins]
    if missing:
        raise LatticeError(f"neighborhood configuration misses sites {missing}")
    return tuple(spins[s] for s in nbrs)


def energy_difference(graph: CouplingGraph, r: Site | int, sigma) -> float:
    """``E(r, sigma) = sum_s J_rs eps_s`` over the neighbors of ``r``.

    ``sigma`` may be a :class:`SpinConfiguration` or mapping covering the
    neighbors, or a plain sequence of spins in neighbor order.
    """
    r = graph.index(r)
    values = _neighborhood_values(graph, r, sigma)
    total = 0.0
    for j, eps in zip(graph.neighbor_couplings(r), values):
        total += j * eps
    return total


def classify_channel(energy: float, null_tol: float = DEFAULT_NULL_TOL) -> SignClass:
    if null_tol < 0:
        raise ValueError("null_tol must be nonnegative")
    if energy > null_tol:
        return SignClass.POSITIVE
    if energy < -null_tol:
        return SignClass.NEGATIVE
    return SignClass.NULL


def enumerate_channels(graph: CouplingGraph, null_tol: float = DEFAULT_NULL_TOL) -> list[Channel]:
    """One channel per site and neighborhood configuration, in site order."""
    channels = []
    for r in range(graph.n_sites):
        nbrs = graph.neighbors[r]
        for k in range(1 << len(nbrs)):
            sigma = SpinConfiguration.from_index(nbrs, k)
            e = energy_difference(graph, r, sigma.values)
            channels.append(Channel(r, sigma, e, classify_channel(e, null_tol)))
    return channels


def system_energy(graph: CouplingGraph, config) -> float:
    """``-1/2 sum_{r,s} J_rs eps_r eps_s`` over ordered pairs."""
    if isinstance(config, SpinConfiguration):
        spins = config.as_dict()
        if any(i not in spins for i in range(graph.n_sites)):
            raise LatticeError("configuration does not cover every site")
        eps = [spins[i] for i in range(graph.n_sites)]
    else:
        eps = list(config)
        if len(eps) != graph.n_sites:
            raise LatticeError("configuration does not cover every site")
    total = 0.0
    for (r, s), j in graph.couplings.items():
        total += j * eps[r] * eps[s]
    return -0.5 * total


def energies(graph: CouplingGraph) -> np.ndarray:
    """System energy of every basis configuration, indexed by basis index."""
    _check_enumerable(graph.n_sites)
    eps = spin_table(graph.n_sites).astype(float)
    J = graph.coupling_matrix()
    return -0.5 * np.einsum("ki,ij,kj->k", eps, J, eps)


def _check_enumerable(n: int) -> None:
    if n > MAX_ENUMERATION_SITES:
        raise LatticeError(f"{n} sites exceeds the enumeration guard of {MAX_ENUMERATION_SITES}")


def gibbs_distribution(graph: CouplingGraph, beta: float) -> np.ndarray:
    if beta <= 0:
        raise ValueError("beta must be positive")
    e = energies(graph)
    w = np.exp(-beta * (e - e.min()))
    return w / w.sum()


def flip_energy_multiple(graph: CouplingGraph) -> float | None:
    """Ratio between the exact energy drop of a -1 -> +1 flip and ``E(r, sigma)``.

    Evaluated over every configuration and site with nonzero ``E``; returns
    ``None`` when no such flip exists. Raises if the ratio is not uniform.
    """
    e = energies(graph)
    eps = spin_table(graph.n_sites)
    ratios = []
    for r in range(graph.n_sites):
        down = np.flatnonzero(eps[:, r] == -1)
        up = down | (1 << r)
        nbrs = list(graph.neighbors[r])
        if not nbrs:
            continue
        js = np.array(graph.neighbor_couplings(r))
        local = eps[down][:, nbrs] @ js
        mask = np.abs(local) > DEFAULT_NULL_TOL
        ratios.extend((e[down][mask] - e[up][mask]) / local[mask])
    if not ratios:
        return None
    ratios = np.asarray(ratios)
    if np.ptp(ratios) > 1e-9 * np.abs(ratios).max():
        raise LatticeError("flip energy is not a uniform multiple of E(r, sigma)")
    return float(ratios.mean())


def rate_consistent_gibbs(graph: CouplingGraph, beta: float) -> np.ndarray:
    """Gibbs weights for the energy scale the flip rates encode.

    The rates balance a flip at the channel energy ``E``, while the flip
    changes ``H_S`` by ``multiple * E``; the matching weights are those of
    ``H_S / multiple``.
    """
    multiple = flip_energy_multiple(graph) or 1.0
    return gibbs_distribution(graph, beta / multiple)
