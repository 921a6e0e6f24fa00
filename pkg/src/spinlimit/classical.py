"""Classical Markov jump process on the diagonal subalgebra.

Flip operators map basis configurations to basis configurations, so the
generator leaves diagonal operators diagonal. Restricted there it is a
continuous-time Markov chain of single spin flips whose rate at site ``r``
depends only on the center spin and on ``E = sum_s J_rs eps_s``:

    the flip releasing energy (Delta H_S = -2|E|)  gamma^-(|E|)
    the reverse flip                                gamma^+(|E|)
    E = 0                                           blocked

This module extracts those rates from the quantum generator, checks them
against the closed form and runs kinetic Monte Carlo with the closed form.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .bath import BathModel, asymmetric_table, transition_rates
from .generator import GeneratorBundle, assemble_bundle, lindblad_rhs, theta_zero_full
from .lattice import (
    DEFAULT_NULL_TOL,
    CouplingGraph,
    LatticeError,
    SignClass,
    SpinConfiguration,
    ring,
    spin_table,
)
from .operators import build_F

logger = logging.getLogger(__name__)

RATE_TOL = 1e-10
MAX_EXACT_SITES = 12
RNG_ID = "numpy.random.Philox(SeedSequence(seed))"

RateFunction = Callable[[int, int, float], float]


class RateMismatchError(RuntimeError):
    """Numeric rates from the generator disagree with the closed form."""


# ---------------------------------------------------------------------------
# diagonal invariance


def _is_diagonal(m) -> bool:
    if sp.issparse(m):
        m = sp.coo_array(m)
        return not np.any((m.row != m.col) & (m.data != 0))
    m = np.asarray(m)
    return not np.any(m - np.diag(np.diag(m)))


def diagonal_invariance_check(
    bundle: GeneratorBundle,
    n_samples: int = 20,
    seed: int = 0,
    operators: Sequence[np.ndarray] | None = None,
) -> float:
    """Largest off-diagonal Frobenius norm of ``theta_0(X)`` over diagonal ``X``.

    Without ``operators``, ``X`` is the identity, every basis projector (up
    to ``n_samples`` of them) and ``n_samples`` random real diagonals.
    """
    if bundle.n_sites > 8:
        raise ValueError("diagonal_invariance_check is limited to 8 sites")
    d = bundle.dim
    if operators is None:
        rng = np.random.default_rng(seed)
        operators = [np.eye(d)]
        for k in rng.choice(d, size=min(n_samples, d), replace=False):
            p = np.zeros((d, d))
            p[k, k] = 1
            operators.append(p)
        operators += [np.diag(rng.standard_normal(d)) for _ in range(n_samples)]
    worst = 0.0
    for X in operators:
        X = X.toarray() if sp.issparse(X) else np.asarray(X)
        if X.shape != (d, d):
            raise ValueError(f"operator has shape {X.shape}, expected {(d, d)}")
        if not _is_diagonal(X):
            raise ValueError("diagonal_invariance_check accepts diagonal operators only")
        Y = theta_zero_full(bundle, X.astype(complex))
        worst = max(worst, float(np.linalg.norm(Y - np.diag(np.diag(Y)))))
    return worst


# ---------------------------------------------------------------------------
# rate model


@dataclass
class ClassicalRateModel:
    """Single-flip rates of the diagonal restriction.

    ``rate_function(r, center, E)`` overrides the closed form; otherwise the
    rates follow from ``bath``. ``verified_residual`` is set by
    :func:`extract_rates` once the closed form has been checked against the
    generator.
    """

    graph: CouplingGraph
    bath: BathModel | None = None
    rate_function: RateFunction | None = None
    null_tol: float = DEFAULT_NULL_TOL
    verified_residual: float | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.bath is None and self.rate_function is None:
            raise ValueError("rate model needs a bath or a rate function")
        self._nbrs = [list(self.graph.neighbors[r]) for r in range(self.graph.n_sites)]
        self._js = [list(self.graph.neighbor_couplings(r)) for r in range(self.graph.n_sites)]
        self._local: dict[tuple[int, float], float] = {}

    @property
    def n_sites(self) -> int:
        return self.graph.n_sites

    def rates_at(self, energy: float) -> tuple[float, float]:
        """``(gamma^-, gamma^+)`` at ``|energy|``; zero inside ``null_tol``."""
        key = abs(energy)
        if key <= self.null_tol:
            return 0.0, 0.0
        if key not in self._cache:
            self._cache[key] = transition_rates(self.bath, key)
        return self._cache[key]

    def local_energy(self, r: int, spins) -> float:
        return float(sum(j * spins[s] for j, s in zip(self._js[r], self._nbrs[r])))

    def local_rate(self, r: int, center: int, energy: float) -> float:
        """Rate of flipping spin ``center`` at ``r`` when ``sum_s J_rs eps_s = energy``."""
        if self.rate_function is not None:
            return float(self.rate_function(r, center, energy))
        key = (center, energy)
        rate = self._local.get(key)
        if rate is None:
            g_minus, g_plus = self.rates_at(energy)
            # Delta H_S = 2 * center * energy; negative means the flip emits
            rate = self._local[key] = g_minus if center * energy < 0 else g_plus
        return rate

    def flip_rate(self, r: int, spins) -> float:
        return self.local_rate(r, int(spins[r]), self.local_energy(r, spins))

    def generator_matrix(self) -> sp.csr_array:
        """``Q[s', s]`` with columns summing to zero (acts on probability vectors)."""
        n = self.n_sites
        if n > MAX_EXACT_SITES:
            raise ValueError(f"generator_matrix is limited to {MAX_EXACT_SITES} sites")
        table = spin_table(n)
        d = 1 << n
        rows, cols, vals = [], [], []
        out = np.zeros(d)
        idx = np.arange(d)
        for r in range(n):
            for k in range(d):
                rate = self.flip_rate(r, table[k])
                if rate:
                    rows.append(k ^ (1 << r))
                    cols.append(k)
                    vals.append(rate)
                    out[k] += rate
        rows += list(idx)
        cols += list(idx)
        vals += list(-out)
        return sp.csr_array((vals, (rows, cols)), shape=(d, d))

    def neighborhood_classes(self, r: int):
        """All ``(values, energy)`` for the neighbors of ``r``."""
        for values in itertools.product((1, -1), repeat=len(self._nbrs[r])):
            yield values, float(sum(j * v for j, v in zip(self._js[r], values)))

    def rate_table(self) -> list[dict]:
        """One row per ``(site, neighborhood, center)``."""
        rows = []
        for r in range(self.n_sites):
            for values, e in self.neighborhood_classes(r):
                for center in (-1, 1):
                    rate = self.local_rate(r, center, e)
                    released = center * e < 0
                    rows.append({
                        "site": r,
                        "neighborhood": "".join("+" if v == 1 else "-" for v in values),
                        "center": "+" if center == 1 else "-",
                        "energy": e,
                        "kind": "blocked" if rate == 0 else ("emission" if released else "absorption"),
                        "rate": rate,
                    })
        return rows

    def null_blocked(self) -> list[tuple[int, str]]:
        """Neighborhood classes ``(site, values)`` whose total flip rate vanishes."""
        out = []
        for r in range(self.n_sites):
            for values, e in self.neighborhood_classes(r):
                if self.local_rate(r, 1, e) == 0 and self.local_rate(r, -1, e) == 0:
                    out.append((r, "".join("+" if v == 1 else "-" for v in values)))
        return out


def closed_form_model(graph: CouplingGraph, bath: BathModel) -> ClassicalRateModel:
    return ClassicalRateModel(graph, bath, null_tol=bath.null_tol)


def numeric_generator_matrix(bundle: GeneratorBundle) -> tuple[sp.csr_array, float]:
    """``Q[s', s] = <s'| L_*(|s><s|) |s'>`` and the largest off-diagonal leakage."""
    d = bundle.dim
    cols, rows, vals = [], [], []
    leakage = 0.0
    for k in range(d):
        P = sp.csr_array(([1.0 + 0j], ([k], [k])), shape=(d, d))
        out = sp.coo_array(lindblad_rhs(bundle, P))
        off = out.row != out.col
        if np.any(off):
            leakage = max(leakage, float(np.abs(out.data[off]).max()))
        diag = ~off
        rows += list(out.row[diag])
        cols += [k] * int(diag.sum())
        vals += list(out.data[diag])
    Q = sp.coo_array((vals, (rows, cols)), shape=(d, d)).tocsr()
    Q.sum_duplicates()
    return Q, leakage


def extract_rates(bundle: GeneratorBundle, tol: float = RATE_TOL) -> ClassicalRateModel:
    """Closed-form rate model, verified entrywise against the restricted generator.

    Raises :class:`RateMismatchError` if any entry differs by more than
    ``tol`` or if ``L_*`` leaks off the diagonal.
    """
    if bundle.graph is None or bundle.bath is None:
        raise ValueError("extract_rates needs a bundle assembled from a lattice and a bath")
    if bundle.n_sites > MAX_EXACT_SITES:
        raise ValueError(f"numeric rate extraction is limited to {MAX_EXACT_SITES} sites")
    model = closed_form_model(bundle.graph, bundle.bath)
    Q_num, leak = numeric_generator_matrix(bundle)
    Q_cf = model.generator_matrix()
    diff = abs(Q_num - Q_cf)
    residual = float(diff.max()) if diff.nnz else 0.0
    if Q_num.imag.nnz and abs(Q_num.imag).max() > tol:
        residual = max(residual, float(abs(Q_num.imag).max()))
    if residual > tol or leak > tol:
        raise RateMismatchError(
            f"generator restriction disagrees with closed-form rates: entry residual {residual:.3e}, "
            f"off-diagonal leakage {leak:.3e} (tolerance {tol:.1e})"
        )
    model.verified_residual = residual
    return model


# ---------------------------------------------------------------------------
# detailed balance and Glauber comparison


@dataclass
class DetailedBalanceReport:
    max_violation: float
    n_checked: int
    blocked: list[tuple[int, str]]
    one_sided: int

    @property
    def n_blocked(self) -> int:
        return len(self.blocked)


def detailed_balance_check(model: ClassicalRateModel, beta: float | None = None) -> DetailedBalanceReport:
    """``max |log(rate_up / rate_down) - beta E|`` over local flip pairs.

    Raising the center releases ``2E`` of ``H_S``; the rates encode half of
    that, so balance holds for Gibbs weights of ``H_S / 2``. Pairs where
    both rates vanish are blocked and only counted.
    """
    if model.bath is None:
        raise ValueError("detailed balance needs a bath model")
    if model.bath.mu != 0:
        raise ValueError(
            f"detailed balance holds only at mu = 0 (got mu = {model.bath.mu}); "
            "with mu != 0 the rate ratio is exp(-beta (E - mu)), which no energy function reproduces"
        )
    beta = model.bath.beta if beta is None else beta
    worst, checked, one_sided = 0.0, 0, 0
    blocked = []
    for r in range(model.n_sites):
        for values, e in model.neighborhood_classes(r):
            up = model.local_rate(r, -1, e)
            down = model.local_rate(r, 1, e)
            if up > 0 and down > 0:
                worst = max(worst, abs(math.log(up / down) - beta * e))
                checked += 1
            elif up == 0 and down == 0:
                blocked.append((r, "".join("+" if v == 1 else "-" for v in values)))
            else:
                one_sided += 1
    return DetailedBalanceReport(worst, checked, blocked, one_sided)


def glauber_rate(beta: float, center: int, energy: float, alpha: float = 1.0) -> float:
    """Textbook Glauber rate ``alpha/2 (1 - center tanh(beta E))`` for ``H_S``."""
    return 0.5 * alpha * (1 - center * math.tanh(beta * energy))


@dataclass
class GlauberComparison:
    rows: list[dict]
    max_ratio_deviation: float
    effective_beta: float


def glauber_comparison(model: ClassicalRateModel, beta: float | None = None) -> GlauberComparison:
    """Side-by-side rate tables and the ratio check on unblocked moves.

    The stochastic-limit ratio ``up/down = exp(beta E)`` is Glauber's ratio
    at inverse temperature ``beta / 2`` (Glauber's energy change is ``2E``);
    the deviation of the two log-ratios is reported. E = 0 moves are blocked
    here but not under Glauber.
    """
    beta = model.bath.beta if beta is None else beta
    eff = beta / 2
    rows, worst = [], 0.0
    seen = set()
    for r in range(model.n_sites):
        for values, e in model.neighborhood_classes(r):
            key = round(e, 12)
            if key in seen:
                continue
            seen.add(key)
            up, down = model.local_rate(r, -1, e), model.local_rate(r, 1, e)
            gu, gd = glauber_rate(eff, -1, e), glauber_rate(eff, 1, e)
            dev = None
            if up > 0 and down > 0:
                dev = abs(math.log(up / down) - math.log(gu / gd))
                worst = max(worst, dev)
            rows.append({"energy": e, "rate_up": up, "rate_down": down,
                         "glauber_up": gu, "glauber_down": gd, "log_ratio_deviation": dev})
    return GlauberComparison(rows, worst, eff)


# ---------------------------------------------------------------------------
# nearest-neighbor preset


@dataclass
class NearestNeighborPreset:
    graph: CouplingGraph
    bundle: GeneratorBundle
    model: ClassicalRateModel
    active_sites: list[int]
    energy: float


def displayed_flip_operator(n_sites: int, r: int) -> np.ndarray:
    """``|+><+|_{r-1} |+><-|_r |+><+|_{r+1} + |-><-|_{r-1} |-><+|_r |-><-|_{r+1}``

    on the ordered support ``(r-1, r, r+1)`` of a ring, as a dense matrix in
    the sorted-support basis.
    """
    from .operators import flip_lower, flip_raise, product_operator, projector

    left, right = (r - 1) % n_sites, (r + 1) % n_sites
    a = product_operator([projector(left, 1), flip_raise(r), projector(right, 1)])
    b = product_operator([projector(left, -1), flip_lower(r), projector(right, -1)])
    return (a + b).dense()


def nearest_neighbor_preset(
    n_sites: int,
    coupling_j: float = 1.0,
    bath: BathModel | None = None,
    verify_rates: bool = True,
) -> NearestNeighborPreset:
    """Ferromagnetic nearest-neighbor ring with one shared energy class.

    Checks that the positive channels are exactly ``(r, ++)`` with
    ``E = 2J``, that they share one susceptibility and that each flip
    operator matches :func:`displayed_flip_operator`.
    """
    if coupling_j <= 0:
        raise LatticeError("the nearest-neighbor preset requires J > 0")
    bath = BathModel(1.0, 0.0, asymmetric_table()) if bath is None else bath
    graph = ring(n_sites, coupling_j)
    bundle = assemble_bundle(graph, bath)
    active = [t for t in bundle.terms if t.channel.sign_class is SignClass.POSITIVE]
    if sorted(t.channel.site for t in active) != list(range(n_sites)):
        raise AssertionError("expected one positive channel per site")
    for t in active:
        if t.channel.neighborhood.values != (1, 1):
            raise AssertionError(f"unexpected positive channel {t.label}")
        if abs(t.energy - 2 * coupling_j) > 1e-12:
            raise AssertionError(f"channel {t.label} has E = {t.energy}, expected {2 * coupling_j}")
        expected = displayed_flip_operator(n_sites, t.channel.site)
        if not np.allclose(t.F.dense(), expected, atol=0, rtol=0):
            raise AssertionError(f"flip operator of {t.label} differs from the displayed form")
    if len(bundle.susceptibility_table()) != 1:
        raise AssertionError("positive channels do not share one susceptibility")
    model = extract_rates(bundle) if verify_rates and n_sites <= 10 else closed_form_model(graph, bath)
    return NearestNeighborPreset(graph, bundle, model, [t.channel.site for t in active], 2 * coupling_j)


# ---------------------------------------------------------------------------
# kinetic Monte Carlo


class _SumTree:
    """Binary sum tree over per-site rates: O(log N) update and sampling."""

    def __init__(self, values: np.ndarray):
        self.n = len(values)
        self.size = 1 << max(1, (self.n - 1).bit_length())
        self.tree = [0.0] * (2 * self.size)
        self.tree[self.size:self.size + self.n] = [float(v) for v in values]
        for i in range(self.size - 1, 0, -1):
            self.tree[i] = self.tree[2 * i] + self.tree[2 * i + 1]

    @property
    def total(self) -> float:
        return self.tree[1]

    def leaves(self) -> list[float]:
        return self.tree[self.size:self.size + self.n]

    def update(self, i: int, value: float) -> None:
        t = self.tree
        i += self.size
        t[i] = value
        i >>= 1
        while i:
            t[i] = t[2 * i] + t[2 * i + 1]
            i >>= 1

    def find(self, u: float) -> int:
        """Leaf ``i`` with ``cumsum[i-1] <= u < cumsum[i]`` (``0 <= u < total``)."""
        t = self.tree
        i = 1
        while i < self.size:
            left = t[2 * i]
            if u < left or t[2 * i + 1] == 0:
                i = 2 * i
            else:
                u -= left
                i = 2 * i + 1
        i -= self.size
        # guard against rounding onto a zero-rate leaf
        while t[self.size + i] == 0 and i > 0:
            i -= 1
        return i


@dataclass
class KmcState:
    spins: list[int]
    time: float
    rates: _SumTree = field(repr=False)
    n_events: int = 0


@dataclass
class KmcResult:
    times: np.ndarray
    magnetization: np.ndarray
    energy: np.ndarray
    n_events: np.ndarray
    final: SpinConfiguration
    absorbed_at: float | None
    seed: int
    event_times: np.ndarray | None = None
    event_sites: np.ndarray | None = None
    max_revalidation_drift: float = 0.0
    rng: str = RNG_ID


def initial_spins(n_sites: int, kind: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """``all_up``, ``all_down``, ``random(p)`` (each spin up with probability p)
    or a ``+-`` string."""
    if kind == "all_up":
        return np.ones(n_sites, dtype=np.int8)
    if kind == "all_down":
        return -np.ones(n_sites, dtype=np.int8)
    if kind.startswith("random(") and kind.endswith(")"):
        p = float(kind[7:-1])
        if not 0 <= p <= 1:
            raise ValueError("random(p) needs 0 <= p <= 1")
        rng = rng if rng is not None else np.random.default_rng()
        return np.where(rng.random(n_sites) < p, 1, -1).astype(np.int8)
    if set(kind) <= {"+", "-"} and len(kind) == n_sites:
        return np.array([1 if c == "+" else -1 for c in kind], dtype=np.int8)
    raise ValueError(f"unknown initial configuration {kind!r}")


def _total_energy(model: ClassicalRateModel, spins: np.ndarray) -> float:
    return -math.fsum(j * int(spins[r]) * int(spins[t]) for r, t, j in model.graph.bonds())


def gillespie(
    model: ClassicalRateModel,
    initial: SpinConfiguration | np.ndarray | str,
    t_final: float,
    seed: int,
    grid: Sequence[float] | int = 101,
    record_events: bool = False,
    revalidate_every: int = 10000,
    batch: int = 4096,
) -> KmcResult:
    """Continuous-time kinetic Monte Carlo of the single-flip chain.

    Waiting times are exponential with the total rate and the flipping site
    is drawn proportionally to its rate. Observables (mean magnetization,
    ``H_S``, event count) are sampled on ``grid`` from the piecewise-constant
    path. The cached total is recomputed every ``revalidate_every`` events.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    n = model.n_sites
    if isinstance(initial, SpinConfiguration):
        spins = np.asarray(initial.values, dtype=np.int8).copy()
    elif isinstance(initial, str):
        spins = initial_spins(n, initial, rng)
    else:
        spins = np.asarray(initial, dtype=np.int8).copy()
    if spins.shape != (n,) or not np.all(np.abs(spins) == 1):
        raise ValueError("initial configuration must have one +-1 entry per site")
    times = np.linspace(0.0, t_final, grid) if isinstance(grid, int) else np.asarray(grid, dtype=float)

    mag_sum = int(spins.sum(dtype=np.int64))
    energy = _total_energy(model, spins)
    spins = [int(v) for v in spins]
    tree = _SumTree(np.array([model.flip_rate(r, spins) for r in range(n)]))
    state = KmcState(spins, 0.0, tree)
    nbrs = model._nbrs
    js = model._js

    mags = np.empty(len(times))
    ens = np.empty(len(times))
    counts = np.empty(len(times), dtype=np.int64)
    ev_t, ev_s = [], []
    g = 0
    absorbed = None
    drift = 0.0
    draws = rng.random((batch, 2))
    b = 0
    while True:
        total = tree.total
        if total <= 0:
            absorbed = state.time
            break
        if b == batch:
            draws = rng.random((batch, 2))
            b = 0
        u1, u2 = draws[b]
        b += 1
        t_next = state.time - math.log1p(-u1) / total
        while g < len(times) and times[g] < t_next:
            mags[g], ens[g], counts[g] = mag_sum / n, energy, state.n_events
            g += 1
        if g == len(times):
            break
        r = tree.find(u2 * total)
        old = spins[r]
        local = sum(j * spins[s] for j, s in zip(js[r], nbrs[r]))
        spins[r] = -old
        mag_sum -= 2 * old
        energy += 2 * old * local
        state.time = t_next
        state.n_events += 1
        if record_events:
            ev_t.append(t_next)
            ev_s.append(r)
        tree.update(r, model.flip_rate(r, spins))
        for s in nbrs[r]:
            tree.update(s, model.flip_rate(s, spins))
        if state.n_events % revalidate_every == 0:
            exact = math.fsum(tree.leaves())
            dev = abs(exact - tree.total)
            drift = max(drift, dev)
            if dev > 1e-9 * max(1.0, exact):
                logger.warning("rate cache drift %.3e; rebuilding", dev)
            tree = state.rates = _SumTree(np.array(tree.leaves()))
    while g < len(times):
        mags[g], ens[g], counts[g] = mag_sum / n, energy, state.n_events
        g += 1
    final = SpinConfiguration(tuple(range(n)), tuple(int(v) for v in spins)) if n <= 64 else None
    return KmcResult(
        times, mags, ens, counts, final, absorbed, seed,
        np.array(ev_t) if record_events else None,
        np.array(ev_s, dtype=np.int64) if record_events else None,
        drift,
    )


def two_state_model(rate_down: float, rate_up: float) -> ClassicalRateModel:
    """Single isolated spin flipping ``+ -> -`` at ``rate_down`` and ``- -> +`` at ``rate_up``."""
    from .lattice import build_lattice

    graph = build_lattice(1, [(0,)], [])
    return ClassicalRateModel(graph, rate_function=lambda r, c, e: rate_down if c == 1 else rate_up)
