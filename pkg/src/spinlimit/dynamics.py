"""Time evolution: master equation, Heisenberg expectations, steady states
and quantum-trajectory unraveling.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import RK45
from scipy.optimize import bisect

from .generator import GeneratorBundle, _check_state, liouvillian, lindblad_rhs, theta_zero_full
from .lattice import CouplingGraph, LatticeError, SpinConfiguration
from .operators import LocalOperator, identity, pauli, product_operator

logger = logging.getLogger(__name__)

MAX_DENSE_SITES = 12
MAX_STEADY_SITES = 8
SVD_STEADY_SITES = 6
POSITIVITY_FLOOR = 1e-8
RNG_ID = "numpy.random.Philox(SeedSequence([seed, trajectory_index]))"


class IntegrationError(RuntimeError):
    """Step-size underflow or invariant violation during integration."""


@dataclass(frozen=True, eq=False)
class DensityOperator:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        n = int(round(math.log2(m.shape[0]))) if m.ndim == 2 and m.shape[0] else -1
        if m.ndim != 2 or m.shape[0] != m.shape[1] or (1 << max(n, 0)) != m.shape[0]:
            raise ValueError("density matrix must be square with a power-of-two dimension")
        if n > MAX_DENSE_SITES:
            raise ValueError(f"{n} sites exceeds the dense-state guard of {MAX_DENSE_SITES}")
        object.__setattr__(self, "matrix", m)

    @property
    def n_sites(self) -> int:
        return int(round(math.log2(self.matrix.shape[0])))

    @classmethod
    def pure(cls, psi: np.ndarray) -> DensityOperator:
        psi = np.asarray(psi, dtype=complex)
        psi = psi / np.linalg.norm(psi)
        return cls(np.outer(psi, psi.conj()))

    @classmethod
    def diagonal(cls, p: np.ndarray) -> DensityOperator:
        return cls(np.diag(np.asarray(p, dtype=complex)))

    @classmethod
    def maximally_mixed(cls, n_sites: int) -> DensityOperator:
        d = 1 << n_sites
        return cls(np.eye(d, dtype=complex) / d)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh((self.matrix + self.matrix.conj().T) / 2)[0])

    def validate(self, tol: float = 1e-10) -> None:
        _check_state(self.matrix, tol)
        if self.min_eigenvalue() < -POSITIVITY_FLOOR:
            raise ValueError(f"density operator has eigenvalue {self.min_eigenvalue():.3e}")

    def expectation(self, X: np.ndarray) -> complex:
        return complex(np.trace(X @ self.matrix))


@dataclass
class MasterSolution:
    times: np.ndarray
    states: np.ndarray  # (len(times), d, d)
    n_steps: int = 0
    n_rejected: int = 0
    max_trace_drift: float = 0.0
    min_eigenvalue: float = 1.0
    positivity_checked: str = "steps"

    def expectation(self, X: np.ndarray) -> np.ndarray:
        X = X.toarray() if sp.issparse(X) else np.asarray(X)
        return np.einsum("ij,tji->t", X, self.states)


def _as_matrix(rho0) -> np.ndarray:
    if isinstance(rho0, DensityOperator):
        return rho0.matrix
    return np.asarray(rho0, dtype=complex)


def _time_grid(t_final: float, times, n_grid: int) -> np.ndarray:
    if t_final < 0:
        raise ValueError("t_final must be nonnegative")
    if times is None:
        return np.linspace(0.0, t_final, n_grid) if t_final > 0 else np.zeros(1)
    times = np.asarray(times, dtype=float)
    if times[0] != 0 or np.any(np.diff(times) <= 0) or times[-1] > t_final + 1e-15:
        raise ValueError("time grid must start at 0, increase strictly and end by t_final")
    return times


def _integrate(fun, y0: np.ndarray, t_final: float, times: np.ndarray, tol: float, on_step=None):
    """Adaptive Dormand-Prince 5(4); returns ``y`` sampled on ``times``."""
    out = np.empty((len(times), y0.size), dtype=complex)
    out[0] = y0
    if t_final == 0 or len(times) == 1:
        return out[: len(times)], 0
    solver = RK45(lambda t, y: fun(y), 0.0, y0, t_final, rtol=tol, atol=tol)
    k = 1
    steps = 0
    while solver.status == "running":
        msg = solver.step()
        if solver.status == "failed":
            raise IntegrationError(f"integration failed at t={solver.t:.6g}: {msg}")
        steps += 1
        if on_step is not None:
            on_step(solver.t, solver.y)
        if k < len(times) and times[k] <= solver.t:
            dense = solver.dense_output()
            while k < len(times) and times[k] <= solver.t:
                out[k] = dense(times[k])
                k += 1
    if k < len(times):
        out[k:] = solver.y
    return out, steps


def evolve_master(
    bundle: GeneratorBundle,
    rho0,
    t_final: float,
    tol: float = 1e-9,
    times: Sequence[float] | None = None,
    n_grid: int = 51,
    check_positivity: str = "auto",
) -> MasterSolution:
    """Integrate ``d rho/dt = L_*(rho)`` with embedded Runge-Kutta 4(5).

    Trace and self-adjointness are checked after every accepted step, and so
    is positivity unless the state is too large (``check_positivity`` =
    ``"steps"``, ``"grid"`` or ``"auto"``). Drift beyond ``10 * tol`` aborts;
    the trace is never renormalized.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    rho0 = _as_matrix(rho0)
    d = bundle.dim
    if rho0.shape != (d, d):
        raise ValueError(f"initial state has shape {rho0.shape}, expected {(d, d)}")
    DensityOperator(rho0).validate()
    grid = _time_grid(t_final, times, n_grid)
    mode = check_positivity if check_positivity != "auto" else ("steps" if d <= 256 else "grid")
    guard = 10 * tol
    stats = {"drift": 0.0, "min_eig": float(np.linalg.eigvalsh(rho0)[0])}

    def check(t, y):
        rho = y.reshape(d, d)
        drift = abs(np.trace(rho) - 1)
        herm = np.abs(rho - rho.conj().T).max()
        stats["drift"] = max(stats["drift"], drift)
        if drift > guard or herm > guard:
            raise IntegrationError(f"t={t:.6g}: trace drift {drift:.2e}, hermiticity {herm:.2e} exceed {guard:.1e}")
        if mode == "steps":
            m = float(np.linalg.eigvalsh((rho + rho.conj().T) / 2)[0])
            stats["min_eig"] = min(stats["min_eig"], m)
            if m < -max(POSITIVITY_FLOOR, guard):
                raise IntegrationError(f"t={t:.6g}: negative eigenvalue {m:.3e}")

    def rhs(y):
        return lindblad_rhs(bundle, y.reshape(d, d)).ravel()

    ys, steps = _integrate(rhs, rho0.ravel(), float(t_final), grid, tol, check)
    states = ys.reshape(len(grid), d, d)
    if mode == "grid":
        for t, rho in zip(grid, states):
            m = float(np.linalg.eigvalsh((rho + rho.conj().T) / 2)[0])
            stats["min_eig"] = min(stats["min_eig"], m)
    logger.info("master run: %d steps, max trace drift %.3e (not renormalized)", steps, stats["drift"])
    return MasterSolution(grid, states, steps, 0, stats["drift"], stats["min_eig"], mode)


def heisenberg_expectation(
    bundle: GeneratorBundle,
    X,
    rho0,
    t_final: float,
    tol: float = 1e-9,
    times: Sequence[float] | None = None,
    n_grid: int = 51,
    picture: str = "schrodinger",
) -> tuple[np.ndarray, np.ndarray]:
    """``tr(X rho(t))`` on the grid.

    ``picture="heisenberg"`` evolves ``X`` itself under the Heisenberg
    generator instead (dense, for small lattices) and pairs it with ``rho0``.
    """
    x = X.full(bundle.n_sites).toarray() if isinstance(X, LocalOperator) else np.asarray(X, dtype=complex)
    rho0 = _as_matrix(rho0)
    if picture == "schrodinger":
        sol = evolve_master(bundle, rho0, t_final, tol, times, n_grid)
        return sol.times, sol.expectation(x)
    if picture != "heisenberg":
        raise ValueError(f"unknown picture {picture!r}")
    if bundle.n_sites > 6:
        raise ValueError("Heisenberg-picture integration is limited to 6 sites")
    d = bundle.dim
    grid = _time_grid(t_final, times, n_grid)
    ys, _ = _integrate(lambda y: theta_zero_full(bundle, y.reshape(d, d)).ravel(), x.ravel(), float(t_final), grid, tol)
    values = np.array([np.trace(y.reshape(d, d) @ rho0) for y in ys])
    return grid, values


# ---------------------------------------------------------------------------
# steady states


@dataclass
class SteadyState:
    state: DensityOperator | None
    basis: list[np.ndarray]
    nullity: int
    reducible: bool
    singular_values: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    truncated: bool = False


def _hermitian_unit_trace(m: np.ndarray) -> np.ndarray | None:
    m = (m + m.conj().T) / 2
    tr = np.trace(m).real
    if abs(tr) < 1e-12:
        return None
    return m / tr


def steady_state(bundle: GeneratorBundle, null_tol: float = 1e-9, max_basis: int = 32) -> SteadyState:
    """Kernel of the vectorized ``L_*``.

    Dense SVD up to 6 sites, shift-invert eigensolver beyond (up to 8). A
    kernel of dimension above one is reported as reducible together with a
    basis of kernel matrices.
    """
    n = bundle.n_sites
    if n > MAX_STEADY_SITES:
        raise ValueError(f"steady_state is limited to {MAX_STEADY_SITES} sites")
    d = bundle.dim
    L = liouvillian(bundle)
    truncated = False
    if n <= SVD_STEADY_SITES:
        _, s, vh = la.svd(L.toarray())
        scale = max(s[0], 1.0)
        kernel = vh[s <= null_tol * scale].conj()
        svals = s
    else:
        k = min(max_basis, d * d - 2)
        vals, vecs = spla.eigs(L.tocsc(), k=k, sigma=-1e-6 * max(abs(L).max(), 1.0), which="LM")
        keep = np.abs(vals) <= null_tol * max(abs(L).max(), 1.0)
        kernel = vecs[:, keep].T
        svals = np.sort(np.abs(vals))
        truncated = bool(np.all(keep))
    basis = [v.reshape(d, d, order="F") for v in kernel]
    nullity = len(basis)
    state = None
    if nullity == 1:
        m = _hermitian_unit_trace(basis[0])
        if m is not None:
            state = DensityOperator(m)
            if state.min_eigenvalue() < -1e-8:
                logger.warning("steady state has negative eigenvalue %.3e", state.min_eigenvalue())
    return SteadyState(state, basis, nullity, nullity > 1, svals, truncated)


# ---------------------------------------------------------------------------
# observables


def observables(graph: CouplingGraph, names: Sequence[str]) -> list[tuple[str, LocalOperator]]:
    """Named diagonal observables.

    ``magnetization:i`` (site index ``i``), ``magnetization`` (site average),
    ``corr:i,j``, ``nn_corr`` (average over coupled pairs) and ``energy``.
    """
    n = graph.n_sites
    out = []
    for name in names:
        key, _, arg = name.partition(":")
        try:
            if key == "magnetization" and arg:
                op = pauli("z", _site(graph, arg))
            elif key == "magnetization":
                op = _sum_ops([pauli("z", r) for r in range(n)], range(n)) * (1.0 / n)
            elif key == "corr":
                i, j = (_site(graph, a) for a in arg.split(","))
                op = product_operator([pauli("z", i), pauli("z", j)])
            elif key == "nn_corr":
                bonds = graph.bonds()
                if not bonds:
                    raise LatticeError("lattice has no couplings")
                terms = [product_operator([pauli("z", r), pauli("z", s)]) for r, s, _ in bonds]
                op = _sum_ops(terms, range(n)) * (1.0 / len(bonds))
            elif key == "energy" and not arg:
                op = energy_operator(graph)
            else:
                raise KeyError(name)
        except (KeyError, ValueError) as exc:
            raise ValueError(f"unknown observable {name!r}") from exc
        out.append((name, LocalOperator(op.support, op.matrix, name)))
    return out


def _site(graph: CouplingGraph, text: str) -> int:
    i = int(text)
    if not 0 <= i < graph.n_sites:
        raise ValueError(f"site index {i} out of range")
    return i


def _sum_ops(ops, support) -> LocalOperator:
    total = identity(tuple(support)) * 0
    for op in ops:
        total = total + op
    return total


def energy_operator(graph: CouplingGraph) -> LocalOperator:
    terms = [
        product_operator([pauli("z", r), pauli("z", s)]) * (-j)
        for r, s, j in graph.bonds()
    ]
    return _sum_ops(terms, range(graph.n_sites))


def basis_state(n_sites: int, config: SpinConfiguration | str) -> np.ndarray:
    if isinstance(config, str):
        config = SpinConfiguration.from_string(range(n_sites), config)
    psi = np.zeros(1 << n_sites, dtype=complex)
    psi[config.index()] = 1.0
    return psi


def initial_state(n_sites: int, kind: str) -> np.ndarray:
    """``all_up``, ``all_down``, ``uniform`` (equal superposition) or
    ``basis:<+-string>``."""
    if kind == "all_up":
        return basis_state(n_sites, "+" * n_sites)
    if kind == "all_down":
        return basis_state(n_sites, "-" * n_sites)
    if kind == "uniform":
        return np.full(1 << n_sites, (1 << n_sites) ** -0.5, dtype=complex)
    if kind.startswith("basis:"):
        return basis_state(n_sites, kind[len("basis:"):])
    raise ValueError(f"unknown initial state {kind!r}")


# ---------------------------------------------------------------------------
# quantum trajectories


@dataclass
class TrajectoryEnsemble:
    n_traj: int
    seed: int
    times: np.ndarray
    means: dict[str, np.ndarray]
    stderr: dict[str, np.ndarray]
    n_jumps: np.ndarray
    rng: str = RNG_ID


class _NoJumpPropagator:
    """``exp(-i H_nh t)`` for ``H_nh = H_eff - i/2 sum rate L*L``."""

    def __init__(self, bundle: GeneratorBundle):
        H = bundle.hamiltonian_full - 1j * bundle.decay_full
        off = H - sp.diags_array(H.diagonal())
        self.diagonal = off.count_nonzero() == 0
        if self.diagonal:
            self.lam = H.diagonal()
        else:
            lam, V = la.eig(H.toarray())
            self.lam, self.V, self.Vinv = lam, V, la.inv(V)

    def norm_function(self, psi: np.ndarray):
        """``tau -> ||exp(-i H_nh tau) psi||^2``."""
        if self.diagonal:
            w = np.abs(psi) ** 2
            k = 2 * self.lam.imag
            return lambda tau: float(w @ np.exp(k * tau))

        def norm(tau):
            phi = self(psi, tau)
            return float(np.vdot(phi, phi).real)
        return norm

    def __call__(self, psi: np.ndarray, t) -> np.ndarray:
        """Propagate ``psi`` to each time in ``t`` (scalar or 1-D array)."""
        t = np.asarray(t, dtype=float)
        phase = np.exp(-1j * np.multiply.outer(t, self.lam))
        if self.diagonal:
            return phase * psi
        return (phase * (self.Vinv @ psi)) @ self.V.T


def run_trajectories(
    bundle: GeneratorBundle,
    psi0: np.ndarray,
    n_traj: int,
    seed: int,
    t_final: float,
    grid: Sequence[float] | int = 51,
    observables: Sequence[tuple[str, LocalOperator]] | None = None,
    bisect_tol: float = 1e-10,
) -> TrajectoryEnsemble:
    """Monte Carlo wave-function unraveling with exact jump times.

    Between jumps the state follows the non-Hermitian no-jump evolution; the
    next jump happens when the squared norm falls to a uniform random level,
    located by bisection. Trajectory ``i`` draws from its own stream seeded by
    ``(seed, i)``, so ensembles are reproducible and order-independent.
    """
    if not bundle.jump_list and bundle.effective_hamiltonian.matrix.nnz == 0:
        raise ValueError("bundle has neither jumps nor a Hamiltonian")
    if n_traj < 1:
        raise ValueError("n_traj must be positive")
    times = np.linspace(0.0, t_final, grid) if isinstance(grid, int) else np.asarray(grid, dtype=float)
    psi0 = np.asarray(psi0, dtype=complex)
    psi0 = psi0 / np.linalg.norm(psi0)
    n = bundle.n_sites
    if observables is None:
        observables = [(f"magnetization:{r}", pauli("z", r)) for r in range(n)]
    obs = [(name, op.full(n)) for name, op in observables]
    obs_diag = [o.diagonal() if (o - sp.diags_array(o.diagonal())).count_nonzero() == 0 else None for _, o in obs]

    prop = _NoJumpPropagator(bundle)
    small = bundle.dim <= 256
    jumps = [(L.toarray() if small else L, rate) for L, rate in bundle.jumps_full]
    samples = np.empty((n_traj, len(obs), len(times)))
    n_jumps = np.zeros(n_traj, dtype=np.int64)

    def record(k, idx, states):
        norms = np.sum(np.abs(states) ** 2, axis=1)
        for m, ((_, o), dg) in enumerate(zip(obs, obs_diag)):
            if dg is not None:
                vals = (np.abs(states) ** 2) @ dg.real
            else:
                vals = np.einsum("ti,ti->t", states.conj(), (o @ states.T).T).real
            samples[k, m, idx] = vals / norms

    for k in range(n_traj):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, k])))
        psi, t0, g = psi0.copy(), 0.0, 0
        while g < len(times):
            level = rng.random()
            if jumps:
                norm = prop.norm_function(psi)

                def excess(tau):
                    return norm(tau) - level
                horizon = times[-1] - t0
                jump = excess(horizon) < 0
            else:
                jump = False
            if jump:
                tau = bisect(excess, 0.0, horizon, xtol=bisect_tol)
            else:
                tau = times[-1] - t0
            # grid points before the jump
            g_end = np.searchsorted(times, t0 + tau, side="right" if not jump else "left")
            if g_end > g:
                record(k, np.arange(g, g_end), prop(psi, times[g:g_end] - t0))
                g = g_end
            if not jump:
                break
            phi = prop(psi, tau)
            weights = np.array([rate * np.vdot(L @ phi, L @ phi).real for L, rate in jumps])
            total = weights.sum()
            if total <= 0:
                raise IntegrationError("norm decayed but no jump channel is open")
            choice = int(np.searchsorted(np.cumsum(weights), rng.random() * total, side="right"))
            choice = min(choice, len(jumps) - 1)
            psi = jumps[choice][0] @ phi
            psi = psi / np.linalg.norm(psi)
            t0 += tau
            n_jumps[k] += 1

    means = {name: samples[:, m].mean(axis=0) for m, (name, _) in enumerate(obs)}
    if n_traj > 1:
        stderr = {name: samples[:, m].std(axis=0, ddof=1) / math.sqrt(n_traj) for m, (name, _) in enumerate(obs)}
    else:
        stderr = {name: np.zeros(len(times)) for name, _ in obs}
    return TrajectoryEnsemble(n_traj, seed, times, means, stderr, n_jumps)
