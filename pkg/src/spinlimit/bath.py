"""Thermal boson bath: spectral densities, Bose factors and susceptibilities.

The bath enters the generator only through the spectral density
``I(E) = int dk |g(k)|^2 delta(omega(k) - E)`` together with ``beta`` and
``mu``. For a channel of energy ``E`` the two susceptibilities are

    (g|g)^-  =  pi I(E) (1 + n(E))  -  i PV int I(w) (1 + n(w)) / (w - E) dw
    (g|g)^+  =  pi I(E) n(E)        -  i PV int I(w) n(w)       / (w - E) dw

with the real parts present only for ``E > null_tol``. The drift multiplies
``F*F`` by ``(g|g)^-`` and ``F F*`` by the complex conjugate of ``(g|g)^+``;
see ``docs/derivations.md``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .lattice import DEFAULT_NULL_TOL

GAUSS_ORDER = 8
OHMIC_TAIL = 60.0  # upper integration limit in units of the ohmic cutoff
PV_RTOL = 1e-9


class BathError(ValueError):
    """Invalid bath parameters."""


class PVConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual estimate {residual:.3e})")
        self.residual = residual


class LambShiftDivergence(PVConvergenceError):
    """The Lamb-shift integral has a non-integrable endpoint singularity."""


# ---------------------------------------------------------------------------
# spectral densities


@dataclass(frozen=True)
class FlatDensity:
    """``height`` on ``(lower, cutoff]``, zero elsewhere."""

    height: float = 1.0
    cutoff: float = 10.0
    lower: float = 0.5

    def __post_init__(self):
        if self.height < 0 or not 0 <= self.lower < self.cutoff:
            raise BathError(f"invalid flat density {self!r}")

    def __call__(self, e):
        e = np.asarray(e, dtype=float)
        return np.where((e > self.lower) & (e <= self.cutoff), self.height, 0.0)

    @property
    def support(self) -> tuple[float, float]:
        return self.lower, self.cutoff

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return ()

    def edge_value(self) -> float:
        return self.height


@dataclass(frozen=True)
class OhmicDensity:
    """``eta * E * exp(-E / cutoff)`` for ``E > 0``."""

    eta: float = 0.1
    cutoff: float = 5.0

    def __post_init__(self):
        if self.eta < 0 or self.cutoff <= 0:
            raise BathError(f"invalid ohmic density {self!r}")

    def __call__(self, e):
        e = np.asarray(e, dtype=float)
        return np.where(e > 0, self.eta * e * np.exp(-np.clip(e, 0, None) / self.cutoff), 0.0)

    @property
    def support(self) -> tuple[float, float]:
        return 0.0, OHMIC_TAIL * self.cutoff

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return ()

    def edge_value(self) -> float:
        return 0.0


@dataclass(frozen=True)
class TabulatedDensity:
    """Piecewise-linear interpolation of tabulated values, zero off the grid."""

    energies: tuple[float, ...] = field(repr=False)
    values: tuple[float, ...] = field(repr=False)
    source: str = ""

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if e.ndim != 1 or e.shape != v.shape or len(e) < 2:
            raise BathError("table needs at least two (energy, density) rows")
        if np.any(np.diff(e) <= 0):
            raise BathError("table energies must be strictly increasing")
        if e[0] < 0:
            raise BathError("table support must lie in [0, inf)")
        if np.any(v < 0):
            raise BathError("spectral density must be nonnegative")
        object.__setattr__(self, "energies", tuple(e.tolist()))
        object.__setattr__(self, "values", tuple(v.tolist()))

    @classmethod
    def from_csv(cls, path: str | Path) -> TabulatedDensity:
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.reader(fh):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                try:
                    rows.append((float(row[0]), float(row[1])))
                except ValueError:
                    if rows:
                        raise BathError(f"bad row {row!r} in {path}") from None
                    continue  # header
        if not rows:
            raise BathError(f"no data rows in {path}")
        e, v = zip(*rows)
        return cls(e, v, str(path))

    def __call__(self, e):
        return np.interp(np.asarray(e, dtype=float), self.energies, self.values, left=0.0, right=0.0)

    @property
    def support(self) -> tuple[float, float]:
        return self.energies[0], self.energies[-1]

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return self.energies[1:-1]

    def edge_value(self) -> float:
        return self.values[0]


def asymmetric_table(n_points: int = 81, cutoff: float = 8.0) -> TabulatedDensity:
    """Skewed tabulated density used by the nearest-neighbor preset.

    Rises linearly from zero, peaks near ``cutoff / 4`` and decays slowly, so
    it is far from symmetric about any channel energy.
    """
    e = np.linspace(0.0, cutoff, n_points)
    v = e * np.exp(-e / (cutoff / 4)) / (cutoff / 4)
    v[-1] = 0.0
    return TabulatedDensity(tuple(e), tuple(v), "asymmetric_table")


# ---------------------------------------------------------------------------
# bath model


def bose_occupation(beta: float, mu: float, e) -> float:
    """``1 / (exp(beta (E - mu)) - 1)``."""
    x = beta * (np.asarray(e, dtype=float) - mu)
    if np.any(x <= 0):
        raise BathError(f"Bose factor diverges: beta*(E - mu) = {x} <= 0")
    with np.errstate(over="ignore"):
        n = 1.0 / np.expm1(x)
    return float(n) if np.ndim(n) == 0 else n


def _one_plus_bose(beta: float, mu: float, e: np.ndarray) -> np.ndarray:
    # 1 / (1 - exp(-x)) without cancellation for small x
    x = beta * (e - mu)
    return -1.0 / np.expm1(-x)


@dataclass(frozen=True)
class BathModel:
    beta: float
    mu: float = 0.0
    density: FlatDensity | OhmicDensity | TabulatedDensity = field(default_factory=FlatDensity)
    pv_epsilon: float | None = None
    pv_panels: int = 4096
    null_tol: float = DEFAULT_NULL_TOL
    include_null_pv: bool = False

    def __post_init__(self):
        if not self.beta > 0 or not math.isfinite(self.beta):
            raise BathError("beta must be positive and finite")
        lo, hi = self.density.support
        if not (self.mu <= 0 or self.mu < lo):
            raise BathError(f"chemical potential {self.mu} lies inside the band starting at {lo}")
        if self.pv_epsilon is not None and self.pv_epsilon <= 0:
            raise BathError("pv_epsilon must be positive")
        if self.pv_panels < 16:
            raise BathError("pv_panels must be at least 16")

    @property
    def epsilon(self) -> float:
        lo, hi = self.density.support
        return self.pv_epsilon if self.pv_epsilon is not None else 1e-3 * (hi - lo)

    def infrared_divergent(self) -> bool:
        """Bose factor pole sitting on a band edge where the density is nonzero."""
        lo, _ = self.density.support
        return self.mu == lo and self.density.edge_value() > 0

    def emission_weight(self, e: np.ndarray) -> np.ndarray:
        """``I(w) (1 + n(w))``."""
        e = np.asarray(e, dtype=float)
        dens = self.density(e)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = dens * _one_plus_bose(self.beta, self.mu, e)
        return np.where(dens > 0, w, 0.0)

    def absorption_weight(self, e: np.ndarray) -> np.ndarray:
        """``I(w) n(w)``."""
        e = np.asarray(e, dtype=float)
        dens = self.density(e)
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            w = dens / np.expm1(self.beta * (e - self.mu))
        return np.where(dens > 0, w, 0.0)


@dataclass(frozen=True)
class Susceptibility:
    energy: float
    minus: complex = 0j
    plus: complex = 0j

    @property
    def gamma_minus(self) -> float:
        return 2.0 * self.minus.real

    @property
    def gamma_plus(self) -> float:
        return 2.0 * self.plus.real


def transition_rates(bath: BathModel, e: float) -> tuple[float, float]:
    """``(gamma_minus, gamma_plus) = 2 Re (g|g)^{-,+}`` without the Lamb shifts."""
    if e <= bath.null_tol:
        return 0.0, 0.0
    density = float(bath.density(e))
    if density == 0.0:
        return 0.0, 0.0
    n = bose_occupation(bath.beta, bath.mu, e)
    return 2.0 * math.pi * density * (1.0 + n), 2.0 * math.pi * density * n


def susceptibility(bath: BathModel, e: float, lamb_shift: bool = True) -> Susceptibility:
    """Both generalized susceptibilities of a channel with energy ``e``.

    Null channels (``|e| <= null_tol``) get zero unless the bath opts into
    their principal-value terms via ``include_null_pv``.
    """
    e = float(e)
    gm, gp = transition_rates(bath, e)
    re_minus, re_plus = gm / 2.0, gp / 2.0
    im_minus = im_plus = 0.0
    is_null = abs(e) <= bath.null_tol
    if lamb_shift and (not is_null or bath.include_null_pv):
        if bath.infrared_divergent():
            raise LambShiftDivergence(
                "Lamb shift diverges: the Bose pole at mu sits on a band edge with nonzero density",
                math.inf,
            )
        lo, hi = bath.density.support
        bps = bath.density.breakpoints
        kw = dict(eps=bath.epsilon, panels=bath.pv_panels, breakpoints=bps)
        res_m = pv_integral(bath.emission_weight, e, lo, hi, **kw)
        res_p = pv_integral(bath.absorption_weight, e, lo, hi, **kw)
        for name, res in (("minus", res_m), ("plus", res_p)):
            if not res.converged:
                raise PVConvergenceError(f"PV integral for (g|g)^{name} at E={e} did not converge", res.residual)
        im_minus, im_plus = -res_m.value, -res_p.value
    return Susceptibility(e, complex(re_minus, im_minus), complex(re_plus, im_plus))


def ito_coefficients(s: Susceptibility) -> tuple[float, float]:
    """dt-coefficients of ``dB dB*`` and ``dB* dB``."""
    return s.gamma_minus, s.gamma_plus


# ---------------------------------------------------------------------------
# principal value quadrature


class PVResult(NamedTuple):
    value: float
    residual: float
    converged: bool
    ladder: tuple[float, ...]


_GL_X, _GL_W = np.polynomial.legendre.leggauss(GAUSS_ORDER)


def _gauss(f: Callable, edges: np.ndarray) -> float:
    """Composite Gauss-Legendre on consecutive ``edges``."""
    a, b = edges[:-1], edges[1:]
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    x = mid[:, None] + half[:, None] * _GL_X[None, :]
    vals = np.asarray(f(x), dtype=float)
    return float(np.sum(half[:, None] * _GL_W[None, :] * vals))


def _log_side(f: Callable, pole: float, near: float, far: float, sign: int, panels: int, breaks) -> float:
    """``int f(w) / (w - pole) dw`` over ``pole + sign*[near, far]``.

    Substituting ``w = pole + sign * exp(u)`` turns the integrand into the
    smooth ``f(pole + sign exp(u))`` (times ``sign`` for orientation).
    """
    if far <= near:
        return 0.0
    u0, u1 = math.log(near), math.log(far)
    cuts = sorted({math.log(d) for d in breaks if near < d < far})
    edges = np.unique(np.concatenate([np.linspace(u0, u1, panels + 1), cuts]))
    # orientation: dw/(w - pole) = du for both sides
    return _gauss(lambda u: f(pole + sign * np.exp(u)), edges)


def _odd_part(f: Callable, pole: float, eps: float, panels: int, breaks) -> float:
    """``PV int_{pole-eps}^{pole+eps} f(w)/(w-pole) dw = int_0^eps (f(p+u)-f(p-u))/u du``."""
    cuts = sorted({d for d in breaks if 0 < d < eps})
    edges = np.unique(np.concatenate([np.linspace(0.0, eps, panels + 1), cuts]))
    return _gauss(lambda u: (f(pole + u) - f(pole - u)) / u, edges)


def pv_integral(
    f: Callable,
    pole: float,
    lower: float,
    upper: float,
    eps: float | None = None,
    panels: int = 4096,
    breakpoints=(),
    rtol: float = PV_RTOL,
) -> PVResult:
    """Principal value of ``int_lower^upper f(w) / (w - pole) dw``.

    The window ``(pole - eps, pole + eps)`` is excluded and replaced by the
    integral of the odd part of ``f`` about the pole; the outer pieces are
    integrated in logarithmic distance from the pole. This is repeated for
    ``eps, eps/2, eps/4`` and Richardson-extrapolated; the spread of the two
    extrapolants is the residual estimate.
    """
    if upper <= lower:
        return PVResult(0.0, 0.0, True, (0.0,))
    if eps is None:
        eps = 1e-3 * (upper - lower)
    if eps <= 0:
        raise ValueError("eps must be positive")
    pole = float(pole)
    breaks = [abs(b - pole) for b in (lower, upper, *breakpoints)]

    if pole <= lower or pole >= upper:
        # no singularity inside: plain integral, still graded toward the pole
        sign = 1 if pole <= lower else -1
        near, far = (lower - pole, upper - pole) if sign == 1 else (pole - upper, pole - lower)
        if near == 0.0:
            if abs(float(np.ravel(f(np.array([pole + sign * 1e-300])))[0])) > 0:
                raise LambShiftDivergence("pole on an integration endpoint with nonzero integrand", math.inf)
            near = 1e-14 * (upper - lower)
        value = sign * _log_side(f, pole, near, far, sign, panels, breaks)
        return PVResult(value, 0.0, True, (value,))

    ladder = []
    n_side = max(panels // 2, 8)
    n_odd = max(panels // 64, 8)
    for k in range(3):
        e_k = min(eps / 2**k, 0.5 * min(pole - lower, upper - pole))
        right = _log_side(f, pole, e_k, upper - pole, +1, n_side, breaks)
        left = -_log_side(f, pole, e_k, pole - lower, -1, n_side, breaks)
        ladder.append(right + left + _odd_part(f, pole, e_k, n_odd, breaks))
    r1 = (4 * ladder[1] - ladder[0]) / 3
    r2 = (4 * ladder[2] - ladder[1]) / 3
    value = (16 * r2 - r1) / 15
    residual = abs(r2 - r1)
    converged = residual <= rtol * max(1.0, abs(value))
    return PVResult(value, residual, converged, tuple(ladder))
