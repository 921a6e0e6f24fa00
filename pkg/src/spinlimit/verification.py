"""Numerical identity checks run by the ``verify`` command."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .classical import RateMismatchError, detailed_balance_check, diagonal_invariance_check, extract_rates
from .generator import (
    GeneratorBundle,
    check_lemma1,
    check_theorem1,
    ito_table,
    lindblad_rhs,
    random_density_matrix,
    random_local_operator,
    theta_zero,
    theta_zero_full,
)
from .operators import identity

TOLERANCES = {
    "lemma1": 1e-12,
    "theorem1": 1e-11,
    "theorem1_conjugation": 1e-12,
    "unitality": 1e-12,
    "star": 1e-12,
    "duality": 1e-12,
    "trace_preservation": 1e-13,
    "kms": 1e-12,
    "diagonal_invariance": 1e-12,
    "classical_rates": 1e-10,
    "detailed_balance": 1e-10,
}


@dataclass
class CheckRecord:
    identity: str
    n_sites: int
    residual: float
    tolerance: float
    passed: bool

    def as_json(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d


def _record(name: str, n: int, residual: float, tolerances: dict) -> CheckRecord:
    tol = tolerances.get(name, TOLERANCES[name])
    return CheckRecord(name, n, float(residual), tol, bool(residual < tol))


def kms_residual(bundle: GeneratorBundle) -> float:
    """``max |gamma+/gamma- - exp(-beta (E - mu))|`` over rate-carrying channels."""
    bath = bundle.bath
    worst = 0.0
    for k in bundle.noise_terms:
        t = bundle.terms[k]
        if t.gamma_minus > 0:
            worst = max(worst, abs(t.gamma_plus / t.gamma_minus - math.exp(-bath.beta * (t.energy - bath.mu))))
    return worst


def run_checks(
    bundle: GeneratorBundle,
    n_pairs: int = 100,
    seed: int = 0,
    tolerances: dict | None = None,
) -> list[CheckRecord]:
    tol = dict(TOLERANCES, **(tolerances or {}))
    n = bundle.n_sites
    rng = np.random.default_rng(seed)
    table = ito_table(bundle)
    active = [bundle.terms[k] for k in bundle.noise_terms]
    lemma = theorem = conj = star = 0.0
    for _ in range(n_pairs):
        X = random_local_operator(rng, n, 2)
        Y = random_local_operator(rng, n, 2)
        for t in active:
            lemma = max(lemma, check_lemma1(t, X, Y).frobenius)
        rep = check_theorem1(bundle, X, Y, table)
        theorem = max(theorem, rep.structure.frobenius)
        conj = max(conj, rep.conjugation.frobenius)
        a, b = theta_zero(bundle, X.adjoint()).dense(), theta_zero(bundle, X).adjoint().dense()
        star = max(star, float(np.linalg.norm(a - b)))
    records = [
        _record("lemma1", n, lemma, tol),
        _record("theorem1", n, theorem, tol),
        _record("theorem1_conjugation", n, conj, tol),
        _record("unitality", n, np.linalg.norm(theta_zero(bundle, identity(bundle.sites)).dense()), tol),
        _record("star", n, star, tol),
    ]
    if n <= 6:
        dual = trace = 0.0
        for _ in range(min(n_pairs, 20)):
            rho = random_density_matrix(rng, n)
            X = random_local_operator(rng, n, 2).full(n).toarray()
            L = lindblad_rhs(bundle, rho)
            dual = max(dual, abs(np.trace(theta_zero_full(bundle, X) @ rho) - np.trace(X @ L)))
            trace = max(trace, abs(np.trace(L)))
        records += [_record("duality", n, dual, tol), _record("trace_preservation", n, trace, tol)]
    if bundle.bath is not None:
        records.append(_record("kms", n, kms_residual(bundle), tol))
    if n <= 8:
        records.append(_record("diagonal_invariance", n, diagonal_invariance_check(bundle, seed=seed), tol))
    if bundle.graph is not None and bundle.bath is not None and n <= 10:
        try:
            model = extract_rates(bundle, tol["classical_rates"])
            records.append(_record("classical_rates", n, model.verified_residual, tol))
        except RateMismatchError:
            records.append(CheckRecord("classical_rates", n, math.inf, tol["classical_rates"], False))
            model = None
        if model is not None and bundle.bath.mu == 0:
            records.append(_record("detailed_balance", n, detailed_balance_check(model).max_violation, tol))
    return records
