import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinlimit.bath import BathModel, FlatDensity, asymmetric_table, transition_rates
from spinlimit.classical import (
    ClassicalRateModel,
    RateMismatchError,
    closed_form_model,
    detailed_balance_check,
    diagonal_invariance_check,
    displayed_flip_operator,
    extract_rates,
    gillespie,
    glauber_comparison,
    glauber_rate,
    initial_spins,
    nearest_neighbor_preset,
    numeric_generator_matrix,
    two_state_model,
)
from spinlimit.generator import ChannelTerm, assemble_bundle, bundle_from_terms
from spinlimit.lattice import (
    SpinConfiguration,
    build_lattice,
    gibbs_distribution,
    grid,
    path,
    rate_consistent_gibbs,
    ring,
)

from oracles import dense_F

ASYM = BathModel(1.0, 0.0, asymmetric_table())


@pytest.fixture(scope="module")
def ring4():
    return assemble_bundle(ring(4), ASYM)


def test_diagonal_invariance(ring4):
    assert diagonal_invariance_check(ring4) < 1e-13


def test_diagonal_invariance_rejects_offdiagonal(ring4):
    from spinlimit.operators import pauli

    with pytest.raises(ValueError, match="diagonal"):
        diagonal_invariance_check(ring4, operators=[pauli("x", 0).full(4)])


def test_extract_rates_ring4_example(ring4):
    model = extract_rates(ring4)
    assert model.verified_residual < 1e-10
    gm, gp = transition_rates(ASYM, 2.0)
    up = [1, 1, 1, 1]
    # all-up: every flip costs energy, so it runs at gamma+
    assert model.flip_rate(0, up) == pytest.approx(gp)
    # site 0 down between up neighbors: raising it releases energy
    assert model.flip_rate(0, [-1, 1, 1, 1]) == pytest.approx(gm)
    # domain wall: E = 0, blocked
    assert model.flip_rate(1, [1, 1, -1, -1]) == 0.0


@pytest.mark.parametrize("graph", [ring(3), ring(6), path(5), grid((2, 3), 0.7)])
def test_extract_rates_other_lattices(graph):
    bath = BathModel(0.8, -0.3, asymmetric_table())
    model = extract_rates(assemble_bundle(graph, bath))
    assert model.verified_residual < 1e-10


def test_numeric_generator_matches_dense_oracle():
    # Q[s', s] from the oracle F matrices, written out entrywise
    g = ring(3)
    bundle = assemble_bundle(g, ASYM)
    Q, leak = numeric_generator_matrix(bundle)
    assert leak == 0.0
    d = 8
    ref = np.zeros((d, d))
    nb = {r: sorted({(r - 1) % 3, (r + 1) % 3}) for r in range(3)}
    for t in bundle.terms:
        F = dense_F(t.channel.site, nb[t.channel.site], t.channel.neighborhood.values, 3)
        A = np.abs(F) ** 2
        for rate, M in ((t.gamma_minus, A), (t.gamma_plus, A.T)):
            ref += rate * (M - np.diag(M.sum(axis=0)))
    assert np.allclose(Q.toarray().real, ref, atol=1e-13)


def test_extract_rates_detects_mismatch(ring4):
    # doubling one channel's rate breaks the closed form
    terms = list(ring4.terms)
    k = ring4.noise_terms[0]
    t = terms[k]
    s = t.susceptibility
    from spinlimit.bath import Susceptibility

    terms[k] = ChannelTerm(t.F, Susceptibility(s.energy, 2 * s.minus, s.plus), t.channel, t.label)
    broken = bundle_from_terms(terms, 4)
    object.__setattr__(broken, "graph", ring4.graph)
    object.__setattr__(broken, "bath", ring4.bath)
    with pytest.raises(RateMismatchError):
        extract_rates(broken)


def test_blocked_moves_1d(ring4):
    model = extract_rates(ring4)
    blocked = model.null_blocked()
    assert len(blocked) == 8
    assert {v for _, v in blocked} == {"+-", "-+"}
    kinds = {row["kind"] for row in model.rate_table()}
    assert kinds == {"emission", "absorption", "blocked"}


@settings(max_examples=20)
@given(st.floats(0.2, 3.0), st.floats(0.6, 7.0))
def test_local_rates_pair_by_kms(beta, e):
    model = ClassicalRateModel(ring(3), BathModel(beta, 0.0, asymmetric_table()))
    up, down = model.local_rate(0, -1, e), model.local_rate(0, 1, e)
    assert math.log(up / down) == pytest.approx(beta * e, abs=1e-10)


def test_detailed_balance_preset():
    preset = nearest_neighbor_preset(6)
    rep = detailed_balance_check(preset.model)
    assert rep.max_violation < 1e-10
    assert rep.n_blocked == 2 * 6
    assert rep.one_sided == 0


def test_detailed_balance_high_temperature():
    model = closed_form_model(ring(4), BathModel(1e-12, 0.0, FlatDensity(1.0, 10.0, 0.5)))
    rep = detailed_balance_check(model)
    assert rep.max_violation < 1e-10


def test_detailed_balance_refuses_nonzero_mu():
    with pytest.raises(ValueError, match="mu"):
        detailed_balance_check(closed_form_model(ring(4), BathModel(1.0, -0.5, asymmetric_table())))


def test_rate_consistent_gibbs_is_stationary_plain_gibbs_is_not():
    g = ring(5)
    Q = closed_form_model(g, ASYM).generator_matrix()
    assert np.abs(Q @ rate_consistent_gibbs(g, 1.0)).max() < 1e-12
    assert np.abs(Q @ gibbs_distribution(g, 1.0)).max() > 1e-3


def test_glauber_comparison():
    cmp = glauber_comparison(closed_form_model(ring(4), ASYM))
    assert cmp.effective_beta == 0.5
    assert cmp.max_ratio_deviation < 1e-12
    zero = [row for row in cmp.rows if row["energy"] == 0.0][0]
    assert zero["rate_up"] == 0.0 and zero["glauber_up"] == pytest.approx(0.5)


def test_glauber_rate_example():
    assert glauber_rate(1.0, 1, 0.0) == 0.5
    assert glauber_rate(1.0, 1, 1.0) == pytest.approx(0.5 * (1 - math.tanh(1.0)))


def test_preset_structure():
    preset = nearest_neighbor_preset(4, 1.0)
    assert preset.energy == 2.0
    assert preset.active_sites == [0, 1, 2, 3]
    assert len(preset.bundle.susceptibility_table()) == 1
    assert preset.model.verified_residual is not None
    m = displayed_flip_operator(4, 0)
    assert m.shape == (8, 8) and np.count_nonzero(m) == 2


def test_preset_rejects_antiferromagnet():
    from spinlimit.lattice import LatticeError

    with pytest.raises(LatticeError):
        nearest_neighbor_preset(4, -1.0)


def test_gillespie_absorbing_state():
    model = ClassicalRateModel(ring(4), rate_function=lambda r, c, e: 0.0)
    res = gillespie(model, "all_up", 5.0, seed=0, grid=6)
    assert res.absorbed_at == 0.0
    assert np.all(res.magnetization == 1.0) and np.all(res.n_events == 0)


def test_gillespie_deterministic_and_seed_sensitive():
    model = closed_form_model(ring(20), ASYM)
    a = gillespie(model, "random(0.5)", 5.0, seed=7)
    b = gillespie(model, "random(0.5)", 5.0, seed=7)
    c = gillespie(model, "random(0.5)", 5.0, seed=8)
    assert np.array_equal(a.magnetization, b.magnetization) and a.final == b.final
    assert not np.array_equal(a.n_events, c.n_events)


def test_gillespie_tracks_energy():
    g = ring(12)
    model = closed_form_model(g, ASYM)
    res = gillespie(model, "random(0.5)", 3.0, seed=1, grid=4)
    from spinlimit.lattice import system_energy

    assert res.energy[-1] == pytest.approx(system_energy(g, res.final), abs=1e-12)
    assert res.magnetization[-1] == pytest.approx(sum(res.final.values) / 12)


def test_two_state_chain_statistics():
    # samples spaced 20 correlation times apart are effectively independent
    a, b = 1.0, 3.0
    res = gillespie(two_state_model(a, b), "+", 4e4, seed=2, grid=4001)
    assert res.n_events[-1] > 5e4
    m = res.magnetization[1:]
    expected = (b - a) / (a + b)
    se = m.std(ddof=1) / math.sqrt(len(m))
    assert abs(m.mean() - expected) < 3 * se


def test_gillespie_exit_rates_match_generator():
    # empirical exit rate out of each configuration equals the Q diagonal
    g = ring(4)
    model = closed_form_model(g, ASYM)
    Q = model.generator_matrix().toarray()
    res = gillespie(model, "all_up", 2e4, seed=4, grid=2, record_events=True)
    t = np.concatenate([[0.0], res.event_times])
    sites = res.event_sites
    occupancy = np.zeros(16)
    exits = np.zeros(16)
    cfg = SpinConfiguration(tuple(range(4)), (1, 1, 1, 1))
    k = cfg.index()
    for i, r in enumerate(sites):
        occupancy[k] += t[i + 1] - t[i]
        exits[k] += 1
        k ^= 1 << int(r)
    seen = occupancy > 50
    assert seen.sum() >= 8
    rate = exits[seen] / occupancy[seen]
    expected = -np.diag(Q)[seen]
    assert np.all(np.abs(rate - expected) < 5 * np.sqrt(expected / occupancy[seen]))


def test_initial_spins_kinds():
    assert initial_spins(3, "+-+").tolist() == [1, -1, 1]
    assert initial_spins(3, "all_down").tolist() == [-1, -1, -1]
    assert set(initial_spins(50, "random(1.0)").tolist()) == {1}
    with pytest.raises(ValueError):
        initial_spins(3, "random(2)")
    with pytest.raises(ValueError):
        initial_spins(3, "++")


def test_large_ring_kmc_runs():
    model = closed_form_model(ring(10**4), ASYM)
    res = gillespie(model, "random(0.5)", 0.2, seed=0, grid=3)
    assert res.n_events[-1] > 0
    assert res.final is None


def test_rate_model_needs_source():
    with pytest.raises(ValueError):
        ClassicalRateModel(build_lattice(1, [(0,)], []))


def test_center_up_with_down_neighbors_emits():
    # +1 center against a -- neighborhood: flipping releases energy, rate gamma-
    model = closed_form_model(ring(4), ASYM)
    gm, gp = transition_rates(ASYM, 2.0)
    spins = [1, -1, -1, -1]
    assert model.local_energy(0, spins) == -2.0
    assert model.flip_rate(0, spins) == pytest.approx(gm, rel=1e-14)
    assert model.flip_rate(2, spins) == pytest.approx(gp, rel=1e-14)


@pytest.fixture(scope="module")
def ring10_model():
    return extract_rates(assemble_bundle(ring(10), ASYM))


def test_kmc_class_frequencies_ring10(ring10_model):
    # empirical flip rate per (center, local field) class: flips / exposure time,
    # with Poisson standard error sqrt(flips) / exposure
    start = np.array([1, -1, -1, 1, 1, 1, -1, 1, -1, -1], dtype=np.int8)
    res = gillespie(ring10_model, start, 4e3, seed=9, grid=2, record_events=True)
    spins = start.astype(int)
    t = np.concatenate([[0.0], res.event_times])
    exposure, flips = {}, {}
    for i, r in enumerate(res.event_sites):
        field = np.roll(spins, 1) + np.roll(spins, -1)
        for c, e in zip(spins.tolist(), field.tolist()):
            exposure[(c, e)] = exposure.get((c, e), 0.0) + t[i + 1] - t[i]
        key = (int(spins[r]), int(field[r]))
        flips[key] = flips.get(key, 0) + 1
        spins[r] = -spins[r]
    assert sum(flips.values()) > 1e4
    checked = 0
    for (c, e), tau in exposure.items():
        expected = ring10_model.local_rate(0, c, float(e))
        k = flips.get((c, e), 0)
        if e == 0:
            assert k == 0 and expected == 0.0
            continue
        if k < 100:
            continue
        assert abs(k / tau - expected) < 3 * math.sqrt(k) / tau
        checked += 1
    assert checked >= 4
