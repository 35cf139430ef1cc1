import numpy as np
import pytest
from hypothesis import given, settings

from qworkagent.bounds import (
    causal_cost,
    causal_dissipation,
    exact_conditional_entropy,
    finite_tofe,
    free_energy_rate_lower,
    helstrom,
    helstrom_ensemble,
    hierarchy_check,
    reverse_slots,
)
from qworkagent.processes import ResourceError, make_golden_mean_21, make_perturbed_coin, multi_time_state
from qworkagent.qmath import (
    ValidationError,
    binary_entropy,
    kron_all,
    random_density,
    von_neumann_entropy,
)

from conftest import open_probs, probs, seeds

LN2 = np.log(2.0)


def test_helstrom_orthogonal_and_identical():
    m = helstrom(np.diag([1.0, 0.0]), np.diag([0.0, 1.0]), 0.5, 0.5)
    assert np.allclose(m.M0, np.diag([1.0, 0.0]))
    assert m.success == pytest.approx(1.0)
    rho = np.eye(2) / 2
    assert helstrom(rho, rho, 0.3, 0.7).error == pytest.approx(0.3)
    with pytest.raises(ValidationError):
        helstrom(rho, rho, 0.3, 0.3)


@given(seeds, open_probs)
def test_helstrom_matches_trace_norm(seed, p0):
    rng = np.random.default_rng(seed)
    r0, r1 = random_density(rng, 3), random_density(rng, 3)
    m = helstrom(r0, r1, p0, 1 - p0)
    trace_norm = np.linalg.svd(p0 * r0 - (1 - p0) * r1, compute_uv=False).sum()
    assert m.success == pytest.approx(0.5 * (1 + trace_norm), abs=1e-10)
    assert np.allclose(m.M0 + m.M1, np.eye(3), atol=1e-10)
    assert np.linalg.eigvalsh(m.M0).min() > -1e-10 and np.linalg.eigvalsh(m.M1).min() > -1e-10
    direct = p0 * np.trace(m.M0 @ r0).real + (1 - p0) * np.trace(m.M1 @ r1).real
    assert direct == pytest.approx(m.success, abs=1e-10)


@given(open_probs)
def test_bound_classical_limit(p):
    b = free_energy_rate_lower(make_perturbed_coin(p, 0.0), 4)
    assert b.value == pytest.approx(LN2 - binary_entropy(p), abs=1e-9)


@given(probs)
def test_bound_iid_mixture(r):
    hmm = make_perturbed_coin(0.5, r)
    b = free_energy_rate_lower(hmm, 5)
    mix = 0.5 * (hmm.outputs[0] + hmm.outputs[1])
    assert b.value == pytest.approx(LN2 - von_neumann_entropy(mix), abs=1e-9)


def test_bound_trivial_limits():
    for p, r in [(0.0, 0.5), (1.0, 0.3), (0.4, 1.0)]:
        assert free_energy_rate_lower(make_perturbed_coin(p, r), 6).value == pytest.approx(LN2, abs=1e-9)
    with pytest.raises(ResourceError):
        free_energy_rate_lower(make_perturbed_coin(0.3, 0.3), 13)
    with pytest.raises(ValidationError):
        free_energy_rate_lower(make_golden_mean_21(0.3, 0.3), 3)


@given(open_probs, probs)
@settings(max_examples=25)
def test_data_processing_small_n(p, r):
    hmm = make_perturbed_coin(p, r)
    for n in (1, 2, 3):
        assert helstrom_ensemble(hmm, n).conditional_entropy >= exact_conditional_entropy(hmm, n) - 1e-10


def _cq_state(rng, T=3):
    parts = []
    for k in range(2):
        proj = np.zeros((2, 2))
        proj[k, k] = 1.0
        parts.append(kron_all([proj] * (T - 1) + [random_density(rng, 2)]))
    return 0.5 * (parts[0] + parts[1])


def test_causal_zero_cases(rng):
    s = random_density(rng, 2)
    assert causal_dissipation(kron_all([s, s, s]), 64, 3).delta == pytest.approx(0.0, abs=1e-6)
    assert causal_dissipation(_cq_state(rng), 64, 3).delta == pytest.approx(0.0, abs=1e-6)


def test_causal_asymmetry(rng):
    cq = _cq_state(rng)
    assert causal_dissipation(reverse_slots(cq), 64, 3).delta > 1e-3


@given(seeds)
@settings(max_examples=15)
def test_causal_nonnegative_and_refinement_monotone(seed):
    rng = np.random.default_rng(seed)
    rho = random_density(rng, 4)
    coarse = causal_cost(rho, 16)
    fine = causal_cost(rho, 32)
    assert fine <= coarse + 1e-12
    assert causal_dissipation(rho, 32, 2).delta >= 0.0


def test_causal_matches_work_gap():
    rho = multi_time_state(make_perturbed_coin(0.0, 0.2), 3)
    res = causal_dissipation(rho, 64, 3)
    gap = 3 * LN2 - von_neumann_entropy(rho) - finite_tofe(rho, 64)
    assert res.delta > 1e-3
    assert res.delta == pytest.approx(gap, abs=1e-3)
    assert set(res.plan) == {(), (0,), (1,)}


def test_causal_validation():
    with pytest.raises(ValidationError):
        causal_dissipation(np.eye(3) / 3)
    with pytest.raises(ValidationError):
        causal_dissipation(np.eye(4) / 4, T=3)
    with pytest.raises(ResourceError):
        causal_dissipation(np.eye(32) / 32)


def test_hierarchy_at_half():
    h = hierarchy_check(make_perturbed_coin(0.5, 0.4), grids={"n_beliefs": 101, "n_actions": 90})
    assert h.ordering_ok
    assert max(h.f_lower, h.f_to, h.w_lo) - min(h.f_lower, h.f_to, h.w_lo) < 5e-3
