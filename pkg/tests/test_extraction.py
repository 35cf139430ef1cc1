import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given

from qworkagent.extraction import (
    approach_policy,
    expected_work,
    expected_work_identity,
    hoeffding_bound,
    ideal_work_table,
    nondegenerate_energy_account,
    overcommit_state,
    protocol_check,
    protocol_schedule,
    reward_from_work,
    sample_work,
    simulate_protocol,
)
from qworkagent.processes import make_perturbed_coin
from qworkagent.qmath import ValidationError, random_density, relative_entropy

from conftest import seeds


def _d(r, s):
    return np.trace(r @ (sla.logm(r) - sla.logm(s))).real


@given(seeds)
def test_expected_work_relative_entropy_form(seed):
    rng = np.random.default_rng(seed)
    for d in (2, 3):
        sigma, rho = random_density(rng, d), random_density(rng, d)
        oracle = _d(sigma, np.eye(d) / d) - _d(sigma, rho)
        assert expected_work(rho, sigma) == pytest.approx(oracle, abs=1e-8)
        assert expected_work_identity(rho, sigma) == pytest.approx(oracle, abs=1e-8)


@given(seeds)
def test_tailored_input_extracts_free_energy(seed):
    rng = np.random.default_rng(seed)
    sigma, other = random_density(rng, 2), random_density(rng, 2)
    for beta in (0.5, 2.0):
        best = expected_work(sigma, sigma, beta=beta)
        assert best == pytest.approx(relative_entropy(sigma, np.eye(2) / 2) / beta, abs=1e-10)
        assert expected_work(other, sigma, beta=beta) <= best + 1e-12


def test_nondegenerate_hamiltonian_account(rng):
    h = np.diag([0.0, 0.7])
    for _ in range(5):
        sigma, rho = random_density(rng, 2), random_density(rng, 2)
        acc = nondegenerate_energy_account(sigma, rho, h, 1.3)
        assert acc["net_work"] == pytest.approx(acc["relative_entropy_form"], abs=1e-9)
        assert expected_work_identity(rho, sigma, h, 1.3) == pytest.approx(acc["expected_work"], abs=1e-9)


def test_work_values_and_merging():
    t = ideal_work_table(np.diag([0.8, 0.2]))
    assert t.values == pytest.approx(np.log(2 * np.array([0.8, 0.2])))
    flat = ideal_work_table(np.eye(2) / 2)
    assert len(flat.merged) == 1 and flat.merged[0] == pytest.approx(0.0)
    assert expected_work(np.diag([1.0, 0.0]), np.eye(2) / 2) == -np.inf


def test_schedule_converges_to_ideal_values(rng):
    rho = random_density(rng, 2)
    ideal = ideal_work_table(rho).values
    errs = []
    for M in (10, 100, 1000, 10_000):
        s = protocol_schedule(rho, M)
        errs.append(max(abs(s.conditional_mean(k) - ideal[k]) for k in (0, 1)))
    assert all(a > b for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-3
    with pytest.raises(ValidationError):
        protocol_schedule(rho, 0)


def test_single_run_is_reproducible_and_consistent(rng):
    sigma, rho = random_density(rng, 2), random_density(rng, 2)
    a = simulate_protocol(sigma, rho, 50, rng_seed=3)
    b = simulate_protocol(sigma, rho, 50, rng_seed=3)
    assert a.sampled_work == b.sampled_work
    s = protocol_schedule(rho, 50)
    bits = a.trajectory[1:]
    assert a.sampled_work == pytest.approx(float(s.offset(a.initial_bit) + bits @ s.bit_weights()))
    assert np.allclose(a.final_system_state, np.eye(2) / 2)


def test_sample_work_matches_finite_m_mean(rng):
    sigma, rho = random_density(rng, 2), random_density(rng, 2)
    M, n = 200, 40_000
    s = protocol_schedule(rho, M)
    i, w = sample_work(sigma, rho, M, n, rng)
    q1 = float(np.real(s.basis[:, 1].conj() @ sigma @ s.basis[:, 1]))
    exact = (1 - q1) * s.conditional_mean(0) + q1 * s.conditional_mean(1)
    assert abs(w.mean() - exact) < 4 * w.std() / np.sqrt(n)
    assert abs(i.mean() - q1) < 4 * np.sqrt(q1 * (1 - q1) / n)


def test_protocol_check_fields(rng):
    sigma, rho = random_density(rng, 2), random_density(rng, 2)
    c = protocol_check(sigma, rho, 100, 5000, rng)
    assert c.std_error > 0 and c.bias >= 0
    assert set(c.tails) == {0.1, 0.3}
    for tail, bound in c.tails.values():
        assert 0 <= tail <= 1 and bound >= 0


def test_hoeffding_and_reward_helpers():
    assert hoeffding_bound(0.8, 0.2, 0.1, 1000) == pytest.approx(2 * np.exp(-0.04 * 0.01 * 1000 / 0.36))
    assert hoeffding_bound(0.5, 0.5, 0.1, 10) == 0.0
    assert reward_from_work([0.4, -0.9, 0.0], 0.5, -1.0).tolist() == [1, 0, 1]


def test_overcommit_state_and_policies():
    sig = np.diag([1.0, 0.0])
    oc = overcommit_state(sig, 1000)
    assert np.trace(oc).real == pytest.approx(1.0)
    assert np.linalg.eigvalsh(oc).min() == pytest.approx(0.5 / 1000)
    hmm = make_perturbed_coin(0.9, 0.2)
    for name in ("quantum", "classical", "memoryless"):
        assert np.trace(approach_policy(hmm, name)(hmm.stationary)).real == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        approach_policy(hmm, "overcommitment")
    with pytest.raises(ValidationError):
        approach_policy(hmm, "nope")


def test_near_pure_target_bias_is_schedule_not_sampling():
    # M * lambda_min ~ 1: the ideal value is off by far more than the sampling error,
    # while the exact M-step mean is matched
    rng = np.random.default_rng(48)
    rho = np.diag([1 - 1e-3, 1e-3]).astype(complex)
    sigma = np.eye(2) / 2
    c = protocol_check(sigma, rho, 1000, 40000, rng)
    assert abs(c.z_finite) < 4
    assert abs(c.z) > 4
    assert abs(c.finite_expected - c.expected) <= 2 * (2 * (1 - 1e-3) - 1) / (1e-3 * 1000)
