import numpy as np
import pytest
from hypothesis import given
from sklearn.base import clone

from qworkagent.belief import coin_belief
from qworkagent.extraction import approach_rates
from qworkagent.policy import (
    DPPolicy,
    NonStationaryPolicyError,
    backward_induction,
    coin_belief_grid,
    dp_backward,
    grid_chain_rate,
    optimal_eigenvalues,
    reward,
    step_tables,
    tofe_rate,
    uniform_action_grid,
)
from qworkagent.processes import make_perturbed_coin
from qworkagent.qmath import ValidationError, random_density, random_unitary, relative_entropy

from conftest import open_probs, probs, seeds
from oracles import brute_force_v1, policy_value


@pytest.fixture(scope="module")
def small_tables():
    hmm = make_perturbed_coin(0.8, 0.3)
    return hmm, step_tables(hmm, coin_belief_grid(11), uniform_action_grid(8))


def test_step_rewards_match_scalar_reward(small_tables):
    hmm, t = small_tables
    grid = coin_belief_grid(11)
    for b in (0, 3, 5, 10):
        for a in (0, 2, t.lo_index[b]):
            assert t.rewards[b, a] == pytest.approx(reward(grid[b], t.thetas[b, a], hmm), abs=1e-10)


def test_step_probabilities_are_normalized(small_tables):
    _, t = small_tables
    assert np.allclose(t.probs.sum(axis=-1), 1.0)
    assert t.succ.min() >= 0 and t.succ.max() < 11


def test_dp_matches_brute_force_small(small_tables):
    _, t = small_tables
    _, values = backward_induction(t, 3)
    assert np.array_equal(values[0], brute_force_v1(t, 3))


@given(open_probs, probs)
def test_value_dominates_local_optimizer(p, r):
    hmm = make_perturbed_coin(p, r)
    table = dp_backward(hmm, coin_belief_grid(21), uniform_action_grid(12), T=6)
    tables = table.meta["tables"]
    v_lo = policy_value(tables, tables.lo_index, 6)
    assert np.all(table.values[0] >= v_lo - 1e-12)
    # rewards are nonnegative, so more remaining steps never lose value
    assert np.all(np.diff(table.values, axis=0) <= 1e-12)


def test_tie_rule_picks_smallest_angle():
    hmm = make_perturbed_coin(0.5, 0.0)
    table = dp_backward(hmm, coin_belief_grid(3), uniform_action_grid(4), T=2)
    # at the stationary belief every action yields zero work and learns nothing
    assert table.actions[0, 1] == 0


@given(seeds)
def test_optimal_eigenvalues_beat_alternative_spectra(seed):
    rng = np.random.default_rng(seed)
    xi = random_density(rng, 2)
    u = random_unitary(rng, 2)
    best = relative_entropy(xi, optimal_eigenvalues(u, xi))
    for lam in rng.dirichlet([1, 1], size=20):
        assert best <= relative_entropy(xi, (u * lam) @ u.conj().T) + 1e-12


def test_tofe_rates():
    apathetic = make_perturbed_coin(0.5, 0.3)
    res = tofe_rate(apathetic, n_beliefs=101, n_actions=90)
    assert res.rate == pytest.approx(approach_rates(apathetic, "memoryless").rate, abs=1e-9)
    adv = tofe_rate(make_perturbed_coin(0.9, 0.2))
    assert adv.rate == pytest.approx(0.38272, abs=5e-5)
    assert adv.value_increment == pytest.approx(adv.rate, abs=2e-3)
    assert adv.rate > approach_rates(make_perturbed_coin(0.9, 0.2), "quantum").rate
    with pytest.raises(ValidationError):
        tofe_rate(apathetic, n_beliefs=21, n_actions=12, method="bogus")


def test_strict_stationarity_is_enforced():
    hmm = make_perturbed_coin(0.95, 0.9)
    table = dp_backward(hmm, T=30)
    bad = table.unstable_beliefs()
    assert bad > 0
    with pytest.raises(NonStationaryPolicyError):
        table.stationary_row(strict=True)
    assert np.array_equal(table.stationary_row(strict=False), table.actions[4])
    stable = dp_backward(make_perturbed_coin(0.9, 0.2), T=30)
    assert stable.unstable_beliefs() == 0


def test_grid_chain_rate_of_lo_row():
    hmm = make_perturbed_coin(0.5, 0.2)
    table = dp_backward(hmm, coin_belief_grid(41), uniform_action_grid(36), T=8)
    rate = grid_chain_rate(table, table.meta["tables"].lo_index).rate
    assert rate == pytest.approx(approach_rates(hmm, "memoryless").rate, abs=1e-9)


def test_estimator_api():
    est = DPPolicy(horizon=12, n_beliefs=41, n_actions=36)
    assert clone(est).get_params() == est.get_params()
    est.fit(make_perturbed_coin(0.9, 0.2))
    theta = est.predict(np.array([coin_belief(0.1), coin_belief(-0.1)]))
    assert theta.shape == (2,)
    assert 0.3 < est.score() < 0.4
    with pytest.raises(ValidationError):
        DPPolicy(horizon=0).fit(make_perturbed_coin(0.9, 0.2))
    with pytest.raises(ValidationError):
        DPPolicy().predict([[0.5, 0.5]])


def test_table_serialization():
    table = dp_backward(make_perturbed_coin(0.7, 0.4), coin_belief_grid(5), uniform_action_grid(4), T=2)
    lines = table.to_csv().strip().splitlines()
    assert lines[0] == "t,belief_index,epsilon,theta,value" and len(lines) == 1 + 2 * 5
    assert '"horizon": 2' in table.to_json()
