import numpy as np
import pytest
from hypothesis import given

from qworkagent.processes import (
    ReducibleChainError,
    ResourceError,
    all_words,
    build_hmm,
    latent_blocks,
    load_hmm,
    make_golden_mean_21,
    make_perturbed_coin,
    multi_time_state,
    next_output_given_latent,
    output_fidelity,
    save_hmm,
    stationary_distribution,
    word_probability,
)
from qworkagent.qmath import ValidationError, kron_all, partial_trace

from conftest import open_probs, probs


def _brute_joint(hmm, T):
    rho = 0
    for w in all_words(hmm.n_symbols, T):
        rho = rho + word_probability(hmm, w) * kron_all([hmm.outputs[x] for x in w])
    return rho


@given(probs, probs)
def test_coin_structure(p, r):
    hmm = make_perturbed_coin(p, r)
    assert np.allclose(hmm.stationary, [0.5, 0.5])
    assert np.allclose(hmm.transition.sum(axis=1), 1.0)
    assert output_fidelity(hmm) == pytest.approx(r, abs=1e-9)
    xi = next_output_given_latent(hmm)
    assert np.allclose(xi[0], (1 - p) * hmm.outputs[0] + p * hmm.outputs[1])


@given(open_probs, probs)
def test_golden_mean_stationary_is_invariant(p, r):
    hmm = make_golden_mean_21(p, r)
    assert np.allclose(hmm.stationary @ hmm.transition, hmm.stationary, atol=1e-12)
    assert np.allclose(stationary_distribution(hmm), hmm.stationary, atol=1e-9)


@pytest.mark.parametrize("p,r", [(0.9, 0.2), (0.3, 0.6), (0.0, 0.5)])
def test_multi_time_state_matches_word_sum(p, r):
    hmm = make_perturbed_coin(p, r)
    for T in (1, 2, 3):
        rho = multi_time_state(hmm, T)
        assert np.allclose(rho, _brute_joint(hmm, T), atol=1e-12)
        assert np.trace(rho).real == pytest.approx(1.0)
        assert np.allclose(sum(latent_blocks(hmm, T)), rho)


@given(open_probs, probs)
def test_marginal_consistency(p, r):
    hmm = make_golden_mean_21(p, r)
    rho3 = multi_time_state(hmm, 3)
    rho2 = multi_time_state(hmm, 2)
    assert np.allclose(partial_trace(rho3, (2, 2, 2), (0, 1)), rho2, atol=1e-12)
    assert np.allclose(partial_trace(rho3, (2, 2, 2), (1, 2)), rho2, atol=1e-12)


def test_reducible_chain_is_reported():
    t0 = np.array([[1.0, 0.0], [0.0, 0.0]])
    t1 = np.array([[0.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ReducibleChainError, match="components"):
        build_hmm([t0, t1], [np.diag([1.0, 0]), np.diag([0, 1.0])])


def test_validation():
    with pytest.raises(ValidationError):
        make_perturbed_coin(1.2, 0.1)
    with pytest.raises(ValidationError):
        build_hmm([[[0.5, 0.2], [0.5, 0.5]]], [np.eye(2) / 2])
    with pytest.raises(ResourceError):
        multi_time_state(make_perturbed_coin(0.5, 0.5), 13)


def test_json_roundtrip(tmp_path):
    hmm = make_golden_mean_21(0.4, 0.3)
    path = tmp_path / "g.json"
    save_hmm(hmm, path)
    back = load_hmm(path)
    assert np.allclose(back.labeled, hmm.labeled)
    assert np.allclose(back.outputs, hmm.outputs, atol=1e-12)
    assert np.allclose(back.stationary, hmm.stationary)
