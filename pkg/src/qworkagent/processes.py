"""Hidden Markov models that emit qubit states.

A process is described by labeled substochastic matrices ``T[x]`` with
``T[x][s, s']`` the probability of moving from latent state ``s`` to ``s'``
while emitting symbol ``x``, and an output map ``x -> sigma[x]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

from .qmath import (
    ValidationError,
    as_density,
    bloch_vector,
    density_from_bloch,
    fidelity,
    ket_to_density,
)

STOCHASTIC_TOL = 1e-10
MAX_JOINT_DIM = 4096


class ReducibleChainError(ValidationError):
    """The latent chain splits into several communicating classes."""


class ResourceError(ValueError):
    """A requested object would exceed the configured size guard."""


@dataclass(frozen=True)
class QuantumHmm:
    """Latent-state generator of a qubit stream.

    Attributes
    ----------
    labeled : array, shape (n_symbols, n_states, n_states)
        ``labeled[x, s, s2]`` = Pr(emit x, go to s2 | s).
    outputs : array, shape (n_symbols, d, d)
        Density matrix emitted with each symbol.
    stationary : array, shape (n_states,)
    """

    labeled: np.ndarray
    outputs: np.ndarray
    stationary: np.ndarray
    alphabet: tuple[str, ...]
    states: tuple[str, ...]
    name: str = "custom"
    notes: dict = field(default_factory=dict, compare=False)

    @property
    def n_states(self) -> int:
        return int(self.labeled.shape[1])

    @property
    def n_symbols(self) -> int:
        return int(self.labeled.shape[0])

    @property
    def dim(self) -> int:
        return int(self.outputs.shape[1])

    @property
    def transition(self) -> np.ndarray:
        return self.labeled.sum(axis=0)

    def symbol_probs(self, eta) -> np.ndarray:
        """``P_x = eta T[x] 1`` for a belief ``eta``."""
        return np.einsum("s,xst->x", np.asarray(eta, dtype=float), self.labeled)

    def output_bloch(self) -> np.ndarray:
        return np.array([bloch_vector(o) for o in self.outputs])


def _validate_generator(labeled: np.ndarray, outputs: np.ndarray) -> None:
    if labeled.ndim != 3 or labeled.shape[1] != labeled.shape[2]:
        raise ValidationError(f"labeled matrices must have shape (X, S, S), got {labeled.shape}")
    if outputs.ndim != 3 or outputs.shape[0] != labeled.shape[0]:
        raise ValidationError("need exactly one output state per symbol")
    if np.any(labeled < -STOCHASTIC_TOL):
        raise ValidationError("labeled matrices have negative entries")
    rows = labeled.sum(axis=(0, 2))
    if np.any(np.abs(rows - 1.0) > STOCHASTIC_TOL):
        raise ValidationError(f"summed transition matrix is not row-stochastic: row sums {rows}")
    for i, o in enumerate(outputs):
        as_density(o, tol=1e-10, name=f"output[{i}]")


def stationary_distribution(hmm_or_matrix) -> np.ndarray:
    """Stationary vector of the latent chain.

    Raises ``ReducibleChainError`` naming the strongly connected components
    when the chain is not irreducible.
    """
    t = hmm_or_matrix.transition if isinstance(hmm_or_matrix, QuantumHmm) else np.asarray(hmm_or_matrix, dtype=float)
    n_comp, labels = connected_components(t > STOCHASTIC_TOL, directed=True, connection="strong")
    if n_comp > 1:
        groups = [np.flatnonzero(labels == c).tolist() for c in range(n_comp)]
        raise ReducibleChainError(f"latent chain is reducible; strongly connected components: {groups}")
    w, v = np.linalg.eig(t.T)
    k = int(np.argmin(np.abs(w - 1.0)))
    pi = np.real(v[:, k])
    pi = pi / pi.sum()
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def build_hmm(labeled, outputs, *, alphabet=None, states=None, name: str = "custom", notes=None,
              stationary=None) -> QuantumHmm:
    """Validate and assemble a process.

    ``stationary`` lets named constructors supply a closed form, which also
    covers the reducible edge cases (e.g. a coin that never flips).
    """
    lab = np.asarray(labeled, dtype=float)
    outs = np.asarray(outputs, dtype=complex)
    _validate_generator(lab, outs)
    if stationary is None:
        pi = stationary_distribution(lab.sum(axis=0))
    else:
        pi = np.asarray(stationary, dtype=float)
        if np.any(np.abs(pi @ lab.sum(axis=0) - pi) > STOCHASTIC_TOL) or abs(pi.sum() - 1) > STOCHASTIC_TOL:
            raise ValidationError("supplied stationary vector is not invariant")
    alphabet = tuple(str(a) for a in (alphabet if alphabet is not None else range(lab.shape[0])))
    states = tuple(str(s) for s in (states if states is not None else range(lab.shape[1])))
    return QuantumHmm(lab, outs, pi, alphabet, states, name, dict(notes or {}))


def _check_unit(name: str, v: float) -> float:
    if not 0.0 <= v <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {v!r}")
    return float(v)


def fidelity_ket(r: float) -> np.ndarray:
    """``sqrt(r)|0> + sqrt(1-r)|1>``, overlap ``r`` with ``|0>``."""
    return np.array([np.sqrt(r), np.sqrt(1.0 - r)], dtype=complex)


def make_perturbed_coin(p: float, r: float) -> QuantumHmm:
    """Two-state coin that flips with probability ``p``.

    The latent state equals the last emitted symbol.  Symbol 0 emits
    ``|0><0|``, symbol 1 emits ``|psi><psi|`` with ``|<0|psi>|^2 = r``.
    """
    p = _check_unit("p", p)
    r = _check_unit("r", r)
    t0 = np.array([[1 - p, 0.0], [p, 0.0]])
    t1 = np.array([[0.0, p], [0.0, 1 - p]])
    outs = [np.diag([1.0, 0.0]).astype(complex), ket_to_density(fidelity_ket(r))]
    return build_hmm([t0, t1], outs, alphabet=("0", "1"), states=("A", "B"), name="perturbed_coin",
                     notes={"p": p, "r": r}, stationary=[0.5, 0.5])


def make_golden_mean_21(p: float, r: float) -> QuantumHmm:
    """Three-state 2-1 golden-mean variant.

    Assumed adjacency (latent states A, B, C):

    * A -> A emitting symbol 1 with probability ``1 - p``
    * A -> B emitting symbol 0 with probability ``p``
    * B -> C emitting symbol 0 with probability 1
    * C -> A emitting symbol 0 with probability 1

    so ``p = 1`` gives the deterministic period-3 cycle.  Outputs are as
    for the perturbed coin.
    """
    p = _check_unit("p", p)
    r = _check_unit("r", r)
    t0 = np.array([[0.0, p, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    t1 = np.array([[1 - p, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    outs = [np.diag([1.0, 0.0]).astype(complex), ket_to_density(fidelity_ket(r))]
    pi = np.array([1.0, p, p]) / (1.0 + 2.0 * p)
    return build_hmm([t0, t1], outs, alphabet=("0", "1"), states=("A", "B", "C"), name="golden_mean_21",
                     notes={"p": p, "r": r}, stationary=pi)


def word_probability(hmm: QuantumHmm, word, start=None) -> float:
    v = np.asarray(hmm.stationary if start is None else start, dtype=float)
    for x in word:
        v = v @ hmm.labeled[x]
    return float(v.sum())


def latent_blocks(hmm: QuantumHmm, horizon: int, max_dim: int = MAX_JOINT_DIM) -> list:
    """Joint emission state split by the final latent state.

    ``blocks[s]`` is the sum over words of ``Pr(word, ends in s)`` times the
    tensor product of the emitted states, starting from stationarity.
    """
    if horizon < 1:
        raise ValidationError("horizon must be at least 1")
    if hmm.dim ** horizon > max_dim:
        raise ResourceError(f"joint dimension {hmm.dim}**{horizon} exceeds the guard {max_dim}")
    blocks = [np.full((1, 1), pi_s, dtype=complex) for pi_s in hmm.stationary]
    for _ in range(horizon):
        d = blocks[0].shape[0] * hmm.dim
        nxt = [np.zeros((d, d), dtype=complex) for _ in range(hmm.n_states)]
        for s, acc in enumerate(blocks):
            if not np.any(acc):
                continue
            for x in range(hmm.n_symbols):
                row = hmm.labeled[x, s]
                if not np.any(row):
                    continue
                piece = np.kron(acc, hmm.outputs[x])
                for s2 in np.flatnonzero(row):
                    nxt[s2] += row[s2] * piece
        blocks = nxt
    return blocks


def multi_time_state(hmm: QuantumHmm, horizon: int, max_dim: int = MAX_JOINT_DIM) -> np.ndarray:
    """Joint state of ``horizon`` consecutive emissions started from stationarity."""
    rho = sum(latent_blocks(hmm, horizon, max_dim))
    return 0.5 * (rho + rho.conj().T)


def next_output_given_latent(hmm: QuantumHmm) -> np.ndarray:
    """``xi[s] = sum_x Pr(x | s) sigma[x]``, the next emission given latent ``s``."""
    px = hmm.labeled.sum(axis=2).T
    return np.einsum("sx,xij->sij", px, hmm.outputs)


def all_words(n_symbols: int, horizon: int):
    return product(range(n_symbols), repeat=horizon)


def output_fidelity(hmm: QuantumHmm, a: int = 0, b: int = 1) -> float:
    return fidelity(hmm.outputs[a], hmm.outputs[b])


# ---------------------------------------------------------------------------
# JSON description


def hmm_to_dict(hmm: QuantumHmm) -> dict:
    return {
        "name": hmm.name,
        "states": list(hmm.states),
        "alphabet": list(hmm.alphabet),
        "labeled_matrices": {a: hmm.labeled[i].tolist() for i, a in enumerate(hmm.alphabet)},
        "outputs": {a: {"bloch": bloch_vector(hmm.outputs[i]).tolist()} for i, a in enumerate(hmm.alphabet)},
    }


def _output_from_spec(spec) -> np.ndarray:
    if "bloch" in spec:
        return density_from_bloch(spec["bloch"])
    if "theta" in spec:
        theta = float(spec["theta"])
        phi = float(spec.get("phi", 0.0))
        n = [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)]
        return density_from_bloch(n)
    raise ValidationError(f"output needs 'bloch' or 'theta'/'phi', got keys {sorted(spec)}")


def hmm_from_dict(d: dict) -> QuantumHmm:
    """Build a process from its JSON description.

    Named processes are accepted as ``{"name": "perturbed_coin", "p": .., "r": ..}``.
    """
    name = d.get("name", "custom")
    if "labeled_matrices" not in d:
        if name == "perturbed_coin":
            return make_perturbed_coin(d["p"], d["r"])
        if name == "golden_mean_21":
            return make_golden_mean_21(d["p"], d["r"])
        raise ValidationError(f"unknown named process {name!r}")
    alphabet = list(d.get("alphabet", list(d["labeled_matrices"])))
    labeled = [d["labeled_matrices"][a] for a in alphabet]
    outputs = [_output_from_spec(d["outputs"][a]) for a in alphabet]
    return build_hmm(labeled, outputs, alphabet=alphabet, states=d.get("states"), name=name)


def load_hmm(path) -> QuantumHmm:
    return hmm_from_dict(json.loads(Path(path).read_text()))


def save_hmm(hmm: QuantumHmm, path) -> None:
    Path(path).write_text(json.dumps(hmm_to_dict(hmm), indent=2, sort_keys=True) + "\n")
