"""Ideal work extraction tailored to a state ``rho*``.

The protocol first rotates the eigenbasis of ``rho*`` onto the energy
eigenbasis and then drives the qubit quasi-statically through ``M``
partial thermalizations with a bath qubit whose gap follows a linear
population schedule.  Stage two is simulated as the equivalent classical
bit chain: after repetition ``l`` the system is in level ``x_l`` with
``Pr(x_l = 1) = p1[l]`` independently of the past.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .qmath import (
    EIG_FLOOR,
    ValidationError,
    basis_populations,
    check_hermitian,
    eig_hermitian,
    gibbs_state,
    pinch,
    relative_entropy,
)

WORK_MERGE_TOL = 1e-9


def _hamiltonian(h, dim: int) -> np.ndarray:
    if h is None:
        return np.zeros((dim, dim), dtype=complex)
    a = check_hermitian(h, name="hamiltonian")
    if a.shape != (dim, dim):
        raise ValidationError(f"hamiltonian shape {a.shape} does not match dimension {dim}")
    return a


@dataclass(frozen=True)
class WorkTable:
    """Work values ``w[n]`` paired with the eigen-decomposition of ``rho*``.

    ``groups[k]`` lists the eigenvector indices whose work value equals
    ``merged[k]``; ``-inf`` marks eigenvalues below the floor.
    """

    values: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    merged: np.ndarray
    groups: tuple

    def probabilities(self, sigma) -> np.ndarray:
        """Distribution over merged work values for input ``sigma``."""
        pops = np.clip(basis_populations(sigma, self.eigenvectors), 0.0, None)
        return np.array([pops[list(g)].sum() for g in self.groups])


def _merge_values(values: np.ndarray, tol: float = WORK_MERGE_TOL):
    order = np.argsort(-values, kind="stable")
    merged, groups = [], []
    for idx in order:
        v = values[idx]
        if groups and (v == merged[-1] or abs(v - merged[-1]) <= tol):
            groups[-1].append(int(idx))
        else:
            merged.append(v)
            groups.append([int(idx)])
    return np.array(merged), tuple(tuple(g) for g in groups)


def ideal_work_table(rho_star, h=None, beta: float = 1.0) -> WorkTable:
    """Work values ``<l_n|H|l_n> + ln(l_n)/beta - F_eq`` of the tailored protocol."""
    dec = eig_hermitian(rho_star)
    hm = _hamiltonian(h, dec.dim)
    _, f_eq = gibbs_state(hm, beta)
    v = dec.eigenvectors
    energies = np.real(np.einsum("ji,jk,ki->i", v.conj(), hm, v))
    lam = dec.eigenvalues
    with np.errstate(divide="ignore"):
        logs = np.where(lam > EIG_FLOOR, np.log(np.where(lam > EIG_FLOOR, lam, 1.0)), -np.inf)
    values = energies + logs / beta - f_eq
    merged, groups = _merge_values(values)
    return WorkTable(values, lam, v, merged, groups)


def work_outcome_distribution(rho_star, sigma, h=None, beta: float = 1.0):
    """Merged work values and their probabilities when ``sigma`` is fed in."""
    table = ideal_work_table(rho_star, h, beta)
    return table.merged, table.probabilities(sigma)


def expected_work(rho_star, sigma, h=None, beta: float = 1.0) -> float:
    """Mean extracted work; ``-inf`` if a floored eigenvalue of ``rho*`` is hit."""
    w, pr = work_outcome_distribution(rho_star, sigma, h, beta)
    live = pr > EIG_FLOOR
    if np.any(np.isneginf(w[live])):
        return float("-inf")
    return float(np.sum(pr[live] * w[live]))


def expected_work_identity(rho_star, sigma, h=None, beta: float = 1.0) -> float:
    """Same mean written as ``[D(Dsig||g) - D(sig||rho*) + D(sig||Dsig)]/beta``."""
    dec = eig_hermitian(rho_star)
    hm = _hamiltonian(h, dec.dim)
    gamma, _ = gibbs_state(hm, beta)
    dsig = pinch(sigma, dec.eigenvectors)
    d_rho = relative_entropy(sigma, rho_star)
    if np.isinf(d_rho):
        return float("-inf")
    return (relative_entropy(dsig, gamma) - d_rho + relative_entropy(sigma, dsig)) / beta


def nondegenerate_energy_account(sigma, rho_star, h, beta: float = 1.0) -> dict:
    """Split the mean work into the internal-energy change of dephasing and the rest.

    ``net_work = expected_work - delta_U`` equals ``[D(sig||g) - D(sig||rho*)]/beta``.
    """
    dec = eig_hermitian(rho_star)
    hm = _hamiltonian(h, dec.dim)
    dsig = pinch(sigma, dec.eigenvectors)
    delta_u = float(np.real(np.trace(dsig @ hm) - np.trace(np.asarray(sigma) @ hm)))
    ew = expected_work(rho_star, sigma, hm, beta)
    gamma, _ = gibbs_state(hm, beta)
    ref = (relative_entropy(sigma, gamma) - relative_entropy(sigma, rho_star)) / beta
    return {"delta_U": delta_u, "expected_work": ew, "net_work": ew - delta_u, "relative_entropy_form": ref}


# ---------------------------------------------------------------------------
# finite-M realization


@dataclass(frozen=True)
class ProtocolSchedule:
    """Population schedule of the stage-two swaps for a qubit ``rho*``.

    Index ``l = 0..M``; ``p1[0]`` is the smaller eigenvalue of ``rho*`` and
    ``p1[M]`` the excited Gibbs population.  ``nu[l] = ln(p0/p1)/beta``.
    """

    M: int
    beta: float
    lam: np.ndarray
    basis: np.ndarray
    energies: np.ndarray
    stage_one: np.ndarray
    p1: np.ndarray
    nu: np.ndarray
    clamped: int

    @property
    def gap(self) -> float:
        return float(self.energies[1] - self.energies[0])

    def bit_weights(self) -> np.ndarray:
        """Coefficient of ``x_l`` (l = 1..M) in the extracted work."""
        nu = self.nu
        w = np.empty(self.M)
        w[:-1] = -(nu[2:] - nu[1:-1])
        w[-1] = nu[-1] - self.gap
        return w

    def offset(self, i) -> np.ndarray:
        """Work contribution fixed by the initial bit ``i``."""
        i = np.asarray(i)
        return self.stage_one[i] - i * (self.nu[1] - self.gap)

    def conditional_mean(self, i: int) -> float:
        """Exact ``E[dW | initial bit i]`` at this ``M``."""
        return float(self.offset(i) + self.bit_weights() @ self.p1[1:])

    def conditional_variance(self) -> float:
        q = self.p1[1:]
        return float(np.sum(q * (1 - q) * self.bit_weights() ** 2))


def protocol_schedule(rho_star, M: int, beta: float = 1.0, h=None) -> ProtocolSchedule:
    if int(M) < 1:
        raise ValidationError(f"M must be at least 1, got {M!r}")
    M = int(M)
    dec = eig_hermitian(rho_star)
    if dec.dim != 2:
        raise ValidationError("the swap realization is implemented for qubits")
    hm = _hamiltonian(h, 2)
    e = np.sort(np.linalg.eigvalsh(hm))
    v = dec.eigenvectors
    stage_one = np.real(np.einsum("ji,jk,ki->i", v.conj(), hm, v)) - e
    gexc = 1.0 / (1.0 + np.exp(beta * (e[1] - e[0])))
    lam = dec.eigenvalues
    ell = np.arange(M + 1)
    dp = ((1.0 - gexc) - lam[0]) / M
    p1 = lam[1] - ell * dp
    p1[-1] = gexc
    p1c = np.clip(p1, EIG_FLOOR, 1.0 - EIG_FLOOR)
    clamped = int(np.count_nonzero(p1c != p1))
    if clamped:
        warnings.warn(f"{clamped} schedule populations clamped at the eigenvalue floor", RuntimeWarning, stacklevel=2)
    nu = np.log((1.0 - p1c) / p1c) / beta
    nu[-1] = e[1] - e[0]
    return ProtocolSchedule(M, float(beta), lam, v, e, stage_one, p1c, nu, clamped)


@dataclass
class ProtocolRun:
    """One realization: sampled work, initial bit, bit trajectory and final state."""

    sampled_work: float
    initial_bit: int
    trajectory: np.ndarray
    final_system_state: np.ndarray
    seed: object
    M: int
    warnings: int = 0
    notes: dict = field(default_factory=dict)


def _initial_bits(sigma, sched: ProtocolSchedule, n: int, rng: np.random.Generator) -> np.ndarray:
    q1 = float(np.clip(basis_populations(sigma, sched.basis)[1], 0.0, 1.0))
    return (rng.random(n) < q1).astype(np.int64)


def simulate_protocol(sigma, rho_star, M: int, beta: float = 1.0, rng_seed=None, h=None) -> ProtocolRun:
    """Sample one run of the ``M``-step protocol on input ``sigma``."""
    sched = protocol_schedule(rho_star, M, beta, h)
    rng = np.random.default_rng(rng_seed)
    i = int(_initial_bits(sigma, sched, 1, rng)[0])
    bits = (rng.random(sched.M) < sched.p1[1:]).astype(np.int8)
    work = float(sched.offset(i) + bits @ sched.bit_weights())
    final = (sched.basis[:, [0]] @ sched.basis[:, [0]].conj().T) * (1 - sched.p1[-1]) + \
        (sched.basis[:, [1]] @ sched.basis[:, [1]].conj().T) * sched.p1[-1]
    if np.ptp(sched.energies) > 0:
        _, ev = np.linalg.eigh(_hamiltonian(h, 2))
        final = (ev * np.array([1 - sched.p1[-1], sched.p1[-1]])) @ ev.conj().T
    return ProtocolRun(work, i, np.concatenate([[i], bits]), final, rng_seed, sched.M, sched.clamped)


def sample_work(sigma, rho_star, M: int, n_runs: int, rng: np.random.Generator, beta: float = 1.0, h=None,
                chunk_elems: int = 4_000_000):
    """Vectorized Monte Carlo over ``n_runs`` independent realizations.

    Returns ``(initial_bits, sampled_work)``.  Uniforms are drawn in single
    precision, which resolves each bit probability to ``2**-24``.
    """
    sched = protocol_schedule(rho_star, M, beta, h)
    i = _initial_bits(sigma, sched, n_runs, rng)
    w = sched.offset(i).astype(float)
    q = sched.p1[1:].astype(np.float32)
    weights = sched.bit_weights()
    rows = max(1, chunk_elems // sched.M)
    for start in range(0, n_runs, rows):
        stop = min(n_runs, start + rows)
        u = rng.random((stop - start, sched.M), dtype=np.float32)
        w[start:stop] += (u < q) @ weights
    return i, w


def hoeffding_bound(lam0: float, lam1: float, zeta: float, M: int) -> float:
    """``2 exp(-lam1^2 zeta^2 M / (2 lam0 - 1)^2)``, the deviation tail bound."""
    denom = (2.0 * lam0 - 1.0) ** 2
    if denom == 0.0:
        return 0.0
    return float(2.0 * np.exp(-(lam1 ** 2) * zeta ** 2 * M / denom))


@dataclass(frozen=True)
class ProtocolCheck:
    """Monte Carlo summary of the ``M``-step protocol on one ``(sigma, rho*)`` pair.

    ``bias`` is the outcome-weighted mean of ``|mean(W | i) - w_i|`` against
    the ideal work values; ``tails`` maps each ``zeta`` to the empirical
    frequency of ``|W - E[W | i]| >= zeta`` and its Hoeffding bound.
    ``expected`` is the ideal (infinite-``M``) value, ``finite_expected``
    the exact mean of the ``M``-step schedule.
    """

    M: int
    expected: float
    mean: float
    std_error: float
    bias: float
    tails: dict
    finite_expected: float = float("nan")

    @property
    def z(self) -> float:
        return (self.mean - self.expected) / self.std_error if self.std_error > 0 else 0.0

    @property
    def z_finite(self) -> float:
        return (self.mean - self.finite_expected) / self.std_error if self.std_error > 0 else 0.0


def protocol_check(sigma, rho_star, M: int, n_runs: int, rng: np.random.Generator, beta: float = 1.0,
                   zetas=(0.1, 0.3)) -> ProtocolCheck:
    sched = protocol_schedule(rho_star, M, beta)
    table = ideal_work_table(rho_star, None, beta)
    i, w = sample_work(sigma, rho_star, M, n_runs, rng, beta)
    ideal = table.values
    bias = 0.0
    for k in (0, 1):
        sel = i == k
        if sel.any():
            bias += sel.mean() * abs(float(w[sel].mean()) - float(ideal[k]))
    dev = np.abs(w - np.array([sched.conditional_mean(0), sched.conditional_mean(1)])[i])
    tails = {float(z): (float(np.mean(dev >= z / beta)), hoeffding_bound(sched.lam[0], sched.lam[1], z, M))
             for z in zetas}
    q1 = float(np.clip(basis_populations(sigma, sched.basis)[1], 0.0, 1.0))
    finite = (1.0 - q1) * sched.conditional_mean(0) + q1 * sched.conditional_mean(1)
    return ProtocolCheck(int(M), expected_work(rho_star, sigma, None, beta), float(w.mean()),
                         float(w.std(ddof=1) / np.sqrt(n_runs)), bias, tails, finite)


def reward_from_work(work, w0: float, w1: float) -> np.ndarray:
    """Binary reward: 1 iff the sampled work is at least the midpoint of the two ideal values."""
    return (np.asarray(work) >= 0.5 * (w0 + w1)).astype(np.int64)


# ---------------------------------------------------------------------------
# benchmark approaches


def overcommit_state(sigma_x, n_bath: int, h=None, beta: float = 1.0) -> np.ndarray:
    """Finite-bath stand-in for betting everything on the pure state ``sigma_x``.

    The would-be zero eigenvalue is replaced by ``exp(-beta E1) / (N Z)``.
    """
    dec = eig_hermitian(sigma_x)
    hm = _hamiltonian(h, dec.dim)
    e = np.sort(np.linalg.eigvalsh(hm))
    z = np.sum(np.exp(-beta * (e - e[0])))
    low = np.exp(-beta * (e[-1] - e[0])) / (n_bath * z)
    v = dec.eigenvectors
    lam = np.full(dec.dim, low / (dec.dim - 1))
    lam[0] = 1.0 - low
    return (v * lam) @ v.conj().T


def approach_policy(hmm, variant: str, *, n_bath: int | None = None, h=None, beta: float = 1.0):
    """Tailored-state map ``belief -> rho*`` for one of the benchmark approaches."""
    from .belief import expected_state

    if variant == "quantum":
        return lambda eta: expected_state(eta, hmm)[0]
    if variant == "classical":
        comp = np.eye(hmm.dim, dtype=complex)
        return lambda eta: pinch(expected_state(eta, hmm)[0], comp)
    if variant == "memoryless":
        xi0 = expected_state(hmm.stationary, hmm)[0]
        return lambda eta: xi0
    if variant == "overcommitment":
        if n_bath is None:
            raise ValidationError("overcommitment needs a finite bath size n_bath")

        def policy(eta):
            pr = hmm.symbol_probs(eta)
            x = int(np.argmax(pr))
            return overcommit_state(hmm.outputs[x], n_bath, h, beta)

        return policy
    raise ValidationError(f"unknown approach {variant!r}")


@dataclass(frozen=True)
class RateResult:
    """Asymptotic work per step and the structure it was averaged over."""

    rate: float
    class_rates: tuple
    class_weights: tuple
    n_nodes: int
    n_recurrent: int
    truncated: bool


def approach_rates(hmm, variant: str, beta: float = 1.0, *, h=None, n_bath: int | None = None,
                   dedup_tol: float = 1e-12, max_nodes: int = 20000, seed_eps: float = 1e-3) -> RateResult:
    """Long-run work per step of a benchmark approach.

    The belief dynamics induced by the approach is expanded into a graph and
    the per-node mean work is averaged over the stationary measure of each
    closed class reached from the start.
    """
    from .belief import build_msp, expected_state

    if variant == "memoryless":
        xi0 = expected_state(hmm.stationary, hmm)[0]
        rate = expected_work(xi0, xi0, h, beta)
        return RateResult(rate, (rate,), (1.0,), 1, 1, False)
    policy = approach_policy(hmm, variant, n_bath=n_bath, h=h, beta=beta)
    graph = build_msp(hmm, policy, dedup_tol=dedup_tol, max_nodes=max_nodes, h=h, beta=beta, seed_eps=seed_eps)
    return graph.rate()
