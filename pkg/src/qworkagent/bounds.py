"""Reference quantities for the tailoring policies.

* ``free_energy_rate_lower``: a lower bound on the non-equilibrium free
  energy rate.  The past ``n`` emissions are measured with the Helstrom
  measurement that best tells apart the two final latent states; the
  conditional entropy of the next emission given the outcome upper-bounds
  the entropy rate.
* ``causal_dissipation``: the entropy an adaptive sequence of projective
  measurements adds beyond the joint entropy of a multi-time state.
* ``hierarchy_check``: bound, backward-induction rate and local-optimizer
  rate side by side.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .processes import (
    MAX_JOINT_DIM,
    QuantumHmm,
    ResourceError,
    latent_blocks,
    next_output_given_latent,
)
from .qmath import (
    EIG_FLOOR,
    ValidationError,
    bloch_basis,
    bloch_vector,
    check_hermitian,
    von_neumann_entropy,
)
from .extraction import expected_work, ideal_work_table

PURE_HORIZON = 10_000


# ---------------------------------------------------------------------------
# Helstrom measurement


@dataclass(frozen=True)
class HelstromPovm:
    """Two-outcome projective measurement; ``success`` is the guessing probability."""

    M0: np.ndarray
    M1: np.ndarray
    success: float

    @property
    def error(self) -> float:
        return 1.0 - self.success


def helstrom(rho0, rho1, p0: float, p1: float) -> HelstromPovm:
    """Minimum-error measurement between ``p0 rho0`` and ``p1 rho1``.

    ``M0`` projects onto the non-negative eigenspace of ``p0 rho0 - p1 rho1``
    (zero eigenvalues go to ``M0``), ``M1`` onto the rest.
    """
    if abs(p0 + p1 - 1.0) > 1e-10 or p0 < 0 or p1 < 0:
        raise ValidationError(f"priors must be a probability pair, got {p0}, {p1}")
    gap = check_hermitian(p0 * np.asarray(rho0, dtype=complex) - p1 * np.asarray(rho1, dtype=complex), tol=1e-9)
    return _helstrom_from_gap(gap, p0)


def _helstrom_from_gap(gap: np.ndarray, p0: float) -> HelstromPovm:
    vals, vecs = np.linalg.eigh(0.5 * (gap + gap.conj().T))
    pos = vals >= -EIG_FLOOR
    m0 = (vecs[:, pos] * 1.0) @ vecs[:, pos].conj().T
    m1 = np.eye(gap.shape[0]) - m0
    # P(success) = p1 + tr(M0 (p0 rho0 - p1 rho1)) = (1 + ||gap||_1) / 2 when p0+p1 = 1
    success = float(0.5 * (1.0 + np.abs(vals).sum()))
    return HelstromPovm(m0, m1, success)


# ---------------------------------------------------------------------------
# entropy-rate bound


@dataclass(frozen=True)
class HelstromEnsemble:
    """Post-measurement ensemble ``{p_y, chi_y}`` of the next emission."""

    n: int
    probs: np.ndarray
    chis: np.ndarray
    povm: HelstromPovm | None

    @property
    def conditional_entropy(self) -> float:
        return float(sum(p * von_neumann_entropy(c) for p, c in zip(self.probs, self.chis) if p > 0))


def _require_two_latents(hmm: QuantumHmm) -> None:
    if hmm.n_states != 2:
        raise ValidationError("the Helstrom bound distinguishes exactly two latent states")


def helstrom_ensemble(hmm: QuantumHmm, n: int, max_dim: int = MAX_JOINT_DIM) -> HelstromEnsemble:
    """Measure the last ``n`` emissions and condition the next one on the outcome."""
    _require_two_latents(hmm)
    blocks = latent_blocks(hmm, n, max_dim)
    xi = next_output_given_latent(hmm)
    povm = _helstrom_from_gap(blocks[0] - blocks[1], float(hmm.stationary[0]))
    # weight[y, s] = pi(s) tr(M_y tau^(s)), the blocks already carry pi(s)
    weight = np.array([[np.sum(m.T * b).real for b in blocks] for m in (povm.M0, povm.M1)])
    weight = np.clip(weight, 0.0, None)
    probs = weight.sum(axis=1)
    chis = np.array([
        np.einsum("s,sij->ij", w / p, xi) if p > 0 else np.eye(hmm.dim) / hmm.dim
        for w, p in zip(weight, probs)
    ])
    return HelstromEnsemble(n, probs, chis, povm)


def _pure_coin_ensemble(hmm: QuantumHmm, n: int) -> HelstromEnsemble | None:
    """Closed form for a coin that never or always flips with pure outputs.

    Each latent state then has a single pure history, so the Helstrom error
    is ``(1 - sqrt(1 - F**n)) / 2`` for the per-slot fidelity ``F``.
    """
    if hmm.name != "perturbed_coin" or hmm.notes.get("p") not in (0.0, 1.0):
        return None
    r = float(hmm.notes["r"])
    err = 0.5 * (1.0 - np.sqrt(max(0.0, 1.0 - r ** n)))
    xi = next_output_given_latent(hmm)
    chis = np.array([(1.0 - err) * xi[0] + err * xi[1], err * xi[0] + (1.0 - err) * xi[1]])
    return HelstromEnsemble(n, np.array([0.5, 0.5]), chis, None)


def exact_conditional_entropy(hmm: QuantumHmm, n: int, max_dim: int = MAX_JOINT_DIM) -> float:
    """``S(A|B)`` of the next emission ``A`` given the previous ``n`` emissions ``B``."""
    _require_two_latents(hmm)
    blocks = latent_blocks(hmm, n, max_dim // hmm.dim)
    xi = next_output_given_latent(hmm)
    rho_ba = sum(np.kron(b, x) for b, x in zip(blocks, xi))
    rho_b = sum(blocks)
    return von_neumann_entropy(rho_ba) - von_neumann_entropy(rho_b)


@dataclass(frozen=True)
class RateBound:
    value: float
    n: int
    per_n: dict = field(default_factory=dict)


def free_energy_rate_lower(hmm: QuantumHmm, n: int = 12, beta: float = 1.0, *, scan: bool = True,
                           max_dim: int = MAX_JOINT_DIM, pure_horizon: int = PURE_HORIZON) -> RateBound:
    """Lower bound ``(ln d - sum_y p_y S(chi_y)) / beta`` on the free-energy rate.

    A degenerate Hamiltonian is assumed, so the bound does not depend on
    the energy scale.  Every history length gives a valid bound; with
    ``scan`` the best over ``1..n`` is returned.  Coins with ``p`` in {0, 1}
    use a closed form at ``pure_horizon`` slots.
    """
    if n < 1:
        raise ValidationError("history length must be at least 1")
    if hmm.dim ** n > max_dim:
        raise ResourceError(f"history of {n} slots exceeds the dimension guard {max_dim}")
    ln_d = np.log(hmm.dim)
    pure = _pure_coin_ensemble(hmm, pure_horizon)
    if pure is not None:
        v = (ln_d - pure.conditional_entropy) / beta
        return RateBound(float(v), pure_horizon, {pure_horizon: float(v)})
    lengths = range(1, n + 1) if scan else [n]
    per_n = {k: float((ln_d - helstrom_ensemble(hmm, k, max_dim).conditional_entropy) / beta) for k in lengths}
    best = max(per_n, key=lambda k: (per_n[k], -k))
    return RateBound(per_n[best], best, per_n)


# ---------------------------------------------------------------------------
# causal dissipation


def _plane_dirs(resolution: int, plane) -> np.ndarray:
    """Bloch axes ``cos(t) e1 + sin(t) e2`` for ``t = k pi / resolution``."""
    e1, e2 = (np.asarray(v, dtype=float) for v in plane)
    t = np.arange(resolution) * np.pi / resolution
    return np.cos(t)[:, None] * e1 + np.sin(t)[:, None] * e2


XZ_PLANE = (np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))


def _first_slot(rho: np.ndarray) -> np.ndarray:
    d = rho.shape[0] // 2
    r = rho.reshape(2, d, 2, d)
    return np.einsum("iaja->ij", r)


def _measure_first(rho: np.ndarray, kets: np.ndarray):
    """Outcome probabilities and normalized conditional states of the remaining slots.

    ``kets`` has shape (A, 2, 2): per candidate, the two basis kets as rows.
    """
    d = rho.shape[0] // 2
    r = rho.reshape(2, d, 2, d)
    un = np.einsum("aoi,ixjy,aoj->aoxy", kets.conj(), r, kets)
    probs = np.clip(np.einsum("aoxx->ao", un).real, 0.0, None)
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = np.where(probs[..., None, None] > 0, un / probs[..., None, None], 0.0)
    return probs, cond


def _kets(dirs: np.ndarray) -> np.ndarray:
    return np.array([bloch_basis(n).T for n in dirs])


def _batch_entropy(states: np.ndarray) -> np.ndarray:
    vals = np.linalg.eigvalsh(states)
    vals = np.where(vals > EIG_FLOOR, vals, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.sum(np.where(vals > 0, vals * np.log(vals), 0.0), axis=-1)


def _binary_h(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.sum(np.where(probs > 0, probs * np.log(probs), 0.0), axis=-1)


@dataclass
class CausalResult:
    """Minimal adaptive measurement cost and the plan achieving it.

    ``plan`` maps an outcome history (tuple of 0/1) to the Bloch axis of the
    next measured slot.  ``coarse_delta`` is the value on a grid half as
    fine; ``flagged`` marks a change larger than 1e-3 between the two.
    """

    delta: float
    cost: float
    entropy: float
    plan: dict
    coarse_delta: float | None = None
    flagged: bool = False


class _CausalSearch:
    def __init__(self, resolution: int, plane):
        self.grid = _plane_dirs(resolution, plane)

    def candidates(self, rho: np.ndarray) -> np.ndarray:
        b = bloch_vector(_first_slot(rho))
        norm = np.linalg.norm(b)
        if norm > 1e-12:
            return np.vstack([self.grid, b / norm])
        return self.grid

    def cost(self, rho: np.ndarray, k: int, history: tuple, plan: dict | None) -> float:
        if k == 1:
            return von_neumann_entropy(rho)
        dirs = self.candidates(rho)
        probs, cond = _measure_first(rho, _kets(dirs))
        h = _binary_h(probs)
        if k == 2:
            rest = _batch_entropy(cond)
            total = h + np.sum(probs * rest, axis=1)
        else:
            total = h.copy()
            for a in range(dirs.shape[0]):
                for o in range(2):
                    if probs[a, o] > 0:
                        total[a] += probs[a, o] * self.cost(cond[a, o], k - 1, history, None)
        best = int(np.argmin(total))
        if plan is not None:
            plan[history] = dirs[best]
            if k > 2:
                for o in range(2):
                    if probs[best, o] > 0:
                        self.cost(cond[best, o], k - 1, history + (o,), plan)
        return float(total[best])


def _check_slots(state, T: int | None) -> tuple[np.ndarray, int]:
    rho = check_hermitian(np.asarray(state, dtype=complex), tol=1e-9)
    k = int(round(np.log2(rho.shape[0])))
    if 2 ** k != rho.shape[0]:
        raise ValidationError("state must live on qubit slots")
    if T is not None and T != k:
        raise ValidationError(f"state has {k} slots, T={T} given")
    if k > 4:
        raise ResourceError("causal dissipation is limited to T <= 4 slots")
    return rho, k


def causal_cost(state, theta_grid_resolution: int = 64, plane=XZ_PLANE, plan: dict | None = None) -> float:
    """Minimal measured-record entropy plus final conditional entropy, in nats."""
    rho, k = _check_slots(state, None)
    return _CausalSearch(theta_grid_resolution, plane).cost(rho, k, (), plan)


def causal_dissipation(state, theta_grid_resolution: int = 64, T: int | None = None, plane=XZ_PLANE,
                       check_refinement: bool = True) -> CausalResult:
    """``delta = min over adaptive plans of [record entropy + final entropy] - S(state)``.

    The first ``T - 1`` slots are measured in order, each along an axis
    chosen from the in-plane grid (plus the slot's own eigenbasis) given the
    earlier outcomes.  Restricting to these plans makes ``delta`` an upper
    estimate of the unrestricted minimum.
    """
    rho, k = _check_slots(state, T)
    plan: dict = {}
    cost = causal_cost(rho, theta_grid_resolution, plane, plan)
    s = von_neumann_entropy(rho)
    res = CausalResult(max(cost - s, 0.0), cost, s, plan)
    if check_refinement and theta_grid_resolution >= 2 and theta_grid_resolution % 2 == 0:
        coarse = causal_cost(rho, theta_grid_resolution // 2, plane) - s
        res.coarse_delta = max(coarse, 0.0)
        res.flagged = abs(res.coarse_delta - res.delta) > 1e-3
    return res


def reverse_slots(state) -> np.ndarray:
    """Same multi-time state with the slot order reversed."""
    rho, k = _check_slots(state, None)
    perm = list(range(k))[::-1]
    t = rho.reshape([2] * (2 * k)).transpose(perm + [k + p for p in perm])
    return t.reshape(2 ** k, 2 ** k)


def finite_tofe(state, theta_grid_resolution: int = 64, plane=XZ_PLANE, h=None, beta: float = 1.0) -> float:
    """Best expected work from a multi-time state with classically adaptive tailoring.

    Built from ideal-protocol work tables: each slot but the last is
    extracted with a protocol tailored to its conditional state dephased
    along a candidate axis; the work value observed (outcomes with equal
    work are indistinguishable) updates the conditional state of the rest.
    The last slot uses the protocol tailored to its conditional state.
    """
    rho, k = _check_slots(state, None)
    search = _CausalSearch(theta_grid_resolution, plane)

    def value(r: np.ndarray, n: int) -> float:
        xi = _first_slot(r) if n > 1 else r
        if n == 1:
            return expected_work(xi, xi, h, beta)
        best = -np.inf
        for axis in search.candidates(r):
            basis = bloch_basis(axis)
            pops = np.clip(np.einsum("io,ij,jo->o", basis.conj(), xi, basis).real, 0.0, None)
            table = ideal_work_table((basis * pops) @ basis.conj().T, h, beta)
            kets = basis.T[None]
            probs, cond = _measure_first(r, kets)
            total = 0.0
            for group in table.groups:
                p = float(sum(probs[0, o] for o in group))
                if p <= 0:
                    continue
                w = table.values[group[0]]
                if not np.isfinite(w):
                    continue
                rest = sum(probs[0, o] * cond[0, o] for o in group) / p
                total += p * (w + value(rest, n - 1))
            best = max(best, total)
        return best

    return float(value(rho, k))


# ---------------------------------------------------------------------------
# hierarchy


@dataclass(frozen=True)
class HierarchyResult:
    f_lower: float
    f_to: float
    w_lo: float
    tol: float
    unstable_beliefs: int = 0

    @property
    def to_above_lo(self) -> bool:
        return self.f_to >= self.w_lo - self.tol

    @property
    def lower_above_to(self) -> bool:
        return self.f_lower >= self.f_to - self.tol

    @property
    def ordering_ok(self) -> bool:
        return self.to_above_lo and self.lower_above_to

    def as_dict(self) -> dict:
        return {"f_lower": self.f_lower, "f_TO": self.f_to, "w_LO": self.w_lo, "ordering_ok": self.ordering_ok}


DEFAULT_GRIDS = {"n_beliefs": 201, "n_actions": 360, "T": 30, "n_history": 8, "lo_dedup": 1e-9,
                 "lo_max_nodes": 4000}


def hierarchy_check(hmm: QuantumHmm, beta: float = 1.0, grids: dict | None = None, tol: float = 5e-3) -> HierarchyResult:
    """Bound, backward-induction rate and local-optimizer rate for one process."""
    from .policy import asymptotic_rate, lo_action, tofe_rate

    g = {**DEFAULT_GRIDS, **(grids or {})}
    f_lower = free_energy_rate_lower(hmm, int(g["n_history"]), beta).value
    to = tofe_rate(hmm, n_beliefs=int(g["n_beliefs"]), n_actions=int(g["n_actions"]), T=int(g["T"]), beta=beta)
    w_lo = asymptotic_rate(hmm, lambda eta: lo_action(eta, hmm), beta, dedup_tol=float(g["lo_dedup"]),
                           max_nodes=int(g["lo_max_nodes"])).rate
    return HierarchyResult(float(f_lower), float(to.rate), float(w_lo), tol, to.unstable_beliefs)
