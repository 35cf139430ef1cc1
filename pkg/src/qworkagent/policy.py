"""Choosing the tailored state: local optimizer and backward induction.

Actions are measurement axes ``n(theta) = cos(theta) e1 + sin(theta) e2`` in
the plane spanned by the first two output Bloch vectors.  For a belief with
expected state ``xi`` the protocol is tailored to ``xi`` dephased along
``n``, which is the best spectrum on that basis.  The reward is the work
this yields, ``[D(xi||gamma) - D(xi||rho_theta)]/beta``.

The backward induction works on a fixed grid of beliefs.  Successor
beliefs are snapped to the nearest grid point in L1; snaps farther than the
grid spacing are counted.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator

from .belief import (
    DEFAULT_SEED_EPS,
    SIMPLEX_TOL,
    _absorption_probs,
    as_belief,
    build_msp,
    chain_rate,
    class_stationary,
    closed_classes_of,
    expected_state,
    seeded_belief,
)
from .extraction import RateResult, _hamiltonian
from .processes import QuantumHmm
from .qmath import (
    ValidationError,
    binary_entropy,
    bloch_basis,
    bloch_vector,
    check_orthonormal,
    gibbs_state,
    basis_populations,
    relative_entropy,
)

WORK_MERGE_TOL = 1e-9
TWO_PI = 2.0 * np.pi


class NonStationaryPolicyError(RuntimeError):
    """Mid-horizon rows of a policy table disagree; a longer horizon is needed."""


# ---------------------------------------------------------------------------
# geometry


def action_plane(hmm: QuantumHmm):
    """Orthonormal ``(e1, e2)`` spanning the first two output Bloch vectors.

    ``e1`` points along the first output.  Collinear outputs fall back to
    the plane containing ``e1`` and the x axis (the z axis when ``e1`` is x).
    """
    b = hmm.output_bloch()
    b0 = b[0]
    e1 = b0 / np.linalg.norm(b0) if np.linalg.norm(b0) > 1e-12 else np.array([0.0, 0.0, 1.0])
    cand = b[1] - (b[1] @ e1) * e1 if len(b) > 1 else np.zeros(3)
    if np.linalg.norm(cand) < 1e-12:
        for ax in (np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])):
            cand = ax - (ax @ e1) * e1
            if np.linalg.norm(cand) > 1e-6:
                break
    e2 = cand / np.linalg.norm(cand)
    return e1, e2


def action_direction(theta, plane) -> np.ndarray:
    e1, e2 = plane
    t = np.asarray(theta, dtype=float)[..., None]
    return np.cos(t) * e1 + np.sin(t) * e2


def theta_basis(theta: float, plane) -> np.ndarray:
    """Orthonormal qubit basis whose first vector points along ``n(theta)``."""
    return bloch_basis(action_direction(theta, plane))


def lo_angle(eta, hmm: QuantumHmm, plane=None) -> float:
    """Angle of the expected state's Bloch vector in the action plane."""
    plane = action_plane(hmm) if plane is None else plane
    b = bloch_vector(expected_state(eta, hmm)[0])
    return float(np.mod(np.arctan2(b @ plane[1], b @ plane[0]), TWO_PI))


def lo_action(eta, hmm: QuantumHmm) -> np.ndarray:
    """Local optimizer: tailor to the expected state itself."""
    return expected_state(eta, hmm)[0]


def optimal_eigenvalues(basis, xi) -> np.ndarray:
    """Best spectrum on a fixed basis: ``sum_i <b_i|xi|b_i> |b_i><b_i|``."""
    b = check_orthonormal(basis)
    lam = np.clip(basis_populations(xi, b), 0.0, None)
    return (b * lam) @ b.conj().T


def tailored_for_theta(eta, theta: float, hmm: QuantumHmm, plane=None) -> np.ndarray:
    plane = action_plane(hmm) if plane is None else plane
    return optimal_eigenvalues(theta_basis(theta, plane), expected_state(eta, hmm)[0])


def reward(eta, theta: float, hmm: QuantumHmm, beta: float = 1.0, h=None, plane=None) -> float:
    """``[D(xi||gamma) - D(xi||rho_theta)]/beta`` for belief ``eta`` and action ``theta``."""
    xi = expected_state(eta, hmm)[0]
    rho = tailored_for_theta(eta, theta, hmm, plane)
    gamma, _ = gibbs_state(_hamiltonian(h, hmm.dim), beta)
    return (relative_entropy(xi, gamma) - relative_entropy(xi, rho)) / beta


# ---------------------------------------------------------------------------
# grids and tables


def coin_belief_grid(n: int = 201) -> np.ndarray:
    """Beliefs ``(1/2 + eps, 1/2 - eps)`` with ``eps`` uniform on ``[-1/2, 1/2]``."""
    eps = np.linspace(-0.5, 0.5, n)
    return np.column_stack([0.5 + eps, 0.5 - eps])


def uniform_action_grid(n: int = 360) -> np.ndarray:
    return np.arange(n) * (TWO_PI / n)


def _hamiltonian_bloch(h, beta: float):
    hm = _hamiltonian(h, 2)
    a = float(np.real(np.trace(hm))) / 2.0
    hv = np.array([np.real(hm[0, 1]), -np.imag(hm[0, 1]), np.real(hm[0, 0] - hm[1, 1]) / 2.0])
    _, f_eq = gibbs_state(hm, beta)
    return a, hv, f_eq


@dataclass
class StepTables:
    """Rewards, outcome probabilities and snapped successors per (belief, action)."""

    thetas: np.ndarray
    lo_index: np.ndarray
    rewards: np.ndarray
    probs: np.ndarray
    succ: np.ndarray
    snap_dist: np.ndarray
    spacing: float

    @property
    def snap_warnings(self) -> int:
        return int(np.count_nonzero((self.snap_dist > self.spacing) & (self.probs > 0)))


def _snap(points: np.ndarray, grid: np.ndarray):
    """Nearest grid index (L1) and distance for each row of ``points``."""
    flat = points.reshape(-1, points.shape[-1])
    dist, idx = cKDTree(grid).query(flat, p=1)
    return idx.reshape(points.shape[:-1]), dist.reshape(points.shape[:-1])


def step_tables(hmm: QuantumHmm, belief_grid, action_grid, beta: float = 1.0, h=None, plane=None) -> StepTables:
    """Vectorized one-step quantities for every grid belief and action."""
    if hmm.dim != 2:
        raise ValidationError("the dynamic program is implemented for qubit outputs")
    grid = np.array([as_belief(b, hmm.n_states) for b in np.atleast_2d(belief_grid)])
    plane = action_plane(hmm) if plane is None else plane
    base = np.sort(np.mod(np.asarray(action_grid, dtype=float), TWO_PI))
    sb = hmm.output_bloch()
    priors = np.einsum("bs,xst->bx", grid, hmm.labeled)
    xi_b = priors @ sb
    lo = np.mod(np.arctan2(xi_b @ plane[1], xi_b @ plane[0]), TWO_PI)
    thetas = np.sort(np.concatenate([np.broadcast_to(base, (grid.shape[0], base.shape[0])), lo[:, None]], axis=1),
                     axis=1, kind="stable")
    lo_index = np.array([int(np.flatnonzero(row == t)[0]) for row, t in zip(thetas, lo)])
    n = action_direction(thetas, plane)
    proj = np.einsum("bak,bk->ba", n, xi_b)
    lam_p = np.clip(0.5 * (1.0 + proj), 0.0, 1.0)
    lam_m = np.clip(0.5 * (1.0 - proj), 0.0, 1.0)
    a, hv, f_eq = _hamiltonian_bloch(h, beta)
    log_z = -beta * f_eq
    tr_xi_h = a + xi_b @ hv
    rewards = (log_z + beta * tr_xi_h[:, None] - binary_entropy(lam_p)) / beta
    # work values of the two outcomes, to detect merged observations
    e_p = a + n @ hv
    e_m = a - n @ hv
    with np.errstate(divide="ignore"):
        w_p = e_p + np.log(lam_p) / beta - f_eq
        w_m = e_m + np.log(lam_m) / beta - f_eq
    merged = np.isclose(w_p, w_m, rtol=0.0, atol=WORK_MERGE_TOL) | (np.isinf(w_p) & np.isinf(w_m))
    like_p = 0.5 * (1.0 + np.einsum("bak,xk->bax", n, sb))
    row = np.einsum("bs,xst->bxt", grid, hmm.labeled)
    post_p = np.einsum("bax,bxt->bat", like_p, row)
    post_m = np.einsum("bax,bxt->bat", 1.0 - like_p, row)
    prior_next = row.sum(axis=1)
    z_p = post_p.sum(axis=2, keepdims=True)
    z_m = post_m.sum(axis=2, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        post_p = np.where(z_p > 0, post_p / z_p, prior_next[:, None, :])
        post_m = np.where(z_m > 0, post_m / z_m, prior_next[:, None, :])
    pr_p = np.where(merged, 1.0, lam_p)
    pr_m = np.where(merged, 0.0, lam_m)
    post_p = np.where(merged[..., None], prior_next[:, None, :], post_p)
    post_m = np.where(merged[..., None], prior_next[:, None, :], post_m)
    s_p, d_p = _snap(post_p, grid)
    s_m, d_m = _snap(post_m, grid)
    if grid.shape[0] > 1:
        dd = np.abs(grid[:, None, :] - grid[None, :, :]).sum(axis=2)
        dd[dd == 0] = np.inf
        spacing = float(dd.min(axis=1).max())
    else:
        spacing = np.inf
    return StepTables(
        thetas=thetas,
        lo_index=lo_index,
        rewards=rewards,
        probs=np.stack([pr_p, pr_m], axis=-1),
        succ=np.stack([s_p, s_m], axis=-1),
        snap_dist=np.stack([d_p, d_m], axis=-1),
        spacing=spacing,
    )


@dataclass
class PolicyTable:
    """Backward-induction result on a belief grid.

    ``actions[t-1, b]`` indexes ``thetas[b]`` for step ``t = 1..T``;
    ``values[t-1, b]`` is ``V_t`` and ``values[T] = 0``.
    """

    horizon: int
    belief_grid: np.ndarray
    thetas: np.ndarray
    lo_index: np.ndarray
    actions: np.ndarray
    values: np.ndarray
    snap_warnings: int
    beta: float = 1.0
    meta: dict = field(default_factory=dict)

    def action_theta(self, t: int) -> np.ndarray:
        return self.thetas[np.arange(self.thetas.shape[0]), self.actions[t - 1]]

    def is_lo(self, t: int) -> np.ndarray:
        return self.actions[t - 1] == self.lo_index

    def unstable_beliefs(self, t_lo: int = 5, margin: int = 5) -> int:
        """Number of grid beliefs whose action changes within ``t in [t_lo, T - margin]``."""
        t_hi = self.horizon - margin
        if t_hi < t_lo:
            raise NonStationaryPolicyError(f"horizon {self.horizon} too short for a stationary window")
        rows = self.actions[t_lo - 1:t_hi]
        return int(np.count_nonzero(np.any(rows != rows[0], axis=0)))

    def stationary_row(self, t_lo: int = 5, margin: int = 5, strict: bool = True) -> np.ndarray:
        """Action row at ``t_lo``, checked to persist through ``T - margin``.

        With ``strict=False`` the row at ``t_lo`` (the longest remaining
        horizon in the window) is returned even if later rows differ.
        """
        bad = self.unstable_beliefs(t_lo, margin)
        if bad and strict:
            raise NonStationaryPolicyError(
                f"actions differ across t in [{t_lo}, {self.horizon - margin}] at {bad} beliefs; "
                "try a larger horizon")
        return self.actions[t_lo - 1].copy()

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t", "belief_index", "epsilon", "theta", "value"])
        for t in range(1, self.horizon + 1):
            th = self.action_theta(t)
            for b, eta in enumerate(self.belief_grid):
                eps = eta[0] - 0.5
                wr.writerow([t, b, repr(float(eps)), repr(float(th[b])), repr(float(self.values[t - 1, b]))])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({
            "horizon": self.horizon,
            "beliefs": self.belief_grid.tolist(),
            "theta": [self.action_theta(t).tolist() for t in range(1, self.horizon + 1)],
            "values": self.values.tolist(),
            "snap_warnings": self.snap_warnings,
        }, sort_keys=True)


TIE_TOL = 1e-12


def backward_induction(tables: StepTables, T: int, tie_tol: float = TIE_TOL):
    """Plain finite-horizon recursion on precomputed tables.

    ``V_t`` is the exact maximum of ``J_t``.  The recorded action is the
    smallest angle whose ``J_t`` is within ``tie_tol`` of it, so that axes
    differing only by rounding (``theta`` and ``theta + pi`` measure the same
    basis) do not flip between steps.
    """
    if T < 1:
        raise ValidationError("horizon must be at least 1")
    nb = tables.rewards.shape[0]
    values = np.zeros((T + 1, nb))
    actions = np.zeros((T, nb), dtype=np.int64)
    p0, p1 = tables.probs[..., 0], tables.probs[..., 1]
    s0, s1 = tables.succ[..., 0], tables.succ[..., 1]
    for t in range(T, 0, -1):
        v = values[t]
        j = tables.rewards + (p0 * v[s0] + p1 * v[s1])
        best = j.max(axis=1)
        actions[t - 1] = np.argmax(j >= (best - tie_tol * (1.0 + np.abs(best)))[:, None], axis=1)
        values[t - 1] = best
    return actions, values


def dp_backward(hmm: QuantumHmm, belief_grid=None, action_grid=None, T: int = 30, beta: float = 1.0,
                h=None) -> PolicyTable:
    """Finite-horizon optimal tailoring policy on a belief grid."""
    grid = coin_belief_grid() if belief_grid is None else np.atleast_2d(np.asarray(belief_grid, dtype=float))
    acts = uniform_action_grid() if action_grid is None else np.asarray(action_grid, dtype=float)
    if grid.size == 0 or acts.size == 0:
        raise ValidationError("belief and action grids must be nonempty")
    tables = step_tables(hmm, grid, acts, beta, h)
    actions, values = backward_induction(tables, int(T))
    d_pi = np.abs(grid - hmm.stationary).sum(axis=1)
    start = int(np.argmin(d_pi))
    # the stationary belief can be a fixed point of every action (degenerate expected state),
    # so rates are evaluated from its neighbour toward the seeded belief, as for the local optimizer
    d_seed = np.abs(grid - seeded_belief(hmm, DEFAULT_SEED_EPS)).sum(axis=1)
    if grid.shape[0] > 1:
        d_seed[d_pi <= SIMPLEX_TOL] = np.inf
    return PolicyTable(int(T), grid, tables.thetas, tables.lo_index, actions, values, tables.snap_warnings, beta,
                       {"tables": tables, "start": start, "seed_start": int(np.argmin(d_seed))})


# ---------------------------------------------------------------------------
# stationary policies and rates


def grid_policy(hmm: QuantumHmm, table: PolicyTable, row: np.ndarray | None = None, plane=None):
    """Belief -> tailored state from one row of a policy table.

    Beliefs take the action of their nearest grid point; where that action
    is the grid point's local-optimizer angle, the exact local optimizer of
    the actual belief is used instead.
    """
    row = table.stationary_row() if row is None else np.asarray(row)
    plane = action_plane(hmm) if plane is None else plane
    grid = table.belief_grid
    thetas = table.thetas[np.arange(grid.shape[0]), row]
    is_lo = row == table.lo_index

    def policy(eta):
        b = int(np.argmin(np.abs(grid - eta).sum(axis=1)))
        if is_lo[b]:
            return lo_action(eta, hmm)
        return tailored_for_theta(eta, thetas[b], hmm, plane)

    return policy


@dataclass(frozen=True)
class InducedChain:
    transition: np.ndarray
    beliefs: np.ndarray
    stationary: np.ndarray
    classes: tuple


def induced_chain(hmm: QuantumHmm, policy, graph=None, *, dedup_tol: float = 1e-12, max_nodes: int = 20000,
                  h=None, beta: float = 1.0) -> InducedChain:
    """Markov chain on the recurrent beliefs of ``policy``.

    ``stationary`` is the limit distribution over ``beliefs`` (the union of
    closed classes, each weighted by its absorption probability).
    """
    g = build_msp(hmm, policy, dedup_tol=dedup_tol, max_nodes=max_nodes, h=h, beta=beta) if graph is None else graph
    t = g.transition_matrix()
    classes = g.closed_classes()
    weights = _absorption_probs(t, classes)
    members = np.concatenate(classes)
    pi = np.concatenate([w * class_stationary(t, m) for m, w in zip(classes, weights)])
    sub = t[members][:, members].toarray()
    bounds = np.cumsum([0] + [len(c) for c in classes])
    return InducedChain(sub, g.nodes[members], pi / pi.sum(),
                        tuple(np.arange(a, b) for a, b in zip(bounds[:-1], bounds[1:])))


def asymptotic_rate(hmm: QuantumHmm, policy, beta: float = 1.0, *, h=None, dedup_tol: float = 1e-12,
                    max_nodes: int = 20000) -> RateResult:
    """Long-run work per step of a stationary tailoring policy."""
    return build_msp(hmm, policy, dedup_tol=dedup_tol, max_nodes=max_nodes, h=h, beta=beta).rate()


def lo_rate(hmm: QuantumHmm, beta: float = 1.0, *, h=None, dedup_tol: float = 1e-12) -> float:
    return asymptotic_rate(hmm, lambda eta: lo_action(eta, hmm), beta, h=h, dedup_tol=dedup_tol).rate


def grid_chain_rate(table: PolicyTable, row: np.ndarray | None = None, start=None) -> RateResult:
    """Long-run rate of one action row on the snapped grid chain.

    This is the dynamic program's own model: beliefs move between grid
    points exactly as in the backward induction.  ``start`` defaults to the
    grid point next to the stationary distribution in the direction of the
    seeded belief.
    """
    tables: StepTables = table.meta["tables"]
    row = table.stationary_row() if row is None else np.asarray(row)
    nb = table.belief_grid.shape[0]
    b = np.arange(nb)
    pr = tables.probs[b, row]
    succ = tables.succ[b, row]
    t = csr_matrix((pr.ravel(), (np.repeat(b, 2), succ.ravel())), shape=(nb, nb))
    rew = tables.rewards[b, row]
    if start is None:
        start = int(table.meta.get("seed_start", table.meta.get("start", 0)))
    total, rates, weights = chain_rate(t, rew, start=int(start))
    return RateResult(total, rates, weights, nb, int(sum(len(c) for c in closed_classes_of(t))), False)


@dataclass(frozen=True)
class TofeResult:
    rate: float
    value_increment: float
    table: PolicyTable
    rate_detail: RateResult
    unstable_beliefs: int


def tofe_rate(hmm: QuantumHmm, *, n_beliefs: int = 201, n_actions: int = 360, T: int = 30, beta: float = 1.0,
              h=None, method: str = "grid", dedup_tol: float = 1e-9, max_nodes: int = 20000, belief_grid=None,
              strict: bool = False) -> TofeResult:
    """Asymptotic rate of the backward-induction policy's stationary phase.

    The action row at ``t = 5`` is evaluated either on the snapped grid
    chain (``method="grid"``) or as a policy on exact beliefs through the
    induced belief graph (``method="exact"``, which can grow large when the
    policy is discontinuous).  ``value_increment`` is ``V_t - V_{t+1}`` at
    the stationary belief halfway through the horizon.  ``unstable_beliefs``
    counts grid beliefs whose action still changes for ``t in [5, T-5]``;
    ``strict`` turns that into an error.
    """
    grid = coin_belief_grid(n_beliefs) if belief_grid is None else belief_grid
    table = dp_backward(hmm, grid, uniform_action_grid(n_actions), T, beta, h)
    row = table.stationary_row(strict=strict)
    if method == "grid":
        detail = grid_chain_rate(table, row)
    elif method == "exact":
        detail = asymptotic_rate(hmm, grid_policy(hmm, table, row), beta, h=h, dedup_tol=dedup_tol,
                                 max_nodes=max_nodes)
    else:
        raise ValidationError(f"unknown evaluation method {method!r}")
    b = table.meta["start"]
    mid = T // 2
    inc = float(table.values[mid - 1, b] - table.values[mid, b])
    return TofeResult(detail.rate, inc, table, detail, table.unstable_beliefs())


# ---------------------------------------------------------------------------
# estimator interface


class DPPolicy(BaseEstimator):
    """Backward-induction tailoring policy with a fit/predict interface.

    ``fit`` takes a process and solves the finite-horizon problem on the
    configured grids; ``predict`` maps beliefs to the stationary-phase
    action angle, and ``score`` returns the long-run rate of that row on
    the grid chain.  ``strict`` refuses rows that still change inside the
    window ``[t_lo, horizon - margin]``.
    """

    def __init__(self, horizon: int = 30, n_beliefs: int = 201, n_actions: int = 360, beta: float = 1.0,
                 t_lo: int = 5, margin: int = 5, strict: bool = False):
        self.horizon = horizon
        self.n_beliefs = n_beliefs
        self.n_actions = n_actions
        self.beta = beta
        self.t_lo = t_lo
        self.margin = margin
        self.strict = strict

    def _check(self):
        if int(self.horizon) < 1 or int(self.n_beliefs) < 2 or int(self.n_actions) < 1 or not self.beta > 0:
            raise ValidationError(f"invalid parameters {self.get_params()}")

    def fit(self, X: QuantumHmm, y=None):
        if not isinstance(X, QuantumHmm):
            raise ValidationError("DPPolicy.fit expects a QuantumHmm")
        self._check()
        grid = coin_belief_grid(self.n_beliefs) if X.n_states == 2 else None
        if grid is None:
            raise ValidationError("default belief grid is defined for two latent states")
        self.hmm_ = X
        self.table_ = dp_backward(X, grid, uniform_action_grid(self.n_actions), int(self.horizon), self.beta)
        self.row_ = self.table_.stationary_row(self.t_lo, self.margin, self.strict)
        self.unstable_beliefs_ = self.table_.unstable_beliefs(self.t_lo, self.margin)
        return self

    def predict(self, X) -> np.ndarray:
        """Stationary-phase angle for each belief row of ``X``."""
        if not hasattr(self, "table_"):
            raise ValidationError("DPPolicy is not fitted")
        beliefs = np.atleast_2d(np.asarray(X, dtype=float))
        if beliefs.shape[1] != self.table_.belief_grid.shape[1]:
            raise ValidationError("belief dimension mismatch")
        idx, _ = _snap(beliefs, self.table_.belief_grid)
        return self.table_.thetas[idx, self.row_[idx]]

    def tailoring_policy(self):
        return grid_policy(self.hmm_, self.table_, self.row_)

    def score(self, X=None, y=None) -> float:
        if not hasattr(self, "table_"):
            raise ValidationError("DPPolicy is not fitted")
        if X is not None and X is not self.hmm_:
            return asymptotic_rate(X, self.tailoring_policy(), self.beta, dedup_tol=1e-9).rate
        return grid_chain_rate(self.table_, self.row_).rate
