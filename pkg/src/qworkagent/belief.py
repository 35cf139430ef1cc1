"""Belief states over latent HMM states and their observation-driven dynamics.

The agent holds ``eta``, a distribution over latent states.  It predicts the
next emission as ``xi = sum_x P_x sigma_x`` and, after observing which work
value a tailored protocol produced, conditions ``eta`` on that outcome.
Iterating the update over all outcomes gives a graph of reachable beliefs
whose closed classes fix the long-run work rate.
"""

from __future__ import annotations

import math

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.optimize import brentq

from .extraction import RateResult, expected_work, ideal_work_table
from .processes import QuantumHmm
from .qmath import ValidationError, basis_populations, check_orthonormal

SIMPLEX_TOL = 1e-10
IMPOSSIBLE_TOL = 1e-12
DEFAULT_DEDUP = 1e-6
DEFAULT_SEED_EPS = 1e-3


def as_belief(eta, n_states: int | None = None) -> np.ndarray:
    """Validate a belief vector; tiny negative entries are clipped."""
    e = np.asarray(eta, dtype=float).ravel()
    if n_states is not None and e.shape[0] != n_states:
        raise ValidationError(f"belief has {e.shape[0]} entries, process has {n_states} latent states")
    if np.any(e < -1e-12) or abs(e.sum() - 1.0) > SIMPLEX_TOL:
        raise ValidationError(f"belief must be a probability vector, got {e}")
    e = np.clip(e, 0.0, None)
    return e / e.sum()


def coin_belief(eps: float) -> np.ndarray:
    """Perturbed-coin belief ``(1/2 + eps, 1/2 - eps)``."""
    return np.array([0.5 + eps, 0.5 - eps])


def expected_state(eta, hmm: QuantumHmm):
    """``(xi, P)`` with ``P_x = eta T[x] 1`` and ``xi = sum_x P_x sigma_x``."""
    e = as_belief(eta, hmm.n_states)
    priors = hmm.symbol_probs(e)
    xi = np.einsum("x,xij->ij", priors, hmm.outputs)
    return 0.5 * (xi + xi.conj().T), priors


def _likelihoods_from_basis(hmm: QuantumHmm, basis, observed) -> np.ndarray:
    b = check_orthonormal(basis)
    cols = [observed] if np.isscalar(observed) else list(observed)
    return np.array([basis_populations(o, b)[cols].sum() for o in hmm.outputs])


def belief_update(eta, hmm: QuantumHmm, measurement_basis=None, outcome_likelihoods=None, observed=0) -> np.ndarray:
    """Condition ``eta`` on an outcome and propagate one step.

    ``eta' = sum_x Pr(o|x) eta T[x] / z``.  The likelihoods either come in
    directly, as a per-symbol vector or an ``(outcomes, symbols)`` table
    indexed by ``observed``, or are read off ``measurement_basis``: then
    ``observed`` names a column, or a group of columns sharing one work value.
    """
    e = as_belief(eta, hmm.n_states)
    if outcome_likelihoods is not None:
        lk = np.asarray(outcome_likelihoods, dtype=float)
        if lk.ndim == 2:
            lk = lk[observed]
    elif measurement_basis is not None:
        lk = _likelihoods_from_basis(hmm, measurement_basis, observed)
    else:
        raise ValidationError("need a measurement basis or outcome likelihoods")
    if lk.shape != (hmm.n_symbols,) or np.any(lk < -1e-12) or np.any(lk > 1 + 1e-12):
        raise ValidationError(f"likelihoods must be {hmm.n_symbols} values in [0, 1], got {lk}")
    prop = np.einsum("x,s,xst->t", np.clip(lk, 0, 1), e, hmm.labeled)
    z = prop.sum()
    if z <= IMPOSSIBLE_TOL:
        raise ValidationError(f"outcome {observed!r} has probability {z:.3e} under this belief")
    return prop / z


@dataclass(frozen=True)
class Branch:
    """One observable outcome of a tailored protocol applied to the expected state."""

    work: float
    prob: float
    belief: np.ndarray
    likelihoods: np.ndarray


def work_branches(eta, hmm: QuantumHmm, tailored, h=None, beta: float = 1.0, min_prob: float = 1e-15):
    """Outcomes (merged work values) with their probabilities and posteriors."""
    e = as_belief(eta, hmm.n_states)
    table = ideal_work_table(tailored, h, beta)
    pops = np.array([np.clip(basis_populations(o, table.eigenvectors), 0, 1) for o in hmm.outputs])
    priors = hmm.symbol_probs(e)
    out = []
    for w, g in zip(table.merged, table.groups):
        lk = pops[:, list(g)].sum(axis=1)
        pr = float(lk @ priors)
        if pr <= min_prob:
            continue
        prop = np.einsum("x,s,xst->t", lk, e, hmm.labeled)
        out.append(Branch(float(w), pr, prop / prop.sum(), lk))
    return out


def outcome_distribution(eta, hmm: QuantumHmm, tailored, h=None, beta: float = 1.0):
    """``(work values, probabilities)`` of the merged outcomes for belief ``eta``."""
    xi, _ = expected_state(eta, hmm)
    table = ideal_work_table(tailored, h, beta)
    return table.merged, table.probabilities(xi)


# ---------------------------------------------------------------------------
# belief graphs


@dataclass
class BeliefGraph:
    """Beliefs reachable from the start under a fixed tailoring policy.

    Node 0 is the start.  ``edges`` holds ``(src, outcome, prob, dst, work)``.
    """

    nodes: np.ndarray
    edges: list
    node_work: np.ndarray
    recurrent: np.ndarray
    truncated: bool
    merges: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    def transition_matrix(self) -> csr_matrix:
        src = [e[0] for e in self.edges]
        dst = [e[3] for e in self.edges]
        pr = [e[2] for e in self.edges]
        return csr_matrix((pr, (src, dst)), shape=(self.n_nodes, self.n_nodes))

    def closed_classes(self) -> list:
        return closed_classes_of(self.transition_matrix())

    def rate(self) -> RateResult:
        """Stationary mean work per step, weighted by absorption from the start."""
        total, rates, weights = chain_rate(self.transition_matrix(), self.node_work, start=0)
        return RateResult(total, rates, weights, self.n_nodes, int(self.recurrent.sum()), self.truncated)

    def recurrent_beliefs(self) -> np.ndarray:
        return self.nodes[self.recurrent]

    def to_dict(self) -> dict:
        nodes = []
        for k, eta in enumerate(self.nodes):
            d = {"id": k, "belief": eta.tolist(), "recurrent": bool(self.recurrent[k]),
                 "expected_work": float(self.node_work[k])}
            if eta.shape[0] == 2:
                d["epsilon"] = float(eta[0] - 0.5)
            nodes.append(d)
        edges = [{"src": s, "outcome": o, "prob": p, "dst": t, "work": w} for s, o, p, t, w in self.edges]
        return {"nodes": nodes, "edges": edges, "truncated": self.truncated, "merges": self.merges}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_dot(self) -> str:
        lines = ["digraph msp {"]
        for k, eta in enumerate(self.nodes):
            label = ", ".join(f"{v:.4f}" for v in eta)
            shape = "doublecircle" if self.recurrent[k] else "circle"
            lines.append(f'  n{k} [label="{label}", shape={shape}];')
        for s, o, p, t, w in self.edges:
            lines.append(f'  n{s} -> n{t} [label="w={w:.4f} p={p:.4f}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def class_stationary(t: csr_matrix, members) -> np.ndarray:
    sub = t[members][:, members].toarray()
    w, v = np.linalg.eig(sub.T)
    k = int(np.argmin(np.abs(w - 1.0)))
    pi = np.abs(np.real(v[:, k]))
    return pi / pi.sum()


def closed_classes_of(t: csr_matrix) -> list:
    """Closed strongly connected classes of a sparse transition matrix."""
    n_comp, labels = connected_components(t, directed=True, connection="strong")
    coo = t.tocoo()
    leaks = labels[coo.row] != labels[coo.col]
    open_comp = np.zeros(n_comp, dtype=bool)
    open_comp[labels[coo.row[leaks]]] = True
    order = np.argsort(labels, kind="stable")
    splits = np.searchsorted(labels[order], np.arange(n_comp + 1))
    return [order[splits[c]:splits[c + 1]] for c in range(n_comp) if not open_comp[c]]


def chain_rate(t, node_reward, start: int = 0):
    """Long-run mean reward of a finite chain started at ``start``.

    Returns ``(rate, class_rates, class_weights)`` over the closed classes,
    weighted by the probability of being absorbed into each.
    """
    t = csr_matrix(t)
    node_reward = np.asarray(node_reward, dtype=float)
    classes = closed_classes_of(t)
    rates, weights = [], []
    for members, w in zip(classes, _absorption_probs(t, classes, start)):
        pi = class_stationary(t, members)
        rates.append(float(pi @ node_reward[members]))
        weights.append(float(w))
    total = float(np.dot(rates, weights) / np.sum(weights))
    return total, tuple(rates), tuple(weights)


def _absorption_probs(t: csr_matrix, classes, start: int = 0) -> np.ndarray:
    """Probability that the chain started at ``start`` ends in each closed class."""
    n = t.shape[0]
    label = np.full(n, -1)
    for c, members in enumerate(classes):
        label[members] = c
    if label[start] >= 0:
        out = np.zeros(len(classes))
        out[label[start]] = 1.0
        return out
    trans = np.flatnonzero(label < 0)
    pos = {s: k for k, s in enumerate(trans)}
    from scipy.sparse import identity
    from scipy.sparse.linalg import spsolve

    q = t[trans][:, trans]
    a = identity(len(trans), format="csc") - q.tocsc()
    out = np.zeros(len(classes))
    for c, members in enumerate(classes):
        rhs = np.asarray(t[trans][:, members].sum(axis=1)).ravel()
        sol = spsolve(a, rhs) if len(trans) > 1 else rhs / a.toarray()[0, 0]
        out[c] = float(np.atleast_1d(sol)[pos[start]])
    return out


class _NodeIndex:
    """Hash-grid lookup of beliefs within an L1 tolerance."""

    def __init__(self, tol: float):
        self.tol = tol
        self.cells: dict = {}
        self.points: list = []

    def _key(self, eta):
        return tuple(np.floor(eta / self.tol).astype(np.int64))

    def find(self, eta):
        key = np.array(self._key(eta))
        best, best_d = None, self.tol
        for off in np.ndindex(*(3,) * len(key)):
            for idx in self.cells.get(tuple(key + np.array(off) - 1), ()):
                d = float(np.abs(self.points[idx] - eta).sum())
                if d < best_d:
                    best, best_d = idx, d
        return best

    def nearest(self, eta):
        pts = np.array(self.points)
        return int(np.argmin(np.abs(pts - eta).sum(axis=1)))

    def add(self, eta, index_in_graph: int, searchable: bool = True):
        self.points.append(np.asarray(eta, dtype=float))
        if searchable:
            self.cells.setdefault(self._key(eta), []).append(index_in_graph)


def seeded_belief(hmm: QuantumHmm, seed_eps: float) -> np.ndarray:
    """Stationary belief nudged toward the first latent state."""
    e0 = np.zeros(hmm.n_states)
    e0[0] = 1.0
    return (1.0 - 2.0 * seed_eps) * hmm.stationary + 2.0 * seed_eps * e0


def build_msp(hmm: QuantumHmm, policy, dedup_tol: float = DEFAULT_DEDUP, max_nodes: int = 20000, *,
              h=None, beta: float = 1.0, seed_eps: float = DEFAULT_SEED_EPS) -> BeliefGraph:
    """Breadth-first expansion of the beliefs reachable from stationarity.

    The start node sits at the stationary belief but tailors to the belief
    nudged by ``seed_eps`` (breaking the symmetry that would otherwise pin
    the local optimizer at a fixed point).  A second, ordinary node at the
    stationary belief is available for later visits.  Successors closer than
    ``dedup_tol`` (L1) to an existing node are merged into it; beyond
    ``max_nodes`` every new successor joins its nearest node and the graph
    is flagged as truncated.
    """
    if not dedup_tol > 0:
        raise ValidationError("dedup_tol must be positive")
    pi = hmm.stationary.copy()
    nodes = [pi, pi.copy()]
    index = _NodeIndex(dedup_tol)
    index.add(pi, 0, searchable=False)
    index.add(pi, 1)
    expanded = [False, False]
    edges, work = [], [0.0, 0.0]
    queue = deque([0])
    truncated, merges = False, 0
    seed = seeded_belief(hmm, seed_eps) if seed_eps else pi
    while queue:
        k = queue.popleft()
        if expanded[k]:
            continue
        expanded[k] = True
        eta = nodes[k]
        act_belief = seed if k == 0 else eta
        tailored = policy(act_belief)
        xi, _ = expected_state(eta, hmm)
        work[k] = expected_work(tailored, xi, h, beta)
        for o, br in enumerate(work_branches(eta, hmm, tailored, h, beta)):
            j = index.find(br.belief)
            if j is None:
                if len(nodes) >= max_nodes:
                    truncated = True
                    merges += 1
                    j = index.nearest(br.belief)
                    j = max(j, 1) if j == 0 else j
                else:
                    j = len(nodes)
                    nodes.append(br.belief)
                    index.add(br.belief, j)
                    expanded.append(False)
                    work.append(0.0)
            if not expanded[j]:
                queue.append(j)
            edges.append((k, o, br.prob, j, br.work))
    # drop the ordinary stationary node if it was never reached
    used = np.zeros(len(nodes), dtype=bool)
    used[0] = True
    for s, _, _, t, _ in edges:
        used[t] = True
    remap = -np.ones(len(nodes), dtype=int)
    remap[used] = np.arange(used.sum())
    nodes_arr = np.array(nodes)[used]
    edges = [(int(remap[s]), o, p, int(remap[t]), w) for s, o, p, t, w in edges if used[s]]
    g = BeliefGraph(nodes_arr, edges, np.array(work)[used], np.zeros(int(used.sum()), dtype=bool), truncated, merges)
    for members in g.closed_classes():
        g.recurrent[members] = True
    g.meta.update({"dedup_tol": dedup_tol, "seed_eps": seed_eps, "max_nodes": max_nodes})
    return g


# ---------------------------------------------------------------------------
# perturbed coin under the local optimizer


def coin_expected_state(eps: float, p: float, r: float) -> np.ndarray:
    """Expected state for coin belief ``(1/2 + eps, 1/2 - eps)``."""
    p0 = 0.5 + eps * (1.0 - 2.0 * p)
    k = np.array([np.sqrt(r), np.sqrt(1.0 - r)])
    return p0 * np.diag([1.0, 0.0]) + (1.0 - p0) * np.outer(k, k)


def coin_eps_prime(eps, p: float, r: float):
    """``2 eps (1 - 2p) sqrt(1 - r)``, the off-balance entering the spectrum."""
    return 2.0 * np.asarray(eps) * (1.0 - 2.0 * p) * np.sqrt(1.0 - r)


def coin_lambdas(eps, p: float, r: float):
    """Eigenvalues ``1/2 +- sqrt(r + eps'^2)/2`` of the coin's expected state."""
    root = np.sqrt(r + coin_eps_prime(eps, p, r) ** 2)
    return 0.5 + 0.5 * root, 0.5 - 0.5 * root


def coin_lo_map(eps, p: float, r: float):
    """Posterior coordinates and probabilities of the two LO outcomes.

    Returns ``(eps_plus, eps_minus, lam_plus, lam_minus)``; the ``plus``
    outcome is the larger-eigenvalue eigenvector of the expected state.
    Everything is written in ``d = eps (1 - 2p)`` rather than ``1/2 + d`` so
    that small beliefs keep full relative precision.
    """
    d = float(eps) * (1.0 - 2.0 * p)
    s = np.sqrt(r * (1.0 - r))
    # Bloch vector of p0 |0><0| + (1 - p0) |psi><psi| with p0 = 1/2 + d
    bx = (1.0 - 2.0 * d) * s
    bz = 2.0 * d + r * (1.0 - 2.0 * d)
    norm = math.hypot(bx, bz)
    ux, uz = (bx / norm, bz / norm) if norm > 0 else (0.0, 1.0)
    out = []
    for sign in (1.0, -1.0):
        # overlaps of the outcome projector with |0> and |psi>
        a = (0.5 + d) * (1.0 + sign * uz)
        b = (0.5 - d) * (1.0 + sign * (2.0 * s * ux + (2.0 * r - 1.0) * uz))
        out.append(0.5 * (a - b) / (a + b) if a + b > 0 else 0.0)
    return out[0], out[1], 0.5 * (1.0 + norm), 0.5 * (1.0 - norm)


def coin_return_map(eps, p: float, r: float) -> float:
    """Odd return map ``sign(eps) |f_+(eps)|`` of the belief magnitude.

    Both LO outcomes move the belief to the same magnitude, so the
    magnitude follows a deterministic one-dimensional map.
    """
    fp = coin_lo_map(eps, p, r)[0]
    return float(np.sign(eps) * abs(fp))


def coin_return_slope(p: float, r: float, h: float = 1e-5) -> float:
    """Central-difference slope of the return map at the stationary belief."""
    return (coin_return_map(h, p, r) - coin_return_map(-h, p, r)) / (2 * h)


@dataclass(frozen=True)
class FixedPoint:
    eps: float
    slope: float
    stable: bool


@dataclass(frozen=True)
class ReturnMapReport:
    fixed_points: tuple
    regime: str
    slope_at_pi: float


def classify_return_map(p: float, r: float, n_grid: int = 4001, h: float = 1e-5) -> ReturnMapReport:
    """Fixed points of the coin's LO return map on ``eps in [-1/2, 1/2]``.

    Fixed points are bracketed by sign changes of ``f(eps) - eps`` on the
    grid and refined with Brent's method; stability is ``|f'| < 1``.
    """
    grid = np.linspace(-0.5, 0.5, n_grid)

    def g(e):
        return coin_return_map(e, p, r) - e

    vals = np.array([g(e) for e in grid])
    roots = []
    for a, b, va, vb in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
        if va == 0.0:
            roots.append(a)
        elif va * vb < 0:
            roots.append(brentq(g, a, b, xtol=1e-14))
    if vals[-1] == 0.0:
        roots.append(grid[-1])
    if not any(abs(x) < 1e-12 for x in roots):
        roots.append(0.0)
    fps = []
    for x in sorted(set(np.round(roots, 13))):
        lo, hi = max(x - h, -0.5), min(x + h, 0.5)
        slope = (coin_return_map(hi, p, r) - coin_return_map(lo, p, r)) / (hi - lo)
        fps.append(FixedPoint(float(x), float(slope), abs(slope) < 1.0))
    s0 = coin_return_slope(p, r, h)
    stable_nonzero = [f for f in fps if f.stable and abs(f.eps) > 1e-9]
    regime = "memory-apathetic" if abs(s0) < 1.0 and not stable_nonzero else "memory-advantageous"
    return ReturnMapReport(tuple(fps), regime, float(s0))


def coin_recurrent_pair(p: float, r: float) -> float:
    """Magnitude ``eps*`` of the two recurrent LO beliefs (0 when apathetic)."""
    rep = classify_return_map(p, r)
    pos = [f.eps for f in rep.fixed_points if f.stable and f.eps > 1e-9]
    return max(pos) if pos else 0.0


def coin_stationary_pair(eps_k: float, eps_kp: float, p: float, r: float) -> np.ndarray:
    """Visit frequencies ``[lam+', lam+] / (lam+ + lam+')`` of two recurrent beliefs."""
    lp = coin_lambdas(eps_k, p, r)[0]
    lpp = coin_lambdas(eps_kp, p, r)[0]
    return np.array([lpp, lp]) / (lp + lpp)
