"""Extracting work from copies of an unknown pure qubit while learning it.

The learner is a linear bandit over Bloch directions (LinUCB with
vanishing-variance weights and a weighted median-of-means estimate).  Each
round it proposes a direction ``a_k``; the protocol is tailored to
``Delta_{2 eps_k}(psi_k)`` and the battery reading is turned into a binary
reward.  The unknown state lives inside ``PureStateOracle`` and is only
touched through reward sampling and the bookkeeping of dissipation.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator

from .extraction import ideal_work_table, reward_from_work, sample_work
from .qmath import ValidationError, bloch_vector, density_from_bloch, haar_pure_ket, ket_to_density

ZETA_THEORY = 334812.0 * math.sqrt(2.0) + 1296.0 * math.sqrt(6.0)
ZETA_PRACTICAL = 1.0
T_PRACTICAL = 5
NORM_TOL = 1e-10

INITIAL_DIRECTIONS = np.array([
    [1.0, 0.0, 1.0],
    [-1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [0.0, -1.0, 1.0],
]) / math.sqrt(2.0)


def theory_t(L: int, delta: float) -> int:
    """Sub-block size ``ceil(24 ln(L / delta))`` required by the regret guarantee."""
    return max(1, math.ceil(24.0 * math.log(L / delta)))


# ---------------------------------------------------------------------------
# learner


@dataclass(frozen=True)
class BanditState:
    """Learner state between blocks.

    ``weighted_sums[j]`` accumulates ``sum_m sigma_m^-2 sum_i a_{m,i} (2 r_{m,i,j} - 1)``
    so that each per-``j`` estimator is ``V^-1 weighted_sums[j]``.
    """

    block: int
    t: int
    zeta: float
    lambda0: float
    V: np.ndarray
    directions: np.ndarray
    sigma2: float
    weighted_sums: np.ndarray
    estimators: np.ndarray
    estimate: np.ndarray
    rewards: tuple = ()
    history: tuple = field(default=(), compare=False)


def linucb_init(lambda0: float = 1.0, t: int = T_PRACTICAL, zeta: float = ZETA_THEORY) -> BanditState:
    if not lambda0 > 0:
        raise ValidationError("lambda0 must be positive")
    if int(t) < 1:
        raise ValidationError("t must be at least 1")
    t = int(t)
    return BanditState(
        block=1, t=t, zeta=float(zeta), lambda0=float(lambda0),
        V=float(lambda0) * np.eye(3), directions=INITIAL_DIRECTIONS.copy(), sigma2=1.0,
        weighted_sums=np.zeros((t, 3)), estimators=np.zeros((t, 3)), estimate=np.array([0.0, 0.0, 1.0]),
    )


def _fix_sign(v: np.ndarray) -> np.ndarray:
    k = int(np.argmax(np.abs(v) > 1e-12))
    return -v if v[k] < 0 else v


def weighted_median_of_means(estimators: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Estimator whose median ``V``-norm distance to the others is smallest.

    Ties are broken by the lexicographically smallest vector, which keeps
    the choice independent of the order of the estimators.
    """
    est = np.asarray(estimators, dtype=float)
    t = est.shape[0]
    if t == 1:
        return est[0].copy()
    diff = est[:, None, :] - est[None, :, :]
    dist = np.sqrt(np.clip(np.einsum("abi,ij,abj->ab", diff, V, diff), 0.0, None))
    med = np.array([np.median(np.delete(dist[j], j)) for j in range(t)])
    best = med.min()
    cands = np.flatnonzero(med <= best + 1e-12 * (1.0 + abs(best)))
    order = sorted(cands, key=lambda j: tuple(est[j]))
    return est[order[0]].copy()


def next_directions(estimate: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Perturb the estimate along the two least-explored eigen-directions of ``V``."""
    vals, vecs = np.linalg.eigh(V)
    scale = 1.0 / math.sqrt(vals[0])
    out = np.empty((4, 3))
    for i in range(1, 5):
        v = _fix_sign(vecs[:, (i + 1) // 2 - 1])
        a = estimate - ((-1) ** i) * scale * v
        out[i - 1] = a / np.linalg.norm(a)
    return out


def linucb_block(state: BanditState, rewards) -> BanditState:
    """Absorb one block of ``4 t`` rewards, shaped ``(4, t)`` as ``r[i, j]``."""
    r = np.asarray(rewards)
    if r.shape != (4, state.t):
        raise ValidationError(f"expected rewards of shape (4, {state.t}), got {r.shape}")
    if not np.all((r == 0) | (r == 1)):
        raise ValidationError("rewards must be 0 or 1")
    w = 1.0 / state.sigma2
    a = state.directions
    V = state.V + w * a.T @ a
    sums = state.weighted_sums + w * ((2.0 * r.T - 1.0) @ a)
    est = np.linalg.solve(V, sums.T).T
    vals = np.linalg.eigvalsh(V)
    assert vals[0] > 0, "design matrix lost positive definiteness"
    wmom = weighted_median_of_means(est, V)
    norm = np.linalg.norm(wmom)
    unit = wmom / norm if norm > 0 else state.estimate
    return replace(
        state,
        block=state.block + 1,
        V=V,
        directions=next_directions(unit, V),
        sigma2=2.0 * state.zeta / math.sqrt(vals[-1]),
        weighted_sums=sums,
        estimators=est,
        estimate=unit,
        rewards=state.rewards + (r.astype(np.int8),),
    )


class LinUcbVvn(BaseEstimator):
    """Estimator wrapper: ``partial_fit`` takes one block of rewards.

    ``predict`` returns the current unit Bloch estimate, ``directions_``
    the four directions to measure in the next block.
    """

    def __init__(self, lambda0: float = 1.0, t: int = T_PRACTICAL, zeta: float = ZETA_PRACTICAL):
        self.lambda0 = lambda0
        self.t = t
        self.zeta = zeta

    def _ensure(self):
        if not hasattr(self, "state_"):
            self.state_ = linucb_init(self.lambda0, self.t, self.zeta)

    @property
    def directions_(self) -> np.ndarray:
        self._ensure()
        return self.state_.directions

    def partial_fit(self, X, y=None):
        """``X``: rewards of shape ``(4, t)`` for the current directions."""
        self._ensure()
        self.state_ = linucb_block(self.state_, X)
        return self

    def fit(self, X, y=None):
        """Reset and absorb a sequence of blocks."""
        self.state_ = linucb_init(self.lambda0, self.t, self.zeta)
        for block in X:
            self.partial_fit(block)
        return self

    def predict(self, X=None) -> np.ndarray:
        self._ensure()
        return self.state_.estimate.copy()


# ---------------------------------------------------------------------------
# unknown state


def infidelity_from_bloch(a, n) -> np.ndarray:
    """``1 - |<psi_a|psi_n>|^2`` for pure states with unit Bloch vectors ``a`` and ``n``."""
    return np.clip(0.5 * (1.0 - np.asarray(a) @ np.asarray(n)), 0.0, 1.0)


def dissipation_pure(fid, eps) -> np.ndarray:
    """``D(psi || Delta_{2 eps}(psi_k))`` in nats for overlap ``fid = |<psi_k|psi>|^2``.

    The tailored state has eigenvalues ``1 - eps`` on ``psi_k`` and ``eps``
    on its complement; zero weight on a populated eigenvector gives ``inf``.
    """
    fid = np.asarray(fid, dtype=float)
    eps = np.asarray(eps, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(fid > 0, -fid * np.log1p(-eps), 0.0)
        b = np.where(fid < 1, -(1.0 - fid) * np.log(eps), 0.0)
    return a + b


class PureStateOracle:
    """Copies of a hidden pure qubit.

    Learners only call the sampling methods; ``infidelity`` and
    ``dissipation`` are for the accounting harness.
    """

    def __init__(self, ket):
        k = np.asarray(ket, dtype=complex)
        self.__n = bloch_vector(ket_to_density(k / np.linalg.norm(k)))

    @classmethod
    def haar(cls, rng: np.random.Generator) -> PureStateOracle:
        return cls(haar_pure_ket(rng, 2))

    def born_rewards(self, directions, rng: np.random.Generator) -> np.ndarray:
        """Outcome 1 with probability ``|<psi_k|psi>|^2`` for each direction row."""
        p = 1.0 - infidelity_from_bloch(np.atleast_2d(directions), self.__n)
        return (rng.random(p.shape) < p).astype(np.int8)

    def thermal_reward(self, direction, eps: float, M: int, rng: np.random.Generator, beta: float = 1.0) -> int:
        """Run the finite-``M`` protocol tailored to ``Delta_{2 eps}(psi_k)`` and threshold the work."""
        rho_hat = depolarized_pure(direction, eps)
        if eps >= 0.5 - 1e-12:
            # equal work values: the record of the protocol's basis outcome is used
            return int(self.born_rewards(direction, rng)[0])
        table = ideal_work_table(rho_hat, None, beta)
        i, w = sample_work(density_from_bloch(self.__n), rho_hat, M, 1, rng, beta)
        return int(reward_from_work(w, table.values[0], table.values[1])[0])

    def jc_outcome(self, direction, n_k: int, rng: np.random.Generator, omega: float = 1.0):
        return jc_round(self, direction, n_k, omega, rng)

    def overlap(self, directions) -> np.ndarray:
        return 1.0 - infidelity_from_bloch(np.atleast_2d(directions), self.__n)

    def infidelity(self, directions) -> np.ndarray:
        return infidelity_from_bloch(np.atleast_2d(directions), self.__n)

    def dissipation(self, directions, eps) -> np.ndarray:
        return dissipation_pure(self.overlap(directions), eps)

    def dissipation_state(self, rho_hat) -> float:
        from .qmath import relative_entropy

        return relative_entropy(density_from_bloch(self.__n), rho_hat)


def depolarized_pure(direction, eps: float) -> np.ndarray:
    """``Delta_{2 eps}(psi_k) = (1 - 2 eps) psi_k + eps * identity``."""
    a = np.asarray(direction, dtype=float)
    return density_from_bloch((1.0 - 2.0 * eps) * a / np.linalg.norm(a))


# ---------------------------------------------------------------------------
# traces


@dataclass
class DissipationTrace:
    """Per-round record; ``k`` runs from 1."""

    epsilon: np.ndarray
    infidelity: np.ndarray
    reward: np.ndarray
    w_diss: np.ndarray
    model: str = "sc"
    meta: dict = field(default_factory=dict)

    @property
    def k(self) -> np.ndarray:
        return np.arange(1, self.epsilon.shape[0] + 1)

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.w_diss)

    @property
    def regret(self) -> np.ndarray:
        return np.cumsum(self.infidelity)

    def total(self) -> float:
        return float(np.sum(self.w_diss))

    def to_rows(self, trial: int = 0):
        cum = self.cumulative
        for k in range(self.epsilon.shape[0]):
            yield [trial, k + 1, repr(float(self.epsilon[k])), repr(float(self.infidelity[k])),
                   int(self.reward[k]), repr(float(self.w_diss[k])), repr(float(cum[k]))]


TRACE_HEADER = ["trial", "k", "epsilon_k", "infidelity", "reward", "w_diss_k", "w_diss_cum"]


def traces_to_csv(traces) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(TRACE_HEADER)
    for trial, tr in enumerate(traces):
        wr.writerows(tr.to_rows(trial))
    return buf.getvalue()


def epsilon_schedule(N: int, delta: float, C: float) -> np.ndarray:
    """``eps_k = min(C ln(N / delta) / k, 1/2)`` for ``k = 1..N``."""
    k = np.arange(1, N + 1, dtype=float)
    return np.minimum(C * math.log(N / delta) / k, 0.5)


def _round_order(t: int) -> tuple[np.ndarray, np.ndarray]:
    """Sub-block ``i`` and repetition ``j`` of each round in a block (``j`` outer)."""
    j, i = np.divmod(np.arange(4 * t), 4)
    return i, j


def extract_while_learning(psi: PureStateOracle, N: int, delta: float = 0.01, C: float = 1.0, M: int | None = None,
                           rng: np.random.Generator | None = None, *, t: int | None = None, lambda0: float = 1.0,
                           zeta: float = ZETA_PRACTICAL, beta: float = 1.0, model: str = "sc",
                           omega: float = 1.0) -> DissipationTrace:
    """Learn ``psi`` with the bandit while extracting work from every copy.

    ``M=None`` uses the infinite-repetition reward (Born outcome in the
    tailored basis); an integer runs the finite protocol and thresholds the
    sampled work at the midpoint of the two ideal values.  ``t=None`` takes
    the theoretical sub-block size for this ``N``; pass ``t=5`` for the
    practical mode.  ``model="jc"`` replaces the thermal protocol with the
    Jaynes-Cummings battery (``eps_k`` is then only recorded).
    """
    if N < 1:
        raise ValidationError("N must be positive")
    if not 0 < delta < 1:
        raise ValidationError("delta must lie in (0, 1)")
    if model not in ("sc", "jc"):
        raise ValidationError(f"unknown battery model {model!r}")
    rng = np.random.default_rng() if rng is None else rng
    if t is None:
        t = theory_t(max(1, N // 4), delta)
        while 4 * t * max(1, N // (4 * t)) > N and t > 1:
            t -= 1
    state = linucb_init(lambda0, t, zeta)
    eps = epsilon_schedule(N, delta, C)
    inf = np.empty(N)
    rew = np.empty(N, dtype=np.int8)
    w = np.empty(N)
    order_i, order_j = _round_order(t)
    battery = 0
    k = 0
    while k < N:
        n_rounds = min(4 * t, N - k)
        dirs = state.directions[order_i[:n_rounds]]
        sl = slice(k, k + n_rounds)
        inf[sl] = psi.infidelity(dirs)
        if model == "jc":
            for q in range(n_rounds):
                out = jc_round(psi, dirs[q], battery, omega, rng)
                battery = out.n_next
                rew[k + q] = out.reward
                w[k + q] = out.dissipation
        else:
            if M is None:
                rew[sl] = psi.born_rewards(dirs, rng)
            else:
                rew[sl] = [psi.thermal_reward(dirs[q], eps[k + q], M, rng, beta) for q in range(n_rounds)]
            w[sl] = psi.dissipation(dirs, eps[sl]) / beta
        if n_rounds == 4 * t:
            r = np.zeros((4, t), dtype=np.int8)
            r[order_i, order_j] = rew[sl]
            state = linucb_block(state, r)
        k += n_rounds
    return DissipationTrace(eps, inf, rew, w, model, {"N": N, "delta": delta, "C": C, "t": t, "M": M,
                                                      "zeta": zeta, "lambda0": lambda0, "beta": beta})


def tomography_first(psi: PureStateOracle, N: int, rng: np.random.Generator | None = None, alpha: float | None = None,
                     beta: float = 1.0) -> DissipationTrace:
    """Measure ``ceil(alpha N)`` copies in cyclic X, Y, Z, then extract from the rest.

    Measured copies are lost for extraction and cost the full
    ``D(psi || 1/2) = ln 2``.  The rest use ``Delta_{2 eps}`` of the
    linear-inversion estimate (clipped to the Bloch ball, pure direction),
    with ``eps`` the plug-in estimate of its expected infidelity.
    ``alpha`` defaults to ``1/sqrt(N)``.
    """
    if N < 4:
        raise ValidationError("N must be at least 4")
    rng = np.random.default_rng() if rng is None else rng
    alpha = 1.0 / math.sqrt(N) if alpha is None else float(alpha)
    n_meas = min(N, max(3, math.ceil(alpha * N)))
    axes = np.eye(3)[np.arange(n_meas) % 3]
    outcomes = psi.born_rewards(axes, rng)
    counts = np.array([np.count_nonzero(np.arange(n_meas) % 3 == a) for a in range(3)])
    means = np.array([np.mean(2.0 * outcomes[np.arange(n_meas) % 3 == a] - 1.0) for a in range(3)])
    b = means / max(1.0, np.linalg.norm(means))
    norm = np.linalg.norm(b)
    direction = b / norm if norm > 0 else np.array([0.0, 0.0, 1.0])
    # each Pauli mean has variance (1 - b_a^2)/m_a; a pure-state estimate's infidelity is about |db|^2 / 4
    eps_hat = float(np.clip(np.sum((1.0 - b ** 2) / counts) / 4.0, 1.0 / (4.0 * n_meas), 0.5))
    n_ext = N - n_meas
    eps = np.concatenate([np.full(n_meas, 0.5), np.full(n_ext, eps_hat)])
    inf = np.concatenate([psi.infidelity(axes), np.repeat(psi.infidelity(direction), n_ext)])
    w = np.concatenate([np.full(n_meas, math.log(2.0) / beta),
                        np.repeat(psi.dissipation(direction, eps_hat) / beta, n_ext)])
    rew = np.concatenate([outcomes, np.zeros(n_ext, dtype=np.int8)])
    return DissipationTrace(eps, inf, rew, w, "tomography", {"N": N, "alpha": alpha, "n_meas": n_meas,
                                                               "eps_hat": eps_hat})


# ---------------------------------------------------------------------------
# Jaynes-Cummings battery


@dataclass(frozen=True)
class JcOutcome:
    n_next: int
    reward: int
    work: float
    probs: tuple
    dissipation: float


def jc_probabilities(fid: float, n_k: int) -> tuple[float, float, float]:
    """``(Pr[n+1], Pr[n], Pr[n-1])`` after one interaction period."""
    theta = 0.5 * math.pi * math.sqrt(n_k / (n_k + 1.0))
    s2 = math.sin(theta) ** 2
    return fid, (1.0 - fid) * (1.0 - s2), (1.0 - fid) * s2


def jc_expected_work(fid: float, n_k: int, omega: float = 1.0) -> float:
    theta = 0.5 * math.pi * math.sqrt(n_k / (n_k + 1.0))
    s2 = math.sin(theta) ** 2
    return omega * (fid * (1.0 + s2) - s2)


def jc_round(psi: PureStateOracle, direction, n_k: int, omega: float = 1.0,
             rng: np.random.Generator | None = None) -> JcOutcome:
    """One resonant exchange between the qubit and a ladder battery in state ``|n_k>``."""
    if n_k < 0:
        raise ValidationError("battery level must be non-negative")
    rng = np.random.default_rng() if rng is None else rng
    fid = float(psi.overlap(direction)[0])
    probs = jc_probabilities(fid, n_k)
    assert abs(sum(probs) - 1.0) < 1e-12 and (n_k > 0 or probs[2] == 0.0)
    u = rng.random()
    step = 1 if u < probs[0] else (0 if u < probs[0] + probs[1] else -1)
    theta = 0.5 * math.pi * math.sqrt(n_k / (n_k + 1.0))
    diss = omega * (1.0 + math.sin(theta) ** 2) * (1.0 - fid)
    return JcOutcome(n_k + step, int(step == 1), omega * step, probs, diss)


# ---------------------------------------------------------------------------
# erasure cost and fits


def landauer_terms(eps, model: str = "sc") -> np.ndarray:
    """Per-round register entropy bound: ``eps - eps ln eps`` (sc) or ``2 eps - eps ln eps`` (jc)."""
    e = np.asarray(eps, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        xlx = np.where(e > 0, e * np.log(e), 0.0)
    if model == "sc":
        return e - xlx
    if model == "jc":
        return 2.0 * e - xlx
    raise ValidationError(f"unknown battery model {model!r}")


def landauer_cost(trace: DissipationTrace, model: str = "sc", source: str = "schedule", beta: float = 1.0) -> float:
    """``W*_diss = W_diss + sum_k Delta S_k / beta``.

    ``source="schedule"`` bounds ``Delta S_k`` with the trace's ``eps_k``;
    ``source="infidelity"`` uses the realized per-round infidelity.
    """
    eps = trace.epsilon if source == "schedule" else trace.infidelity
    return float(trace.total() + landauer_terms(eps, model).sum() / beta)


def erasure_case(N: int, delta: float, C: float) -> int:
    """Which branch of the entropy-sum bound applies: 1 if ``C ln(N/delta) ln N / N <= 1/e`` else 2."""
    return 1 if C * math.log(N / delta) * math.log(N) / N <= math.exp(-1.0) else 2


def relative_entropy_bound(eps, d: int = 2) -> np.ndarray:
    """``16 eps (2 + ln(d / (2 eps)))``."""
    e = np.asarray(eps, dtype=float)
    return 16.0 * e * (2.0 + np.log(d / (2.0 * e)))


@dataclass(frozen=True)
class LinearFit:
    a: float
    b: float
    r2: float
    transform: str

    def as_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "r2": self.r2, "transform": self.transform}


TRANSFORMS = {
    "log10_sq": lambda n: np.log10(n) ** 2,
    "sqrt": np.sqrt,
    "ln_cube": lambda n: np.log(n) ** 3,
}


def fit_scaling(N, W, transform: str) -> LinearFit:
    """Least-squares fit ``W = a f(N) + b`` and its coefficient of determination."""
    x = TRANSFORMS[transform](np.asarray(N, dtype=float))
    res = stats.linregress(x, np.asarray(W, dtype=float))
    return LinearFit(float(res.slope), float(res.intercept), float(res.rvalue ** 2), transform)


def crossover(N, adaptive, baseline) -> float | None:
    """Smallest grid ``N`` from which the adaptive curve stays strictly below the baseline."""
    N = np.asarray(N)
    below = np.asarray(adaptive) < np.asarray(baseline)
    for q in range(N.shape[0]):
        if below[q:].all():
            return float(N[q])
    return None


def loglog_slope(k, y) -> float:
    k = np.asarray(k, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = y > 0
    return float(stats.linregress(np.log(k[ok]), np.log(y[ok])).slope)


def summary_json(fits: dict, extra: dict | None = None) -> str:
    return json.dumps({**{k: v.as_dict() for k, v in fits.items()}, **(extra or {})}, sort_keys=True, indent=2)
