"""Small dense Hermitian linear algebra and quantum information functionals.

Density matrices are plain complex ``numpy`` arrays.  The helpers here
validate them, diagonalize them with a reproducible phase convention and
evaluate entropies, relative entropies and simple channels.  A set of
vectorized Bloch-vector routines at the bottom serves the qubit hot paths
of the policy and belief modules.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EIG_FLOOR = 1e-12
HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-12
ORTHO_TOL = 1e-10

PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)
PAULIS = (PAULI_X, PAULI_Y, PAULI_Z)


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


@dataclass(frozen=True)
class SpectralDecomp:
    """Eigenvalues in descending order with matching orthonormal columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.conj().T

    @property
    def dim(self) -> int:
        return int(self.eigenvalues.shape[0])


# ---------------------------------------------------------------------------
# validation


def check_hermitian(m, tol: float = HERMITIAN_TOL, name: str = "matrix") -> np.ndarray:
    """Return ``m`` as a complex square array, symmetrized, or raise."""
    a = np.asarray(m, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
        raise ValidationError(f"{name} must be a non-empty square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} has non-finite entries")
    dev = np.max(np.abs(a - a.conj().T))
    if dev > tol * max(1.0, float(np.max(np.abs(a)))):
        raise ValidationError(f"{name} is not Hermitian (max deviation {dev:.3e})")
    return 0.5 * (a + a.conj().T)


def as_density(m, tol: float = HERMITIAN_TOL, name: str = "state") -> np.ndarray:
    """Validate a density matrix: Hermitian, unit trace, PSD up to the floor."""
    a = check_hermitian(m, tol=tol, name=name)
    tr = np.trace(a).real
    if abs(tr - 1.0) > max(TRACE_TOL, tol):
        raise ValidationError(f"{name} has trace {tr!r}, expected 1")
    w = np.linalg.eigvalsh(a)
    if w[0] < -max(EIG_FLOOR, tol):
        raise ValidationError(f"{name} has negative eigenvalue {w[0]:.3e}")
    return a


def check_orthonormal(basis, tol: float = ORTHO_TOL, name: str = "basis") -> np.ndarray:
    b = np.asarray(basis, dtype=complex)
    if b.ndim != 2 or b.shape[0] != b.shape[1]:
        raise ValidationError(f"{name} must be a square matrix of columns, got shape {b.shape}")
    dev = np.max(np.abs(b.conj().T @ b - np.eye(b.shape[0])))
    if dev > tol:
        raise ValidationError(f"{name} is not orthonormal (deviation {dev:.3e})")
    return b


# ---------------------------------------------------------------------------
# spectra


def _fix_phases(vecs: np.ndarray) -> np.ndarray:
    # make the largest-magnitude component of each column real and positive
    idx = np.argmax(np.abs(vecs) - 1e-12 * np.arange(vecs.shape[0])[:, None], axis=0)
    lead = vecs[idx, np.arange(vecs.shape[1])]
    return vecs * (np.abs(lead) / lead)[None, :]


def _eig_qubit(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = a[0, 1].real
    y = -a[0, 1].imag
    z = 0.5 * (a[0, 0].real - a[1, 1].real)
    c = 0.5 * (a[0, 0].real + a[1, 1].real)
    n = np.sqrt(x * x + y * y + z * z)
    if n < 1e-15:
        return np.array([c, c]), np.eye(2, dtype=complex)
    vals = np.array([c + n, c - n])
    # eigenvector of +n along Bloch direction (x,y,z)/n, the other is antipodal
    if z >= 0:
        up = np.array([n + z, x + 1j * y], dtype=complex)
    else:
        up = np.array([x - 1j * y, n - z], dtype=complex)
    up = up / np.linalg.norm(up)
    down = np.array([-np.conj(up[1]), np.conj(up[0])])
    return vals, np.column_stack([up, down])


def eig_hermitian(m, tol: float = HERMITIAN_TOL) -> SpectralDecomp:
    """Diagonalize a Hermitian matrix.

    Eigenvalues are returned in descending order.  Each eigenvector is
    scaled so that its largest-magnitude component is real and positive,
    which makes downstream belief updates reproducible.
    """
    a = check_hermitian(m, tol=tol)
    if a.shape[0] == 2:
        vals, vecs = _eig_qubit(a)
    else:
        vals, vecs = np.linalg.eigh(a)
        vals = vals[::-1]
        vecs = vecs[:, ::-1]
    return SpectralDecomp(np.asarray(vals, dtype=float), _fix_phases(vecs))


def spectrum(rho) -> np.ndarray:
    """Descending eigenvalues of a Hermitian matrix (no eigenvectors)."""
    a = np.asarray(rho)
    return np.linalg.eigvalsh(0.5 * (a + a.conj().T))[::-1]


# ---------------------------------------------------------------------------
# thermodynamic and information functionals


def gibbs_state(h, beta: float = 1.0) -> tuple[np.ndarray, float]:
    """Thermal state ``exp(-beta h)/Z`` and the equilibrium free energy ``-ln Z / beta``."""
    if not beta > 0:
        raise ValidationError(f"beta must be positive, got {beta!r}")
    a = check_hermitian(h, name="hamiltonian")
    e, v = np.linalg.eigh(a)
    shift = e.min()
    w = np.exp(-beta * (e - shift))
    z_shifted = w.sum()
    gamma = (v * (w / z_shifted)) @ v.conj().T
    f_eq = shift - np.log(z_shifted) / beta
    return 0.5 * (gamma + gamma.conj().T), float(f_eq)


def _xlogx(p: np.ndarray) -> np.ndarray:
    p = np.where(p > EIG_FLOOR, p, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)


def shannon_entropy(probs) -> float:
    """Shannon entropy in nats with ``0 ln 0 = 0``."""
    return float(-_xlogx(np.asarray(probs, dtype=float)).sum())


def von_neumann_entropy(rho) -> float:
    """-tr(rho ln rho) in nats; eigenvalues below the floor count as zero."""
    return shannon_entropy(spectrum(rho))


def relative_entropy(rho, sigma) -> float:
    """Quantum relative entropy ``D(rho||sigma)`` in nats.

    Returns ``inf`` when the support of ``rho`` is not contained in the
    support of ``sigma`` (judged with the eigenvalue floor).
    """
    r = np.asarray(rho, dtype=complex)
    s = np.asarray(sigma, dtype=complex)
    if r.shape != s.shape:
        raise ValidationError(f"shape mismatch {r.shape} vs {s.shape}")
    mu, v = np.linalg.eigh(0.5 * (s + s.conj().T))
    weights = np.real(np.einsum("ij,jk,ki->i", v.conj().T, r, v))
    live = mu > EIG_FLOOR
    if np.any((~live) & (weights > EIG_FLOOR)):
        return float("inf")
    cross = float(np.sum(weights[live] * np.log(mu[live])))
    neg_entropy = float(_xlogx(spectrum(r)).sum())
    return max(neg_entropy - cross, 0.0)


def fidelity(rho, sigma) -> float:
    """Uhlmann fidelity ``(tr sqrt(sqrt(rho) sigma sqrt(rho)))**2``.

    Eigenvalues below the floor are zeroed before the square roots, so
    rounding noise on rank-deficient states does not leak in as ``sqrt(1e-17)``.
    """
    r = np.asarray(rho, dtype=complex)
    s = np.asarray(sigma, dtype=complex)
    w, v = np.linalg.eigh(0.5 * (r + r.conj().T))
    sr = (v * np.sqrt(np.where(w > EIG_FLOOR, w, 0.0))) @ v.conj().T
    inner = sr @ s @ sr
    ev = np.linalg.eigvalsh(0.5 * (inner + inner.conj().T))
    return float(np.sum(np.sqrt(np.where(ev > EIG_FLOOR, ev, 0.0))) ** 2)


def pinch(rho, basis) -> np.ndarray:
    """Dephase ``rho`` in the orthonormal ``basis`` (columns)."""
    b = check_orthonormal(basis)
    r = np.asarray(rho, dtype=complex)
    diag = np.real(np.einsum("ji,jk,ki->i", b.conj(), r, b))
    return (b * diag) @ b.conj().T


def basis_populations(rho, basis) -> np.ndarray:
    """Diagonal ``<b_i|rho|b_i>`` of ``rho`` in the columns of ``basis``."""
    b = np.asarray(basis, dtype=complex)
    r = np.asarray(rho, dtype=complex)
    return np.real(np.einsum("ji,jk,ki->i", b.conj(), r, b))


def depolarize(rho, eps: float) -> np.ndarray:
    """``(1 - eps) rho + eps * I/d``."""
    if not 0.0 <= eps <= 1.0:
        raise ValidationError(f"depolarizing strength must lie in [0, 1], got {eps!r}")
    r = np.asarray(rho, dtype=complex)
    d = r.shape[0]
    return (1.0 - eps) * r + eps * np.eye(d) / d


def partial_trace(rho, dims: tuple[int, ...], keep: tuple[int, ...]) -> np.ndarray:
    """Reduced state on the subsystems listed in ``keep``."""
    n = len(dims)
    r = np.asarray(rho).reshape(tuple(dims) + tuple(dims))
    trace_out = [i for i in range(n) if i not in keep]
    for count, i in enumerate(sorted(trace_out, reverse=True)):
        m = n - count
        r = np.trace(r, axis1=i, axis2=i + m)
    d = int(np.prod([dims[i] for i in keep])) if keep else 1
    return r.reshape(d, d)


def kron_all(mats) -> np.ndarray:
    out = np.ones((1, 1), dtype=complex)
    for m in mats:
        out = np.kron(out, m)
    return out


# ---------------------------------------------------------------------------
# Bloch parametrization


def pure_state(theta: float, phi: float = 0.0) -> np.ndarray:
    """``|psi><psi|`` for ``cos(theta/2)|0> + exp(i phi) sin(theta/2)|1>``."""
    ket = np.array([np.cos(theta / 2), np.exp(1j * phi) * np.sin(theta / 2)])
    return np.outer(ket, ket.conj())


def ket_to_density(ket) -> np.ndarray:
    k = np.asarray(ket, dtype=complex)
    k = k / np.linalg.norm(k)
    return np.outer(k, k.conj())


def bloch_vector(rho) -> np.ndarray:
    """``(tr X rho, tr Y rho, tr Z rho)`` for a qubit."""
    r = np.asarray(rho, dtype=complex)
    if r.shape != (2, 2):
        raise ValidationError(f"Bloch vectors need a qubit state, got shape {r.shape}")
    return np.array([2 * r[0, 1].real, -2 * r[0, 1].imag, (r[0, 0] - r[1, 1]).real])


def bloch_angles(rho) -> tuple[float, float]:
    """Polar and azimuthal angles of a qubit's Bloch vector."""
    x, y, z = bloch_vector(rho)
    n = np.sqrt(x * x + y * y + z * z)
    if n < 1e-15:
        return 0.0, 0.0
    theta = float(np.arccos(np.clip(z / n, -1.0, 1.0)))
    phi = float(np.mod(np.arctan2(y, x), 2 * np.pi))
    return theta, phi


def density_from_bloch(b) -> np.ndarray:
    x, y, z = np.asarray(b, dtype=float)
    return 0.5 * np.array([[1 + z, x - 1j * y], [x + 1j * y, 1 - z]])


def bloch_basis(n) -> np.ndarray:
    """Orthonormal qubit basis whose first column has Bloch direction ``n``."""
    n = np.asarray(n, dtype=float)
    return eig_hermitian(density_from_bloch(n / np.linalg.norm(n))).eigenvectors


# ---------------------------------------------------------------------------
# random states


def haar_pure_ket(rng: np.random.Generator, dim: int = 2) -> np.ndarray:
    """Haar-random ket from normalized complex Gaussians."""
    g = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
    return g / np.linalg.norm(g)


def random_density(rng: np.random.Generator, dim: int = 2, rank: int | None = None) -> np.ndarray:
    """Random mixed state from a Ginibre matrix (Hilbert-Schmidt measure for full rank)."""
    k = dim if rank is None else rank
    g = rng.standard_normal((dim, k)) + 1j * rng.standard_normal((dim, k))
    r = g @ g.conj().T
    return r / np.trace(r).real


def random_unitary(rng: np.random.Generator, dim: int = 2) -> np.ndarray:
    g = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(g)
    d = np.diag(r)
    return q * (d / np.abs(d))[None, :]


# ---------------------------------------------------------------------------
# vectorized qubit helpers (arrays of Bloch vectors, last axis of size 3)


def binary_entropy(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return -(_xlogx(q) + _xlogx(1.0 - q))


def qubit_entropy_from_radius(radius) -> np.ndarray:
    """Von Neumann entropy of a qubit with Bloch radius ``radius``."""
    return binary_entropy(0.5 * (1.0 + np.clip(radius, 0.0, 1.0)))


def qubit_relative_entropy_to_pinch(b, n) -> np.ndarray:
    """``D(xi || Delta_n(xi))`` for Bloch vectors ``b`` and unit axes ``n``.

    The pinched state keeps only the component of ``b`` along ``n``.
    """
    b = np.asarray(b, dtype=float)
    proj = np.abs(np.sum(b * n, axis=-1))
    return qubit_entropy_from_radius(proj) - qubit_entropy_from_radius(np.linalg.norm(b, axis=-1))
