"""Dense forward operators, their singular systems, and Gaussian noise.

Operators are plain 2-D float64 numpy arrays; :func:`as_operator` is the
validation gate every public function passes them through.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    DimMismatchError,
    NoConvergenceError,
    NotSymmetricError,
    ZeroOperatorError,
)

__all__ = [
    "NoiseModel",
    "SingularSystem",
    "as_operator",
    "build_singular_system",
    "jacobi_eigh",
    "normalize_operator",
    "power_iteration_norm",
    "radon_matrix",
    "sample_noise",
]


def as_operator(A, name: str = "operator") -> np.ndarray:
    """Return ``A`` as a finite 2-D float64 array or raise."""
    arr = np.asarray(A, dtype=np.float64)
    if arr.ndim != 2:
        raise DimMismatchError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _round_robin_pairs(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds of n/2 disjoint index pairs (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        p = np.array(players[: n // 2])
        q = np.array(players[n // 2 :][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _fix_signs(vectors: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    out = vectors.copy()
    for k in range(out.shape[1]):
        col = out[:, k]
        idx = np.flatnonzero(np.abs(col) > eps)
        if idx.size and col[idx[0]] < 0:
            out[:, k] = -col
    return out


def jacobi_eigh(M, tol: float = 1e-14, max_sweeps: int = 60):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations are scheduled round-robin so every round applies ``n/2``
    disjoint rotations at once; a sweep visits every off-diagonal pair once.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues descending and
    the first significant entry of every eigenvector positive.
    """
    A = as_operator(M, "M").copy()
    n, m = A.shape
    if n != m:
        raise NotSymmetricError(f"matrix must be square, got {A.shape}")
    scale = max(np.abs(A).max(), np.finfo(float).tiny)
    if np.abs(A - A.T).max() > 1e-12 * scale:
        raise NotSymmetricError("matrix is not symmetric within 1e-12 relative")
    if tol <= 0:
        raise ValueError("tol must be positive")
    A = 0.5 * (A + A.T)

    # an odd dimension gets a decoupled zero row/column as a bye
    padded = n % 2 == 1
    if padded:
        A = np.pad(A, ((0, 1), (0, 1)))
    N = A.shape[0]
    V = np.eye(N)
    fro = np.linalg.norm(A)
    if fro == 0.0 or N == 1:
        w, vecs = np.diag(A)[:n].copy(), np.eye(n)
        order = np.argsort(-w, kind="stable")
        return w[order], vecs[:, order]

    rounds = _round_robin_pairs(N)

    offdiag = ~np.eye(N, dtype=bool)

    def off_norm(B):
        return np.linalg.norm(B[offdiag])

    converged = off_norm(A) <= tol * fro
    sweeps = 0
    while not converged:
        if sweeps >= max_sweeps:
            raise NoConvergenceError(
                f"Jacobi did not converge in {max_sweeps} sweeps "
                f"(off-diagonal {off_norm(A):.3e}, target {tol * fro:.3e})"
            )
        for p, q in rounds:
            apq = A[p, q]
            app = A[p, p]
            aqq = A[q, q]
            active = np.abs(apq) > 1e-300
            if not np.any(active):
                continue
            safe = np.where(active, apq, 1.0)
            theta = (aqq - app) / (2.0 * safe)
            big = np.abs(theta) > 1e150
            theta_s = np.where(big, 1.0, theta)
            t = np.sign(theta_s) / (np.abs(theta_s) + np.sqrt(theta_s * theta_s + 1.0))
            t = np.where(big, 0.5 / np.where(big, theta, 1.0), t)
            t = np.where(theta == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)

            Ap, Aq = A[p, :], A[q, :]
            A[p, :], A[q, :] = c[:, None] * Ap - s[:, None] * Aq, s[:, None] * Ap + c[:, None] * Aq
            Ap, Aq = A[:, p], A[:, q]
            A[:, p], A[:, q] = Ap * c - Aq * s, Ap * s + Aq * c
            A[p, q] = 0.0
            A[q, p] = 0.0
            Vp, Vq = V[:, p], V[:, q]
            V[:, p], V[:, q] = Vp * c - Vq * s, Vp * s + Vq * c
        sweeps += 1
        converged = off_norm(A) <= tol * fro

    w = np.diag(A).copy()
    if padded:
        # the bye index stays decoupled: its row/column are never mixed in
        keep = np.arange(N) != N - 1
        w, V = w[keep], V[np.ix_(keep, keep)]
    order = np.argsort(-w, kind="stable")
    return w[order], _fix_signs(V[:, order])


@dataclass(frozen=True)
class SingularSystem:
    """Singular system of a forward operator ``A_tilde``.

    ``sigma_sq`` are the eigenvalues of the normal operator ``A_tilde.T @
    A_tilde`` (descending), ``v`` its orthonormal eigenvectors as columns and
    ``u`` the matching left vectors ``A_tilde v_j / sigma_j``.
    """

    sigma_sq: np.ndarray
    v: np.ndarray
    u: np.ndarray
    null_dim: int = 0
    zero_threshold: float = 1e-10
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def n(self) -> int:
        return self.sigma_sq.shape[0]

    @property
    def dim(self) -> int:
        return self.v.shape[0]

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.sigma_sq)

    def coefficients(self, X) -> np.ndarray:
        """Coefficients <x, v_j> for a vector (d,) or a batch (N, d)."""
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.dim:
            raise DimMismatchError(f"expected last axis {self.dim}, got {X.shape}")
        return X @ self.v

    def synthesize(self, C) -> np.ndarray:
        """Inverse of :meth:`coefficients` restricted to the retained modes."""
        C = np.asarray(C, dtype=np.float64)
        if C.shape[-1] != self.n:
            raise DimMismatchError(f"expected last axis {self.n}, got {C.shape}")
        return C @ self.v.T

    def apply_normal(self, X) -> np.ndarray:
        """``A x`` with ``A = A_tilde.T A_tilde`` evaluated through the eigenpairs."""
        return self.synthesize(self.coefficients(X) * self.sigma_sq)

    def data_coefficients(self, Y) -> np.ndarray:
        """``sigma_j <y, u_j>``, i.e. the coefficients of ``A_tilde.T y``."""
        Y = np.asarray(Y, dtype=np.float64)
        if Y.shape[-1] != self.u.shape[0]:
            raise DimMismatchError(f"expected last axis {self.u.shape[0]}, got {Y.shape}")
        return (Y @ self.u) * self.sigma

    def project(self, X) -> np.ndarray:
        """Orthogonal projection onto the span of the retained modes."""
        return self.synthesize(self.coefficients(X))

    @classmethod
    def diagonal(cls, sigma_sq) -> "SingularSystem":
        """System of ``diag(sqrt(sigma_sq))`` with the canonical basis."""
        s2 = np.asarray(sigma_sq, dtype=np.float64)
        eye = np.eye(s2.shape[0])
        return cls(sigma_sq=s2, v=eye, u=eye.copy())


def build_singular_system(A_tilde, zero_threshold: float = 1e-10, method: str = "jacobi",
                          tol: float = 1e-14, max_sweeps: int = 60) -> SingularSystem:
    """Eigendecompose ``A_tilde.T @ A_tilde`` and keep modes with sigma^2 > zero_threshold.

    ``method="lapack"`` swaps the Jacobi solver for ``numpy.linalg.eigh``;
    signs and ordering follow the same convention either way.
    """
    A = as_operator(A_tilde, "A_tilde")
    if not np.any(A):
        raise ZeroOperatorError("operator is identically zero")
    normal = A.T @ A
    normal = 0.5 * (normal + normal.T)
    if method == "jacobi":
        w, V = jacobi_eigh(normal, tol=tol, max_sweeps=max_sweeps)
    elif method == "lapack":
        w, V = np.linalg.eigh(normal)
        order = np.argsort(-w, kind="stable")
        w, V = w[order], _fix_signs(V[:, order])
    else:
        raise ValueError(f"unknown method {method!r}")
    keep = w > zero_threshold
    sigma_sq, v = w[keep], V[:, keep]
    u = (A @ v) / np.sqrt(sigma_sq)
    return SingularSystem(
        sigma_sq=sigma_sq,
        v=v,
        u=u,
        null_dim=int(A.shape[1] - keep.sum()),
        zero_threshold=zero_threshold,
    )


def power_iteration_norm(A, max_iter: int = 500, rtol: float = 1e-14, seed: int = 0) -> float:
    """Spectral norm of ``A`` from power iteration on ``A.T @ A``."""
    A = as_operator(A)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(A.shape[1])
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(max_iter):
        y = A.T @ (A @ x)
        nrm = np.linalg.norm(y)
        if nrm == 0.0:
            return 0.0
        x = y / nrm
        new = np.sqrt(nrm)
        if est > 0 and abs(new - est) <= rtol * new:
            est = new
            break
        est = new
    return float(np.linalg.norm(A @ x))


def normalize_operator(A_tilde, max_iter: int = 500, rtol: float = 1e-14):
    """Scale ``A_tilde`` to unit spectral norm; returns ``(scaled, scale)``."""
    A = as_operator(A_tilde, "A_tilde")
    if not np.any(A):
        raise ZeroOperatorError("operator is identically zero")
    scale = power_iteration_norm(A, max_iter=max_iter, rtol=rtol)
    if scale == 0.0:
        raise ZeroOperatorError("operator has zero spectral norm")
    return A / scale, scale


def _siddon_row(theta: float, offset: float, img_side: int, pixel: float):
    """Pixel indices and chord lengths of one parallel-beam ray."""
    half = img_side * pixel / 2.0
    c, s = np.cos(theta), np.sin(theta)
    # ray: p(t) = offset * (c, s) + t * (-s, c)
    p0 = np.array([offset * c, offset * s])
    d = np.array([-s, c])
    t_lo, t_hi = -np.inf, np.inf
    for k in range(2):
        if abs(d[k]) < 1e-15:
            if not (-half <= p0[k] < half):
                return np.empty(0, dtype=np.intp), np.empty(0)
        else:
            a = (-half - p0[k]) / d[k]
            b = (half - p0[k]) / d[k]
            t_lo, t_hi = max(t_lo, min(a, b)), min(t_hi, max(a, b))
    if t_hi <= t_lo:
        return np.empty(0, dtype=np.intp), np.empty(0)
    params = [np.array([t_lo, t_hi])]
    grid = -half + pixel * np.arange(img_side + 1)
    for k in range(2):
        if abs(d[k]) >= 1e-15:
            tk = (grid - p0[k]) / d[k]
            params.append(tk[(tk > t_lo) & (tk < t_hi)])
    ts = np.unique(np.concatenate(params))
    lengths = np.diff(ts)
    mids = 0.5 * (ts[:-1] + ts[1:])
    px = p0[0] + mids * d[0]
    py = p0[1] + mids * d[1]
    col = np.floor((px + half) / pixel).astype(np.intp)
    # image row 0 is the top edge (largest y)
    row = img_side - 1 - np.floor((py + half) / pixel).astype(np.intp)
    ok = (lengths > 0) & (col >= 0) & (col < img_side) & (row >= 0) & (row < img_side)
    return row[ok] * img_side + col[ok], lengths[ok]


def radon_matrix(img_side: int = 28, n_angles: int = 30, n_detectors: int = 41,
                 pixel_size: float = 1.0) -> np.ndarray:
    """Parallel-beam Radon system matrix with exact ray/pixel chord lengths.

    Rows are ordered ``angle * n_detectors + detector``; columns follow the
    row-major flattening of an ``img_side x img_side`` image. Angles are
    ``a * pi / n_angles``; the detector array is centered on the image and
    spans the image diagonal.
    """
    if min(img_side, n_angles, n_detectors) < 1:
        raise ValueError("img_side, n_angles and n_detectors must be >= 1")
    width = img_side * pixel_size
    spacing = width * np.sqrt(2.0) / n_detectors
    offsets = (np.arange(n_detectors) - (n_detectors - 1) / 2.0) * spacing
    M = np.zeros((n_angles * n_detectors, img_side * img_side))
    for a in range(n_angles):
        theta = a * np.pi / n_angles
        for d, off in enumerate(offsets):
            idx, lengths = _siddon_row(theta, off, img_side, pixel_size)
            np.add.at(M[a * n_detectors + d], idx, lengths)
    return M


@dataclass(frozen=True)
class NoiseModel:
    """I.i.d. zero-mean Gaussian noise; ``delta`` is the per-coordinate standard deviation."""

    delta: float
    seed: int = 0

    def __post_init__(self):
        if not self.delta >= 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def sample_noise(model: NoiseModel, dim, rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw noise of shape ``dim`` (int or tuple).

    Without ``rng`` a fresh generator is seeded from ``model.seed``; pass one
    explicitly to continue a call sequence.
    """
    shape = (dim,) if np.isscalar(dim) else tuple(dim)
    if any(s < 1 for s in shape):
        raise ValueError("dim must be >= 1")
    if rng is None:
        rng = model.rng()
    if model.delta == 0:
        return np.zeros(shape)
    return model.delta * rng.standard_normal(shape)
