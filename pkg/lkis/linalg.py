"""Dense linear algebra for DMD and the RSS loss.

Thin, deterministic wrappers around LAPACK (through scipy): the sign, ordering
and normalization conventions are fixed here so every downstream result is
reproducible.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ._utils import ConvergenceError, DegeneracyError, ShapeError, require_finite

logger = logging.getLogger(__name__)

# dbdsqr gives up after MAXITR * n^2 QR sweeps; geev after 30 * n iterations.
_SVD_MAXITR = 6
_EIG_MAXITR = 30

DEGENERACY_GAP = 1e-10
# |lambda| and singular values below sqrt(eps) of the largest count as zero
NULL_RTOL = float(np.sqrt(np.finfo(np.float64).eps))


@dataclass(frozen=True)
class SvdFactors:
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


@dataclass(frozen=True)
class ComplexEigenSystem:
    """Eigenvalues with right vectors w_i and left vectors z_i as columns."""

    eigenvalues: np.ndarray
    right_vectors: np.ndarray
    left_vectors: np.ndarray

    def __len__(self):
        return self.eigenvalues.shape[0]

    def gram(self) -> np.ndarray:
        """Z^H W; the identity once biorthonormalized."""
        return self.left_vectors.conj().T @ self.right_vectors


def as_matrix(M, name: str = "matrix") -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] < 1 or M.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {M.shape}")
    require_finite(M, name)
    return M


def svd(M) -> SvdFactors:
    """Thin SVD with each U column's largest-magnitude entry made non-negative."""
    M = as_matrix(M)
    try:
        U, S, Vt = scipy.linalg.svd(M, full_matrices=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        logger.debug("gesdd failed on %s matrix, retrying with gesvd", M.shape)
        try:
            U, S, Vt = scipy.linalg.svd(M, full_matrices=False, lapack_driver="gesvd")
        except np.linalg.LinAlgError as e:
            cap = _SVD_MAXITR * min(M.shape) ** 2
            raise ConvergenceError(f"SVD did not converge within {cap} QR sweeps", iterations=cap) from e

    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return SvdFactors(U=U * signs, S=S, V=Vt.T * signs)


def default_rank_tol(shape: tuple[int, int]) -> float:
    return max(shape) * np.finfo(np.float64).eps


def pinv(M, rank_tol: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudoinverse.

    Args:
        M: Real matrix.
        rank_tol: Relative cutoff; singular values <= rank_tol * S_max are
            treated as zero. Defaults to max(rows, cols) * machine epsilon.

    Returns:
        V diag(S+) U^T, of shape (cols, rows). An all-zero input gives the
        zero matrix.
    """
    M = as_matrix(M)
    if rank_tol is None:
        rank_tol = default_rank_tol(M.shape)
    if rank_tol < 0:
        raise ValueError(f"rank_tol must be non-negative, got {rank_tol}")
    f = svd(M)
    if f.S[0] == 0.0:
        return np.zeros((M.shape[1], M.shape[0]))
    keep = f.S > rank_tol * f.S[0]
    s_inv = np.zeros_like(f.S)
    s_inv[keep] = 1.0 / f.S[keep]
    return (f.V * s_inv) @ f.U.T


def _spectral_order(eigenvalues: np.ndarray) -> np.ndarray:
    # descending magnitude, then real part, then imaginary part
    return np.lexsort((-eigenvalues.imag, -eigenvalues.real, -np.abs(eigenvalues)))


def eig_general(M) -> ComplexEigenSystem:
    """Eigendecomposition of a real square matrix with left and right vectors.

    Left vectors satisfy z_i^H M = lambda_i z_i^H. Eigenvalues are sorted by
    descending magnitude, ties broken by descending real then imaginary part.
    """
    M = as_matrix(M)
    if M.shape[0] != M.shape[1]:
        raise ShapeError(f"eigendecomposition needs a square matrix, got {M.shape}")
    try:
        lam, vl, vr = scipy.linalg.eig(M, left=True, right=True)
    except np.linalg.LinAlgError as e:
        cap = _EIG_MAXITR * M.shape[0]
        raise ConvergenceError(f"QR iteration did not converge within {cap} iterations", iterations=cap) from e

    order = _spectral_order(lam)
    return ComplexEigenSystem(
        eigenvalues=lam[order].astype(np.complex128),
        right_vectors=vr[:, order].astype(np.complex128),
        left_vectors=vl[:, order].astype(np.complex128),
    )


def _check_gap(lam: np.ndarray, gap: float) -> None:
    diff = np.abs(lam[:, None] - lam[None, :])
    diff[np.diag_indices_from(diff)] = np.inf
    if diff.size and diff.min() < gap:
        i, j = np.unravel_index(np.argmin(diff), diff.shape)
        i, j = sorted((int(i), int(j)))
        raise DegeneracyError(
            f"eigenvalues {i} ({lam[i]:.6g}) and {j} ({lam[j]:.6g}) are closer than {gap:g}",
            pair=(i, j),
        )


def biorthonormalize(system: ComplexEigenSystem, gap: float = DEGENERACY_GAP) -> ComplexEigenSystem:
    """Rescale left vectors so that z_j^H w_i = delta_ij.

    Right vectors keep their unit norm. Raises DegeneracyError when two
    eigenvalues are closer than `gap`, since the pairing is then ill-defined.
    """
    lam = system.eigenvalues
    _check_gap(lam, gap)

    W = system.right_vectors
    Z = system.left_vectors
    d = np.einsum("ij,ij->j", Z.conj(), W)
    if np.any(np.abs(d) < np.finfo(np.float64).eps):
        i = int(np.argmin(np.abs(d)))
        raise DegeneracyError(f"left and right eigenvectors {i} are orthogonal", pair=(i, i))
    return ComplexEigenSystem(eigenvalues=lam, right_vectors=W, left_vectors=Z / d.conj())


def null_count(eigenvalues: np.ndarray, rtol: float = NULL_RTOL) -> int:
    """Number of eigenvalues with |lambda| <= rtol * max |lambda|."""
    mag = np.abs(eigenvalues)
    return int(np.count_nonzero(mag <= rtol * mag.max(initial=0.0)))


def eig_biorthonormal(M, gap: float = DEGENERACY_GAP, null_rtol: float = NULL_RTOL) -> ComplexEigenSystem:
    """Biorthonormal eigensystem of M that tolerates a rank-deficient M.

    Eigenvalues with |lambda| <= null_rtol * max |lambda| form the null
    cluster. It may be repeated: its eigenvalues become exact zeros and its
    right vectors an orthonormal basis of the null space of M, taken from the
    trailing right singular vectors. Left vectors are then the rows of W^-1,
    so Z^H W = I. The remaining eigenvalues must still be `gap` apart.

    Raises:
        DegeneracyError: two non-null eigenvalues are closer than `gap`, or
            the null cluster is defective (M has fewer than that many
            numerically zero singular values).
    """
    M = as_matrix(M)
    system = eig_general(M)
    c = null_count(system.eigenvalues, null_rtol)
    if c == 0:
        return biorthonormalize(system, gap)

    n = M.shape[0]
    live = n - c
    lam = system.eigenvalues.copy()
    _check_gap(lam[:live], gap)
    f = svd(M)
    if f.S[live] > null_rtol * f.S[0]:
        raise DegeneracyError(
            f"{c} eigenvalues are numerically zero but only {int(np.count_nonzero(f.S <= null_rtol * f.S[0]))} "
            "singular values are; the zero eigenvalue is defective",
            pair=(live, n - 1),
        )
    lam[live:] = 0.0
    W = np.hstack([system.right_vectors[:, :live], f.V[:, live:].astype(np.complex128)])
    try:
        Z = scipy.linalg.inv(W).conj().T
    except (np.linalg.LinAlgError, ValueError) as e:
        raise DegeneracyError("eigenvectors do not span the space", pair=(live, n - 1)) from e
    logger.debug("null cluster of %d eigenvalue(s) resolved on a %dx%d matrix", c, n, n)
    return ComplexEigenSystem(eigenvalues=lam, right_vectors=W, left_vectors=Z)
