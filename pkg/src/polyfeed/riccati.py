"""Stabilizing solution of  A^T P + P A + I - (1/alpha) P B B^T P = 0.

Newton-Kleinman iteration; each Newton step is a Lyapunov solve by the
Bartels-Stewart method on the complex Schur form of the closed-loop matrix.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import IterationError, SynthesisError, ValidationError
from .model import QuadraticControlSystem

log = logging.getLogger(__name__)

# schur_form returns the complex upper-triangular Schur form
SCHUR_KIND = "complex"


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    Pi: np.ndarray
    A_pi: np.ndarray
    spectral_abscissa: float
    residual_norm: float
    iterations: int = 0


def schur_form(M):
    """M = Q T Q^H with Q unitary and T upper triangular (complex Schur form)."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValidationError(f"schur_form needs a square matrix, got {M.shape}")
    try:
        T, Q = scipy.linalg.schur(M, output="complex")
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise IterationError(f"Schur decomposition failed: {exc}") from None
    return Q, T


def lyap_solve(A, Q) -> np.ndarray:
    """Solve A^T X + X A + Q = 0 (Bartels-Stewart, complex Schur)."""
    A = np.asarray(A, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    n = A.shape[0]
    Z, U = schur_form(A)
    # Xh = Z^T X Z satisfies U^T Xh + Xh U = -Z^T Q Z
    Qh = Z.T @ Q @ Z
    Xh = np.zeros((n, n), dtype=complex)
    Ut = U.T
    for c in range(n):
        rhs = -Qh[:, c] - Xh[:, :c] @ U[:c, c]
        Xh[:, c] = scipy.linalg.solve_triangular(Ut + U[c, c] * np.eye(n), rhs, lower=True)
    X = (Z.conj() @ Xh @ Z.conj().T).real
    return 0.5 * (X + X.T)


def closed_loop(sys: QuadraticControlSystem, Pi) -> np.ndarray:
    """A_pi = A - (1/alpha) B B^T Pi."""
    Pi = np.asarray(Pi, dtype=np.float64)
    if Pi.shape != (sys.n, sys.n):
        raise ValidationError(f"Pi must have shape ({sys.n},{sys.n}), got {Pi.shape}")
    return sys.A - sys.B @ (sys.B.T @ Pi) / sys.alpha


def are_residual(sys: QuadraticControlSystem, Pi) -> float:
    """Frobenius norm of A^T Pi + Pi A + I - (1/alpha) Pi B B^T Pi."""
    PB = Pi @ sys.B
    R = sys.A.T @ Pi + Pi @ sys.A + np.eye(sys.n) - PB @ PB.T / sys.alpha
    return float(np.linalg.norm(R))


def spectral_abscissa(M) -> float:
    return float(np.max(np.linalg.eigvals(M).real))


def check_stabilizable(A, B, rtol: float = 1e-10) -> None:
    """Eigenvalue-wise rank test of [A - lam I, B] for every Re(lam) >= 0."""
    n = A.shape[0]
    scale = max(1.0, np.linalg.norm(np.hstack([A, B]), 2))
    for lam in np.linalg.eigvals(A):
        if lam.real < 0:
            continue
        pencil = np.hstack([A - lam * np.eye(n), B.astype(complex)])
        smin = np.linalg.svd(pencil, compute_uv=False)[-1] if n else 1.0
        if smin <= rtol * scale:
            raise SynthesisError(
                f"(A, B) is not stabilizable: eigenvalue {lam:.6g} is uncontrollable", lam
            )


def initial_gain(A, B) -> np.ndarray:
    """A gain K with A - B K Hurwitz, moving only the unstable eigenvalues.

    The unstable part of the ordered Schur form is mirrored into the open
    left half plane through the anti-stable Lyapunov solve
    (U2 + s I) X + X (U2 + s I)^H = B2 B2^H,  K2 = B2^H X^-1.
    """
    n, m = B.shape
    if spectral_abscissa(A) < 0:
        return np.zeros((m, n))
    T, Z, sdim = scipy.linalg.schur(A, output="complex", sort=lambda x: x.real < 0)
    U2 = T[sdim:, sdim:]
    Z2 = Z[:, sdim:]
    B2 = Z2.conj().T @ B
    shift = 1e-3 * max(1.0, np.linalg.norm(A, 2))
    M = U2 + shift * np.eye(n - sdim)
    X = scipy.linalg.solve_continuous_lyapunov(M, B2 @ B2.conj().T)
    K = (B2.conj().T @ np.linalg.solve(X, Z2.conj().T)).real
    if spectral_abscissa(A - B @ K) >= 0:
        raise IterationError("pole relocation failed to produce a stabilizing gain")
    return K


def solve_are(sys: QuadraticControlSystem, tol: float = 1e-11, max_iter: int = 50) -> RiccatiSolution:
    """Stabilizing Riccati solution by Newton-Kleinman.

    Stops once ``|residual|_F <= tol * (1 + |Pi|_F^2)``.
    """
    A, B, alpha = sys.A, sys.B, sys.alpha
    check_stabilizable(A, B)
    K = initial_gain(A, B)
    n = sys.n
    Pi = None
    best, best_Pi = np.inf, None
    for it in range(1, max_iter + 1):
        Ak = A - B @ K
        Pi = lyap_solve(Ak, np.eye(n) + alpha * K.T @ K)
        K = B.T @ Pi / alpha
        res = are_residual(sys, Pi)
        bound = tol * (1.0 + np.linalg.norm(Pi) ** 2)
        log.debug("newton-kleinman step %d: residual %.3e (bound %.3e)", it, res, bound)
        if res >= 0.5 * best and best <= bound:
            # converged to rounding level; keep the better iterate
            break
        if res < best:
            best, best_Pi = res, Pi
    Pi = best_Pi
    res = are_residual(sys, Pi)
    if not np.all(np.isfinite(Pi)) or res > tol * (1.0 + np.linalg.norm(Pi) ** 2):
        raise IterationError(f"Newton-Kleinman did not converge (residual {res:.3e})")
    A_pi = closed_loop(sys, Pi)
    abscissa = spectral_abscissa(A_pi)
    if abscissa >= 0:
        raise IterationError(f"Riccati solution is not stabilizing (abscissa {abscissa:.3e})")
    return RiccatiSolution(Pi, A_pi, abscissa, res, it)
