"""Mixed-model-equation kernel.

Solves the joint system for fixed effects and shrunken random effects,
either through the full symmetric coefficient matrix (Henderson form) or
through the confounder-projected normal equations (ridge form).  The two
routes are algebraically equivalent and serve as mutual oracles.

For p + B + L > 2N the solve switches to an N x N dual formulation via
the Woodbury identity, since genomic marker counts routinely dwarf the
number of observations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .core import PhenotypeDataset, RandomEffects, matrix_rank, stack_design


class SingularSystemError(RuntimeError):
    """Coefficient matrix not positive definite after jitter escalation."""


def chol_factor_jitter(A: np.ndarray, attempts: int = 3):
    """Cholesky with jitter escalation.

    On failure adds 1e-10 * mean(diag) to the diagonal, escalating by 10x
    up to ``attempts`` times.  Returns (factor, jitter_used).
    """
    try:
        return cho_factor(A, lower=True), 0.0
    except LinAlgError as exc:
        first_error = exc
    jitter = 1e-10 * float(np.mean(np.diag(A)))
    if jitter <= 0:
        jitter = 1e-10
    eye = np.eye(A.shape[0])
    for _ in range(attempts):
        try:
            return cho_factor(A + jitter * eye, lower=True), jitter
        except LinAlgError:
            jitter *= 10.0
    raise SingularSystemError(f"singular coefficient matrix: {first_error}") from first_error


def projection_apply(Z: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Apply the confounder-removing projection M_Z = I - Z (Z'Z)^{-1} Z'.

    Computed via a least-squares solve, so the N x N projector is never
    materialized.  ``v`` may be a vector or a matrix of columns.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    v = np.asarray(v, dtype=float)
    coef, _, rank, _ = np.linalg.lstsq(Z, v, rcond=1e-10)
    if rank < Z.shape[1]:
        raise SingularSystemError("projection requires full column rank Z")
    return v - Z @ coef


@dataclass(frozen=True)
class MmeSolution:
    """Solution of the mixed-model equations.

    ``C_diag`` holds the diagonal of the inverse coefficient matrix
    restricted to the random-effect block, which equals the diagonal of
    (X' M_Z X + Lambda)^{-1} by block inversion.
    """

    gamma_hat: np.ndarray  # (L,)
    u_hat: np.ndarray      # (p + B,)
    C_diag: np.ndarray     # (p + B,)

    def __post_init__(self):
        if not np.all(np.isfinite(self.u_hat)):
            raise SingularSystemError("non-finite random-effect estimates")


def _dual_threshold(n_obs: int, n_coef: int) -> bool:
    return n_coef > 2 * n_obs


def _ridge_core(y: np.ndarray, Z: np.ndarray, X: np.ndarray, lam: np.ndarray,
                want_cdiag: bool = False):
    """Shrinkage solution u = (X' M_Z X + Lambda)^{-1} X' M_Z y.

    Returns (u, C_diag or None).  Uses the Woodbury dual form when the
    coefficient count exceeds 2N.
    """
    lam = np.asarray(lam, dtype=float).ravel()
    m = X.shape[1]
    if lam.shape[0] != m:
        raise ValueError(f"Lambda has length {lam.shape[0]}, expected {m}")
    if np.any(lam <= 0):
        raise ValueError("Lambda entries must be positive")
    F = projection_apply(Z, X)
    w = projection_apply(Z, y)
    t = F.T @ w
    n = y.shape[0]
    if _dual_threshold(n, m + Z.shape[1]):
        inv_lam = 1.0 / lam
        S = np.eye(n) + (F * inv_lam) @ F.T
        factor, _ = chol_factor_jitter(S)
        u = inv_lam * (t - F.T @ cho_solve(factor, F @ (inv_lam * t)))
        C_diag = None
        if want_cdiag:
            T = cho_solve(factor, F)
            C_diag = inv_lam - (inv_lam ** 2) * np.einsum("ij,ij->j", F, T)
        return u, C_diag
    A = F.T @ F
    A[np.diag_indices_from(A)] += lam
    factor, _ = chol_factor_jitter(A)
    u = cho_solve(factor, t)
    C_diag = None
    if want_cdiag:
        C_diag = np.diag(cho_solve(factor, np.eye(m)))
    return u, C_diag


def block_lambda(ds: PhenotypeDataset, lambda_markers: np.ndarray | float,
                 sigma2_e: float, sigma2_b: float) -> np.ndarray:
    """Full shrinkage vector over p + B coordinates.

    Marker coordinates carry the supplied penalties; block coordinates
    carry sigma2_e / sigma2_b so the ridge and Henderson forms describe
    the same mixed model.
    """
    lam_g = np.broadcast_to(np.asarray(lambda_markers, dtype=float), (ds.n_markers,))
    lam_b = np.full(ds.n_blocks, sigma2_e / max(sigma2_b, 1e-12 * sigma2_e))
    return np.concatenate([lam_g, lam_b])


def solve_mme(ds: PhenotypeDataset, Lambda: np.ndarray) -> MmeSolution:
    """Solve the Henderson mixed-model equations.

    The symmetric system [[Z'Z, Z'X], [X'Z, X'X + Lambda]] [gamma; u] =
    [Z'y; X'y] is factorized by Cholesky (with jitter escalation).  In
    the dual regime the equivalent projected form is used and gamma is
    recovered from the first block row.
    """
    Lambda = np.asarray(Lambda, dtype=float).ravel()
    X = stack_design(ds)
    Z, y = ds.Z, ds.y
    L, m = Z.shape[1], X.shape[1]
    if Lambda.shape[0] != m:
        raise ValueError(f"Lambda has length {Lambda.shape[0]}, expected p+B={m}")
    if np.any(Lambda <= 0):
        raise ValueError("Lambda entries must be positive")
    if _dual_threshold(ds.n_obs, L + m):
        u, C_diag = _ridge_core(y, Z, X, Lambda, want_cdiag=True)
        gamma, *_ = np.linalg.lstsq(Z, y - X @ u, rcond=None)
        return MmeSolution(gamma_hat=gamma, u_hat=u, C_diag=C_diag)
    W = np.hstack([Z, X])
    A = W.T @ W
    A[L:, L:][np.diag_indices(m)] += Lambda
    rhs = W.T @ y
    factor, _ = chol_factor_jitter(A)
    sol = cho_solve(factor, rhs)
    inv_cols = cho_solve(factor, np.eye(L + m)[:, L:])
    return MmeSolution(gamma_hat=sol[:L], u_hat=sol[L:],
                       C_diag=np.diag(inv_cols[L:, :]))


def ridge_solution(ds: PhenotypeDataset, Lambda: np.ndarray) -> RandomEffects:
    """Random effects via the projected normal equations (ridge form)."""
    u, _ = _ridge_core(ds.y, ds.Z, stack_design(ds), Lambda)
    return RandomEffects(u_g=u[: ds.n_markers], u_b=u[ds.n_markers:])


def ridge_coefficients(y: np.ndarray, Z: np.ndarray, X: np.ndarray,
                       lam: np.ndarray | float) -> np.ndarray:
    """Raw ridge kernel on arbitrary response/design (used by stage two)."""
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (X.shape[1],))
    u, _ = _ridge_core(np.asarray(y, dtype=float), Z, X, lam)
    return u


def breeding_values(ds: PhenotypeDataset, u_g: np.ndarray) -> np.ndarray:
    """Genetic contribution of each observation's markers: Xg u_g."""
    u_g = np.asarray(u_g, dtype=float).ravel()
    if u_g.shape[0] != ds.n_markers:
        raise ValueError(f"u_g has length {u_g.shape[0]}, expected {ds.n_markers}")
    return ds.Xg @ u_g


def predict(ds: PhenotypeDataset, gamma_hat: np.ndarray, u: RandomEffects) -> np.ndarray:
    """Fitted phenotypes: Z gamma + Xg u_g + Xb u_b."""
    gamma_hat = np.asarray(gamma_hat, dtype=float).ravel()
    if gamma_hat.shape[0] != ds.n_confounders:
        raise ValueError("gamma_hat length does not match Z")
    if u.u_g.shape[0] != ds.n_markers or u.u_b.shape[0] != ds.n_blocks:
        raise ValueError("random-effect lengths do not match dataset")
    return ds.Z @ gamma_hat + ds.Xg @ u.u_g + ds.Xb @ u.u_b


def check_full_rank(Z: np.ndarray) -> None:
    if matrix_rank(Z) < Z.shape[1]:
        raise SingularSystemError("rank-deficient confounder matrix")
