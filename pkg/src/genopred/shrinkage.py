"""Heteroscedastic shrinkage estimators built on per-marker variances.

Two routes to marker-specific ridge penalties: a one-way-ANOVA moment
estimator of each marker's variance share, and an EM-style iteration
that refines per-marker variances from the current mixed-model solve.
Both are parameterized by a base set of variance components, so the
same code yields the classical variants (likelihood-type base) and the
robust variants (Huber-type base).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import PhenotypeDataset, VarianceComponents, variance_floor
from .mme import MmeSolution, solve_mme


class ShrinkageError(RuntimeError):
    pass


@dataclass(frozen=True)
class AnovaSummary:
    """One-way ANOVA of the phenotype grouped by one marker's level."""

    mqm: float                 # between-level mean square
    mqe: float                 # within-level mean square
    group_sizes: np.ndarray    # observations per nonempty level

    def __post_init__(self):
        object.__setattr__(self, "group_sizes",
                           np.asarray(self.group_sizes, dtype=int).ravel())


def anova_per_marker(ds: PhenotypeDataset, j: int) -> AnovaSummary:
    """Between/within mean squares of y grouped by marker j's level."""
    if not 0 <= j < ds.n_markers:
        raise IndexError(f"marker index {j} out of range")
    codes = ds.Xg[:, j]
    y = ds.y
    levels = [y[codes == c] for c in ds.coding if np.any(codes == c)]
    k = len(levels)
    if k < 2:
        raise ShrinkageError(f"marker {j} is constant across all observations")
    grand = float(np.mean(y))
    ssb = sum(g.size * (float(np.mean(g)) - grand) ** 2 for g in levels)
    ssw = sum(float(np.sum((g - np.mean(g)) ** 2)) for g in levels)
    n = y.size
    return AnovaSummary(
        mqm=ssb / (k - 1),
        mqe=ssw / (n - k) if n > k else 0.0,
        group_sizes=np.array([g.size for g in levels]),
    )


def marker_moment_variances(ds: PhenotypeDataset) -> np.ndarray:
    """Raw per-marker moment estimates (MQM - MQE) / (0.5 (N - sum n_i^2/N)).

    Constant markers and negative moments are handled by the caller via
    flooring; this returns the unfloored values (NaN for constant
    markers).  Vectorized over markers, grouping by the marker alphabet.
    """
    N = ds.n_obs
    y = ds.y
    p = ds.n_markers
    grand = float(np.mean(y))
    sst = float(np.sum((y - grand) ** 2))
    counts = np.zeros((len(ds.coding), p))
    sums = np.zeros((len(ds.coding), p))
    for ci, code in enumerate(ds.coding):
        mask = ds.Xg == code
        counts[ci] = mask.sum(axis=0)
        sums[ci] = mask.T @ y
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    ssb = np.sum(counts * (means - grand) ** 2, axis=0)
    ssw = sst - ssb
    k = (counts > 0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mqm = np.where(k > 1, ssb / np.maximum(k - 1, 1), np.nan)
        mqe = np.where(N > k, ssw / np.maximum(N - k, 1), 0.0)
    denom = 0.5 * (N - np.sum(counts ** 2, axis=0) / N)
    with np.errstate(invalid="ignore", divide="ignore"):
        est = np.where(denom > 0, (mqm - mqe) / denom, np.nan)
    return est


def rmla_shrinkage(ds: PhenotypeDataset, base: VarianceComponents) -> np.ndarray:
    """ANOVA-moment shrinkage: each marker's penalty is inversely
    proportional to its floored moment variance, scaled by the base
    error-to-total-genetic variance ratio."""
    if base.sigma2_u_total is None or base.sigma2_u_total <= 0:
        raise ShrinkageError("base fit must supply a positive total genetic variance")
    raw = marker_moment_variances(ds)
    floor = variance_floor(raw[np.isfinite(raw)])
    est = np.where(np.isfinite(raw), raw, floor)
    est = np.maximum(est, floor)
    if np.all(est <= floor):
        warnings.warn("no marker variance signal: all moment estimates at floor",
                      RuntimeWarning, stacklevel=2)
    return (base.sigma2_e / base.sigma2_u_total) * (est.sum() / est)


def rmla_variances(ds: PhenotypeDataset) -> np.ndarray:
    """Floored per-marker moment variances (for reporting/heritability)."""
    raw = marker_moment_variances(ds)
    floor = variance_floor(raw[np.isfinite(raw)])
    return np.maximum(np.where(np.isfinite(raw), raw, floor), floor)


def rmlv_fit(ds: PhenotypeDataset, base: VarianceComponents,
             max_iter: int = 50, tol: float = 1e-5,
             literal_update: bool = False,
             ) -> tuple[np.ndarray, VarianceComponents, MmeSolution, bool]:
    """EM-style heteroscedastic fit.

    Iterates: mixed-model solve at the current penalties; residual
    variance from the quadratic identity; per-marker variance update
    s2_gj = u_j^2 + s2_e C_jj (the EM form guaranteeing nonnegativity);
    penalties lambda_j = s2_e / s2_gj.  ``literal_update`` switches to
    the published moment form (u_j^2 - s2_e C_jj) / j for comparison;
    it yields negative variances on most inputs and is floored hard.

    Returns (lambda, variance components, MME solution, converged);
    non-convergence returns the last iterate with the flag false.
    """
    p, B = ds.n_markers, ds.n_blocks
    N = ds.n_obs
    s2_e = base.sigma2_e
    s2_b = max(base.sigma2_b, 1e-8 * s2_e)
    if base.heteroscedastic:
        s2_gj = np.maximum(np.asarray(base.sigma2_g, dtype=float),
                           variance_floor(base.sigma2_g))
    else:
        s2_g0 = base.sigma2_g if base.sigma2_g > 0 else 1e-4 * s2_e
        s2_gj = np.full(p, s2_g0)
    lam = s2_e / s2_gj

    X = np.hstack([ds.Xg, ds.Xb])
    Xty = X.T @ ds.y
    Zty = ds.Z.T @ ds.y
    yty = float(ds.y @ ds.y)

    sol = None
    converged = False
    for _ in range(max_iter):
        full_lambda = np.concatenate([lam, np.full(B, s2_e / s2_b)])
        sol = solve_mme(ds, full_lambda)
        s2_e_new = (yty - float(sol.gamma_hat @ Zty) - float(sol.u_hat @ Xty)) / (N - 1)
        if s2_e_new <= 0:
            raise ShrinkageError(
                f"nonpositive residual variance {s2_e_new:.3g} in EM iteration")
        u_g = sol.u_hat[:p]
        c_g = sol.C_diag[:p]
        if literal_update:
            idx = np.arange(1, p + 1, dtype=float)
            s2_gj_new = (u_g ** 2 - s2_e_new * c_g) / idx
        else:
            s2_gj_new = u_g ** 2 + s2_e_new * c_g
        floor = variance_floor(s2_gj_new)
        s2_gj_new = np.maximum(s2_gj_new, floor)
        lam_new = s2_e_new / s2_gj_new

        prev = np.concatenate([[s2_e], s2_gj])
        cur = np.concatenate([[s2_e_new], s2_gj_new])
        rel = np.max(np.abs(cur - prev) / np.maximum(np.abs(prev), 1e-12))
        s2_e, s2_gj, lam = s2_e_new, s2_gj_new, lam_new
        if rel < tol:
            converged = True
            break

    vc = VarianceComponents(sigma2_g=s2_gj, sigma2_b=s2_b, sigma2_e=s2_e)
    if sol is None:
        sol = solve_mme(ds, np.concatenate([lam, np.full(B, s2_e / s2_b)]))
    return lam, vc, sol, converged
