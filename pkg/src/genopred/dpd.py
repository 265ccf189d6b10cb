"""Minimum density power divergence estimation for the replicated LMM.

The phenotype vector of each replicate is one multivariate-normal
observation with covariance V_k assembled from the residual, marker and
block variance components; the estimator minimizes the averaged
divergence objective over the fixed effects and log-variances.  The
tuning parameter alpha trades efficiency for outlier resistance; alpha 0
dispatches to the exact Gaussian maximum-likelihood fit of the same
model.

The per-replicate objective term is

    (2 pi)^(-n a/2) |V|^(-a/2) [ (1+a)^(-n/2)
        - (1 + 1/a) exp(-(a/2) (y - Z g)' V^{-1} (y - Z g)) ]

with the exact multivariate-normal power integrals as constants.  Terms
are evaluated in log space and, inside the optimizer, rescaled by a
constant factor so they stay representable when n_k is large.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize

from .core import (DataValidationError, FitDiagnostics, FitResult,
                   PhenotypeDataset, VarianceComponents)
from .heritability import heritability
from .mme import (SingularSystemError, block_lambda, breeding_values,
                  chol_factor_jitter, predict, ridge_solution)

SIMPLEX_DIM_LIMIT = 20
LOG_VARIANCE_SPAN = 27.631021115928547  # ln(1e12)


@dataclass(frozen=True)
class DpdConfig:
    """Tuning of the divergence objective and its optimizer.

    Variances are always optimized on the log scale.  ``optimizer`` is
    "auto" (simplex up to 20 parameters, quasi-Newton with a numeric
    gradient beyond), "nelder-mead" or "bfgs".
    """

    alpha: float = 1.0
    optimizer: str = "auto"
    max_iter: int = 4000
    obj_tol: float = 1e-12
    param_tol: float = 1e-8

    def __post_init__(self):
        if self.alpha < 0:
            raise DataValidationError("alpha must be >= 0")
        if self.optimizer not in ("auto", "nelder-mead", "bfgs"):
            raise DataValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.obj_tol <= 0 or self.param_tol <= 0 or self.max_iter < 1:
            raise DataValidationError("tolerances and max_iter must be positive")


@dataclass(frozen=True)
class CovarianceAssembly:
    """Per-replicate covariances with cached Cholesky factors."""

    per_replicate: tuple  # of (V, chol_lower, logdet)

    @property
    def logdets(self) -> list[float]:
        return [entry[2] for entry in self.per_replicate]


class CovarianceBuilder:
    """Caches replicate row-blocks and Gram matrices of one dataset so
    repeated covariance assemblies only pay for the Cholesky."""

    def __init__(self, ds: PhenotypeDataset):
        self.ds = ds
        self.slices = ds.replicate_slices()
        self.Z_blocks = [ds.Z[sl] for sl in self.slices]
        self.y_blocks = [ds.y[sl] for sl in self.slices]
        self.marker_grams = [ds.Xg[sl] @ ds.Xg[sl].T for sl in self.slices]
        self.block_grams = [ds.Xb[sl] @ ds.Xb[sl].T for sl in self.slices]

    def assemble(self, vc: VarianceComponents) -> CovarianceAssembly:
        if vc.heteroscedastic:
            raise DataValidationError(
                "covariance assembly requires a homoscedastic marker variance")
        entries = []
        for Gk, Bk in zip(self.marker_grams, self.block_grams):
            n_k = Gk.shape[0]
            V = vc.sigma2_g * Gk + vc.sigma2_b * Bk
            V[np.diag_indices(n_k)] += vc.sigma2_e
            (factor, _), _jit = chol_factor_jitter(V)
            logdet = 2.0 * float(np.sum(np.log(np.diag(factor))))
            entries.append((V, factor, logdet))
        return CovarianceAssembly(per_replicate=tuple(entries))

    def quad_forms(self, assembly: CovarianceAssembly, gamma: np.ndarray) -> list[float]:
        """Residual quadratic forms (y_k - Z_k gamma)' V_k^{-1} (...)."""
        out = []
        for (V, factor, _), Zk, yk in zip(assembly.per_replicate, self.Z_blocks, self.y_blocks):
            resid = yk - Zk @ gamma
            half = solve_triangular(factor, resid, lower=True)
            out.append(float(half @ half))
        return out


def assemble_covariance(ds: PhenotypeDataset, vc: VarianceComponents) -> CovarianceAssembly:
    """V_k = sigma2_e I + sigma2_g Xg_k Xg_k' + sigma2_b Xb_k Xb_k' per
    replicate row-block, with cached Cholesky factors and log-dets."""
    return CovarianceBuilder(ds).assemble(vc)


def _term_logs(n_k: int, logdet: float, q: float, alpha: float) -> tuple[float, float]:
    """Log magnitudes of the two positive parts of one replicate term."""
    base = -0.5 * n_k * alpha * math.log(2.0 * math.pi) - 0.5 * alpha * logdet
    s1 = base - 0.5 * n_k * math.log1p(alpha)
    s2 = base + math.log1p(1.0 / alpha) - 0.5 * alpha * q
    return s1, s2


def _exp_diff(s1: float, s2: float) -> float:
    """exp(s1) - exp(s2) without cancellation; +-inf on overflow."""
    hi, lo, sign = (s1, s2, 1.0) if s1 >= s2 else (s2, s1, -1.0)
    try:
        return sign * math.exp(hi) * -math.expm1(lo - hi)
    except OverflowError:
        return sign * math.inf


def _dpd_terms(builder: CovarianceBuilder, gamma: np.ndarray, vc: VarianceComponents,
               alpha: float, shift: float = 0.0) -> list[float]:
    assembly = builder.assemble(vc)
    quads = builder.quad_forms(assembly, gamma)
    terms = []
    for (V, _, logdet), q, n_k in zip(
            assembly.per_replicate, quads, (b.shape[0] for b in builder.y_blocks)):
        s1, s2 = _term_logs(n_k, logdet, q, alpha)
        term = _exp_diff(s1 + shift, s2 + shift)
        # The exponential factor lies in (0, 1], so each term is bounded
        # below by the q -> 0 value of its bracket.
        bound = _exp_diff(s1 + shift, s2 + shift + 0.5 * alpha * q)
        assert term >= bound - 1e-12 * abs(bound) - 1e-300
        terms.append(term)
    return terms


def dpd_objective(ds: PhenotypeDataset, gamma: np.ndarray, vc: VarianceComponents,
                  alpha: float) -> float:
    """Averaged divergence objective H(theta) over the replicates.

    Requires alpha > 0; the alpha -> 0 limit is the Gaussian likelihood,
    exposed through :func:`gaussian_nll`.
    """
    if alpha <= 0:
        raise DataValidationError("dpd_objective requires alpha > 0")
    gamma = np.asarray(gamma, dtype=float).ravel()
    builder = CovarianceBuilder(ds)
    terms = _dpd_terms(builder, gamma, vc, alpha)
    return math.fsum(terms) / len(terms)


def gaussian_nll(ds: PhenotypeDataset, gamma: np.ndarray, vc: VarianceComponents) -> float:
    """Average negative log-likelihood of the same replicate model."""
    gamma = np.asarray(gamma, dtype=float).ravel()
    builder = CovarianceBuilder(ds)
    assembly = builder.assemble(vc)
    quads = builder.quad_forms(assembly, gamma)
    total = 0.0
    for (V, _, logdet), q in zip(assembly.per_replicate, quads):
        n_k = V.shape[0]
        total += 0.5 * (n_k * math.log(2.0 * math.pi) + logdet + q)
    return total / len(quads)


def numeric_gradient(f, x: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient with per-coordinate relative steps."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (f(xp) - f(xm)) / (2.0 * h)
    return grad


def robust_scale(values: np.ndarray) -> float:
    """Normal-consistent median-absolute-deviation scale estimate."""
    values = np.asarray(values, dtype=float)
    return 1.4826 * float(np.median(np.abs(values - np.median(values))))


# ---------------------------------------------------------------------
# Shared optimizer driver
# ---------------------------------------------------------------------

def _run_minimizer(objective, x0: np.ndarray, cfg: DpdConfig, n_log_params: int):
    """Minimize, then restart once with variances perturbed by x1.5 and
    keep the lower objective (cheap guard against local minima)."""
    dim = x0.size
    use_simplex = cfg.optimizer == "nelder-mead" or (
        cfg.optimizer == "auto" and dim <= SIMPLEX_DIM_LIMIT)

    def run(start):
        if use_simplex:
            return minimize(objective, start, method="Nelder-Mead",
                            options={"maxiter": cfg.max_iter, "maxfev": 4 * cfg.max_iter,
                                     "xatol": cfg.param_tol, "fatol": cfg.obj_tol,
                                     "adaptive": True})
        return minimize(objective, start, method="BFGS",
                        jac=lambda x: numeric_gradient(objective, x),
                        options={"maxiter": cfg.max_iter, "gtol": 1e-9})

    best = run(x0)
    perturbed = best.x.copy()
    perturbed[dim - n_log_params:] += math.log(1.5)
    second = run(perturbed)
    iterations = int(best.nit) + int(second.nit)
    if second.fun < best.fun:
        best = second
    return best, iterations


def _clip_logs(logs: np.ndarray, center: float) -> np.ndarray:
    return np.clip(logs, center - 2 * LOG_VARIANCE_SPAN, center + 2 * LOG_VARIANCE_SPAN)


# ---------------------------------------------------------------------
# One-stage fit
# ---------------------------------------------------------------------

def _moment_init(ds: PhenotypeDataset) -> tuple[np.ndarray, float, float, float]:
    """Method-of-moments starting point (gamma, s2_g, s2_b, s2_e).

    With replicated genotypes the within-genotype mean square
    identifies sigma2_b + sigma2_e and the between-genotype variance of
    genotype means carries the genetic part, which gives a start close
    enough for the log-scale optimizer.  Unreplicated data fall back to
    residual-based moments.  The marker-variance start is floored
    proportionally to the data scale: an absolute floor would park the
    optimizer in a zero-gradient corner whenever the residual scale
    estimate absorbs the genetic variance.
    """
    gamma0, *_ = np.linalg.lstsq(ds.Z, ds.y, rcond=None)
    resid = ds.y - ds.Z @ gamma0
    total_var = float(np.var(ds.y, ddof=1)) if ds.n_obs > 1 else 1.0

    counts = ds.Xb.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        block_means = np.where(counts > 0, ds.Xb.T @ resid / np.maximum(counts, 1), 0.0)
    s2_b = float(np.var(block_means[counts > 0], ddof=1)) if np.sum(counts > 0) > 1 else 1e-6
    s2_b = max(s2_b, 1e-6)

    G = ds.n_genotypes
    geno_counts = np.bincount(ds.genotype_of, minlength=G)
    replicated = ds.n_obs > G and np.all(geno_counts >= 1)
    if replicated:
        geno_sums = np.bincount(ds.genotype_of, weights=resid, minlength=G)
        geno_means = geno_sums / geno_counts
        within_ss = float(np.sum((resid - geno_means[ds.genotype_of]) ** 2))
        ms_within = within_ss / max(ds.n_obs - G, 1)
        s2_b = min(s2_b, 0.9 * ms_within) if ms_within > 0 else s2_b
        s2_e = max(ms_within - s2_b, 0.1 * ms_within, 1e-8)
        var_between = float(np.var(geno_means, ddof=1)) if G > 1 else 0.0
        mean_count = float(np.mean(geno_counts))
        genetic_var = var_between - ms_within / mean_count
        first_rows = np.array([np.argmax(ds.genotype_of == g) for g in range(G)])
        col_var = float(np.sum(np.var(ds.Xg[first_rows], axis=0))) if ds.n_markers else 1.0
        marker_scale = max(col_var, 1e-12)
        floor = max(0.05 * max(var_between, 1e-12) / marker_scale, 1e-6)
        s2_g = max(genetic_var / marker_scale, floor)
        return gamma0, s2_g, s2_b, s2_e

    scale = robust_scale(resid)
    if scale <= 0:
        scale = math.sqrt(max(total_var, 1e-8))
    s2_e = scale ** 2
    marker_scale = float(np.mean(np.sum(ds.Xg ** 2, axis=1))) if ds.n_markers else 1.0
    marker_scale = max(marker_scale, 1e-12)
    floor = max(0.05 * total_var / marker_scale, 1e-6)
    s2_g = max((total_var - s2_e - s2_b) / marker_scale, floor)
    return gamma0, s2_g, s2_b, s2_e


def mdpde_fit_onestage(ds: PhenotypeDataset, cfg: DpdConfig,
                       init: tuple | None = None) -> FitResult:
    """One-stage robust fit of (gamma, sigma2_g, sigma2_b, sigma2_e).

    Minimizes the divergence objective (alpha > 0) or the Gaussian
    negative log-likelihood (alpha = 0) over fixed effects and
    log-variances, then derives the shrinkage ratio, random effects,
    breeding values, predictions and heritability.
    """
    L = ds.n_confounders
    if ds.n_obs < L + 3:
        raise DataValidationError(
            f"degenerate data: N={ds.n_obs} observations for {L} fixed effects "
            "+ 3 variances")
    if init is None:
        if cfg.alpha > 0:
            # Continuation: the divergence surface is multimodal, so
            # robust fits start from the Gaussian solution.
            base = mdpde_fit_onestage(ds, replace(cfg, alpha=0.0))
            init = (base.gamma_hat, base.variances.sigma2_g,
                    base.variances.sigma2_b, base.variances.sigma2_e)
        else:
            init = _moment_init(ds)
    gamma0, s2_g0, s2_b0, s2_e0 = init
    gamma0 = np.asarray(gamma0, dtype=float).ravel()

    builder = CovarianceBuilder(ds)
    alpha = cfg.alpha
    log_center = math.log(max(float(np.var(ds.y)), 1e-8))
    x0 = np.concatenate([gamma0, np.log([s2_g0, s2_b0, s2_e0])])

    def unpack(x):
        logs = _clip_logs(x[L:], log_center)
        return x[:L], VarianceComponents(
            sigma2_g=math.exp(logs[0]), sigma2_b=math.exp(logs[1]),
            sigma2_e=math.exp(logs[2]))

    if alpha == 0.0:
        def objective(x):
            gamma, vc = unpack(x)
            try:
                return gaussian_nll(ds, gamma, vc)
            except SingularSystemError:
                return 1e30
        shift = 0.0
    else:
        # Fix the rescaling constant at the starting point so objective
        # values stay representable for large replicate sizes.
        g0, vc0 = unpack(x0)
        assembly0 = builder.assemble(vc0)
        quads0 = builder.quad_forms(assembly0, g0)
        shift = -max(
            s for (V, _, ld), q in zip(assembly0.per_replicate, quads0)
            for s in _term_logs(V.shape[0], ld, q, alpha))

        def objective(x):
            gamma, vc = unpack(x)
            try:
                terms = _dpd_terms(builder, gamma, vc, alpha, shift=shift)
            except SingularSystemError:
                return 1e30
            if not all(map(math.isfinite, terms)):
                return 1e30
            return math.fsum(terms) / len(terms)

    result, iterations = _run_minimizer(objective, x0, cfg, n_log_params=3)
    gamma_hat, vc = unpack(result.x)
    vc = VarianceComponents(vc.sigma2_g, vc.sigma2_b, vc.sigma2_e,
                            sigma2_u_total=ds.n_markers * vc.sigma2_g)

    lam = vc.sigma2_e / vc.sigma2_g
    effects = ridge_solution(ds, block_lambda(ds, lam, vc.sigma2_e, vc.sigma2_b))
    ghat = breeding_values(ds, effects.u_g)
    fitted = predict(ds, gamma_hat, effects)
    h = heritability(vc.sigma2_g, vc.sigma2_e, ds.n_replicates)

    if alpha == 0.0:
        final_obj = gaussian_nll(ds, gamma_hat, vc)
    else:
        final_obj = dpd_objective(ds, gamma_hat, vc, alpha)
    diag = FitDiagnostics(iterations=iterations, objective=final_obj,
                          converged=bool(result.success), method="mdpde-onestage",
                          alpha=alpha)
    return FitResult(gamma_hat=gamma_hat, effects=effects, variances=vc,
                     shrinkage=np.full(ds.n_markers, lam),
                     breeding_values=ghat, fitted=fitted, heritability=h,
                     diagnostics=diag)


# ---------------------------------------------------------------------
# Generic single-group fit (stage-two engine)
# ---------------------------------------------------------------------

@dataclass(frozen=True)
class GenericDpdFit:
    coef: np.ndarray
    sigma2_random: float
    sigma2_resid: float
    objective: float
    iterations: int
    converged: bool
    alpha: float
    extra: dict = field(default_factory=dict)


def mdpde_fit_generic(response: np.ndarray, fixed_design: np.ndarray,
                      random_design: np.ndarray, cfg: DpdConfig) -> GenericDpdFit:
    """Fit response ~ N(F gamma, s2_random R R' + s2_resid I) by the
    single-term divergence objective (alpha = 0: Gaussian ML).

    A zero random design drops the random variance from the optimization
    (it is held at a floor), reducing the model to robust regression.
    """
    y = np.asarray(response, dtype=float).ravel()
    F = np.atleast_2d(np.asarray(fixed_design, dtype=float))
    R = np.atleast_2d(np.asarray(random_design, dtype=float))
    m, q = F.shape
    if y.shape[0] != m or R.shape[0] != m:
        raise DataValidationError("response/design row mismatch")
    if m <= q:
        raise DataValidationError(f"need more rows ({m}) than fixed effects ({q})")

    gram = R @ R.T
    has_random = bool(np.any(gram))
    alpha = cfg.alpha

    coef0, *_ = np.linalg.lstsq(F, y, rcond=None)
    resid0 = y - F @ coef0
    scale = robust_scale(resid0)
    total_var = float(np.var(y, ddof=1)) if m > 1 else 1.0
    if scale <= 0:
        scale = math.sqrt(max(total_var, 1e-10))
    s2_resid0 = scale ** 2
    log_center = math.log(max(total_var, 1e-8))
    floor = math.exp(log_center - 2 * LOG_VARIANCE_SPAN)
    if has_random:
        gram_scale = max(float(np.mean(np.diag(gram))), 1e-12)
        rand_floor = max(0.05 * total_var / gram_scale, 1e-6)
        s2_rand0 = max((total_var - s2_resid0) / gram_scale, rand_floor)
        x0 = np.concatenate([coef0, np.log([s2_rand0, s2_resid0])])
        n_logs = 2
    else:
        x0 = np.concatenate([coef0, np.log([s2_resid0])])
        n_logs = 1

    eye = np.eye(m)

    def unpack(x):
        logs = _clip_logs(x[q:], log_center)
        if has_random:
            return x[:q], math.exp(logs[0]), math.exp(logs[1])
        return x[:q], floor, math.exp(logs[0])

    def covariance(s2_rand, s2_resid):
        V = s2_rand * gram + s2_resid * eye
        (factor, _), _ = chol_factor_jitter(V)
        logdet = 2.0 * float(np.sum(np.log(np.diag(factor))))
        return factor, logdet

    if alpha == 0.0:
        def objective(x):
            coef, s2_rand, s2_resid = unpack(x)
            try:
                factor, logdet = covariance(s2_rand, s2_resid)
            except SingularSystemError:
                return 1e30
            half = solve_triangular(factor, y - F @ coef, lower=True)
            return 0.5 * (m * math.log(2.0 * math.pi) + logdet + float(half @ half))
        shift = 0.0
    else:
        coef_i, sr_i, se_i = unpack(x0)
        factor0, logdet0 = covariance(sr_i, se_i)
        half0 = solve_triangular(factor0, y - F @ coef_i, lower=True)
        shift = -max(_term_logs(m, logdet0, float(half0 @ half0), alpha))

        def objective(x):
            coef, s2_rand, s2_resid = unpack(x)
            try:
                factor, logdet = covariance(s2_rand, s2_resid)
            except SingularSystemError:
                return 1e30
            half = solve_triangular(factor, y - F @ coef, lower=True)
            s1, s2 = _term_logs(m, logdet, float(half @ half), alpha)
            val = _exp_diff(s1 + shift, s2 + shift)
            return val if math.isfinite(val) else 1e30

    result, iterations = _run_minimizer(objective, x0, cfg, n_log_params=n_logs)
    coef, s2_rand, s2_resid = unpack(result.x)
    return GenericDpdFit(coef=np.asarray(coef, dtype=float).copy(),
                         sigma2_random=s2_rand, sigma2_resid=s2_resid,
                         objective=float(result.fun), iterations=iterations,
                         converged=bool(result.success), alpha=alpha)
