"""Two-stage genomic prediction.

Stage one treats genotype means as fixed effects and block effects as
random, fitted by Huber M-estimation so outliers cannot distort the
adjusted means.  Stage two regresses the adjusted means on the
genotype-level marker matrix, with the divergence estimator, a Huber
fit, or plain Gaussian likelihood as interchangeable engines.  The
stage-two error is modeled as homoscedastic; the exact covariance of
the adjusted means has no closed form under a robust first stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (DataValidationError, FitDiagnostics, FitResult,
                   PhenotypeDataset, RandomEffects, VarianceComponents)
from .dpd import DpdConfig, mdpde_fit_generic
from .heritability import heritability
from .mme import ridge_coefficients
from .robust import RobustFitConfig, RobustLmmResult, robust_lmm_fit

STAGE2_METHODS = ("mdpde", "huber", "classical")


@dataclass(frozen=True)
class TwoStageDesign:
    """Genotype-level view of the observation-level design.

    eta is the genotype incidence; eta @ Z1 reproduces Z and eta @ X1
    reproduces Xg exactly.
    """

    eta: np.ndarray  # (N, G)
    Z1: np.ndarray   # (G, L)
    X1: np.ndarray   # (G, p)

    @property
    def n_genotypes(self) -> int:
        return self.eta.shape[1]


@dataclass(frozen=True)
class StageOneResult:
    mu_hat: np.ndarray       # (G,) adjusted genotype means
    u_b_hat: np.ndarray      # (B,)
    sigma2_b: float
    sigma2_e: float
    iterations: int
    converged: bool


def build_two_stage_design(ds: PhenotypeDataset) -> TwoStageDesign:
    """Genotype incidence plus per-genotype representative rows.

    Every observation of a genotype must carry identical marker and
    confounder rows; offenders are reported by genotype id.
    """
    G = ds.n_genotypes
    N = ds.n_obs
    eta = np.zeros((N, G))
    eta[np.arange(N), ds.genotype_of] = 1.0
    Z1 = np.zeros((G, ds.n_confounders))
    X1 = np.zeros((G, ds.n_markers))
    bad: list[str] = []
    for g in range(G):
        rows = np.nonzero(ds.genotype_of == g)[0]
        first = rows[0]
        if not (np.all(ds.Xg[rows] == ds.Xg[first]) and np.all(ds.Z[rows] == ds.Z[first])):
            bad.append(ds.ids[first])
            continue
        Z1[g] = ds.Z[first]
        X1[g] = ds.Xg[first]
    if bad:
        raise DataValidationError(
            f"genotypes with inconsistent marker/confounder rows: {bad[:10]}")
    return TwoStageDesign(eta=eta, Z1=Z1, X1=X1)


def _confounded_genotypes(ds: PhenotypeDataset) -> list[str]:
    """Genotypes whose observation set coincides exactly with one block's,
    making the genotype mean inseparable from that block effect."""
    block_of = np.argmax(ds.Xb, axis=1)
    block_counts = ds.Xb.sum(axis=0)
    flagged = []
    for g in range(ds.n_genotypes):
        rows = np.nonzero(ds.genotype_of == g)[0]
        blocks = np.unique(block_of[rows])
        if blocks.size == 1 and block_counts[blocks[0]] == rows.size:
            flagged.append(ds.ids[rows[0]])
    return flagged


def stage_one_fit(ds: PhenotypeDataset, design: TwoStageDesign,
                  cfg: RobustFitConfig) -> StageOneResult:
    """Robust fit of y = eta mu + Xb u_b + e with mu fixed, u_b random."""
    flagged = _confounded_genotypes(ds)
    if flagged:
        raise DataValidationError(
            f"unidentifiable genotype means (fully confounded with a block): {flagged[:10]}")
    res: RobustLmmResult = robust_lmm_fit(ds.y, design.eta, [ds.Xb], cfg)
    return StageOneResult(
        mu_hat=res.fixed, u_b_hat=res.random_effects[0],
        sigma2_b=res.sigma2_groups[0], sigma2_e=res.sigma2_e,
        iterations=res.iterations, converged=res.converged,
    )


def stage_two_fit(ds: PhenotypeDataset, design: TwoStageDesign, s1: StageOneResult,
                  method: str, alpha: float | None = None,
                  dpd_cfg: DpdConfig | None = None,
                  robust_cfg: RobustFitConfig | None = None) -> FitResult:
    """Regress adjusted means on markers and assemble the full result.

    method: "mdpde" (divergence at the given alpha), "huber" (robust
    M-estimation) or "classical" (Gaussian likelihood).  Whatever the
    engine, the marker effects are then re-estimated by ridge on the
    stage-two system with lambda = s2_resid / s2_g, and predictions are
    mapped back to observations through the genotype incidence with the
    stage-one block effects added.
    """
    if method not in STAGE2_METHODS:
        raise ValueError(f"unknown stage-two method {method!r}")
    mu, Z1, X1 = s1.mu_hat, design.Z1, design.X1
    p = X1.shape[1]

    if method == "huber":
        rcfg = robust_cfg or RobustFitConfig()
        rres = robust_lmm_fit(mu, Z1, [X1], rcfg)
        gamma, s2_g, s2_resid = rres.fixed, rres.sigma2_groups[0], rres.sigma2_e
        iterations, converged = rres.iterations, rres.converged
        objective = float("nan")
        label = "two-stage-huber"
    else:
        if method == "classical":
            cfg = DpdConfig(alpha=0.0)
        else:
            if alpha is None and dpd_cfg is None:
                raise ValueError("mdpde stage two needs alpha")
            cfg = dpd_cfg or DpdConfig(alpha=alpha)
        gres = mdpde_fit_generic(mu, Z1, X1, cfg)
        gamma, s2_g, s2_resid = gres.coef, gres.sigma2_random, gres.sigma2_resid
        iterations, converged = gres.iterations, gres.converged
        objective = gres.objective
        label = "two-stage-classical" if method == "classical" else "two-stage-mdpde"

    s2_g = max(s2_g, 1e-12 * max(s2_resid, 1e-12))
    lam = s2_resid / s2_g
    u_g = ridge_coefficients(mu, Z1, X1, lam)
    effects = RandomEffects(u_g=u_g, u_b=s1.u_b_hat)
    g_geno = X1 @ u_g
    ghat = design.eta @ g_geno
    fitted = design.eta @ (Z1 @ gamma + g_geno) + ds.Xb @ s1.u_b_hat

    vc = VarianceComponents(sigma2_g=s2_g, sigma2_b=s1.sigma2_b,
                            sigma2_e=s1.sigma2_e, sigma2_u_total=p * s2_g)
    h = heritability(s2_g, s1.sigma2_e, ds.n_replicates)
    diag = FitDiagnostics(
        iterations=iterations, objective=objective, converged=converged,
        method=label, alpha=alpha if method == "mdpde" else None,
        extra={"sigma2_resid_stage2": s2_resid,
               "stage1_iterations": s1.iterations,
               "stage1_converged": s1.converged})
    return FitResult(gamma_hat=gamma, effects=effects, variances=vc,
                     shrinkage=np.full(p, lam), breeding_values=ghat,
                     fitted=fitted, heritability=h, diagnostics=diag)
