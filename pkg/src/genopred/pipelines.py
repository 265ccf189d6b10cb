"""Named prediction methods: one call from dataset to FitResult.

One-stage: the divergence estimator at any alpha (alpha 0 is the
classical maximum-likelihood baseline) and the heteroscedastic
shrinkage estimators with a likelihood-type or Huber-type base fit.
Two-stage: robust adjusted means followed by a classical, Huber, or
divergence second stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (FitDiagnostics, FitResult, PhenotypeDataset, RandomEffects,
                   VarianceComponents)
from .dpd import DpdConfig, mdpde_fit_onestage
from .heritability import heritability_from_components
from .mme import block_lambda, breeding_values, predict, solve_mme
from .robust import RobustFitConfig, robust_lmm_fit
from .shrinkage import rmla_shrinkage, rmla_variances, rmlv_fit
from .twostage import build_two_stage_design, stage_one_fit, stage_two_fit

ONE_STAGE_METHODS = ("rmla", "rmlv", "rob-rmla", "rob-rmlv", "mdpde1")
TWO_STAGE_METHODS = ("rob1", "rob2", "mdpde2")
METHOD_NAMES = ONE_STAGE_METHODS + TWO_STAGE_METHODS


@dataclass(frozen=True)
class MethodSpec:
    """A method name plus, for divergence methods, its alpha."""

    name: str
    alpha: float | None = None

    def __post_init__(self):
        if self.name not in METHOD_NAMES:
            raise ValueError(f"unknown method {self.name!r}; choose from {METHOD_NAMES}")
        needs_alpha = self.name in ("mdpde1", "mdpde2")
        if needs_alpha and self.alpha is None:
            raise ValueError(f"method {self.name} requires alpha")
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    @classmethod
    def parse(cls, text: str) -> "MethodSpec":
        name, _, alpha = text.strip().partition(":")
        return cls(name=name.strip(), alpha=float(alpha) if alpha else None)

    @property
    def label(self) -> str:
        if self.alpha is None:
            return self.name
        return f"{self.name}(alpha={self.alpha:g})"


def _classical_base(ds: PhenotypeDataset) -> VarianceComponents:
    """Homoscedastic likelihood-type base fit (divergence at alpha 0)."""
    return mdpde_fit_onestage(ds, DpdConfig(alpha=0.0)).variances


def _robust_base(ds: PhenotypeDataset, cfg: RobustFitConfig) -> VarianceComponents:
    """Homoscedastic Huber-type base fit of the same one-stage model."""
    res = robust_lmm_fit(ds.y, ds.Z, [ds.Xg, ds.Xb], cfg)
    s2_g, s2_b = res.sigma2_groups
    return VarianceComponents(sigma2_g=s2_g, sigma2_b=s2_b, sigma2_e=res.sigma2_e,
                              sigma2_u_total=ds.n_markers * s2_g)


def _shrinkage_result(ds: PhenotypeDataset, lam_markers: np.ndarray,
                      vc: VarianceComponents, method: str,
                      iterations: int, converged: bool) -> FitResult:
    sol = solve_mme(ds, block_lambda(ds, lam_markers, vc.sigma2_e, vc.sigma2_b))
    effects = RandomEffects(u_g=sol.u_hat[: ds.n_markers],
                            u_b=sol.u_hat[ds.n_markers:])
    ghat = breeding_values(ds, effects.u_g)
    fitted = predict(ds, sol.gamma_hat, effects)
    h = heritability_from_components(vc, ds.n_replicates)
    diag = FitDiagnostics(iterations=iterations, objective=float("nan"),
                          converged=converged, method=method)
    return FitResult(gamma_hat=sol.gamma_hat, effects=effects, variances=vc,
                     shrinkage=lam_markers, breeding_values=ghat, fitted=fitted,
                     heritability=h, diagnostics=diag)


def fit_method(spec: MethodSpec, ds: PhenotypeDataset,
               robust_cfg: RobustFitConfig | None = None,
               dpd_cfg: DpdConfig | None = None) -> FitResult:
    """Fit one named method on a dataset."""
    rcfg = robust_cfg or RobustFitConfig()

    if spec.name == "mdpde1":
        cfg = dpd_cfg or DpdConfig(alpha=spec.alpha)
        return mdpde_fit_onestage(ds, cfg)

    if spec.name in ("rmla", "rob-rmla"):
        base = _classical_base(ds) if spec.name == "rmla" else _robust_base(ds, rcfg)
        lam = rmla_shrinkage(ds, base)
        vc = VarianceComponents(sigma2_g=rmla_variances(ds), sigma2_b=base.sigma2_b,
                                sigma2_e=base.sigma2_e)
        return _shrinkage_result(ds, lam, vc, spec.name, iterations=1, converged=True)

    if spec.name in ("rmlv", "rob-rmlv"):
        base = _classical_base(ds) if spec.name == "rmlv" else _robust_base(ds, rcfg)
        lam, vc, _, converged = rmlv_fit(ds, base)
        return _shrinkage_result(ds, lam, vc, spec.name, iterations=50,
                                 converged=converged)

    # two-stage family
    design = build_two_stage_design(ds)
    s1 = stage_one_fit(ds, design, rcfg)
    stage2 = {"rob1": "classical", "rob2": "huber", "mdpde2": "mdpde"}[spec.name]
    return stage_two_fit(ds, design, s1, stage2, alpha=spec.alpha,
                         dpd_cfg=dpd_cfg, robust_cfg=rcfg)


def predict_dataset(fit: FitResult, ds: PhenotypeDataset,
                    known_blocks: np.ndarray | None = None) -> np.ndarray:
    """Out-of-sample predictions from a fitted model.

    Blocks absent from training (mask False) contribute zero, the
    conditional mean of an unobserved random effect.
    """
    u_b = fit.effects.u_b
    if known_blocks is not None:
        u_b = np.where(np.asarray(known_blocks, dtype=bool), u_b, 0.0)
    return predict(ds, fit.gamma_hat, RandomEffects(u_g=fit.effects.u_g, u_b=u_b))
