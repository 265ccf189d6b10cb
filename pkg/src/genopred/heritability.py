"""SNP-heritability point estimation from fitted variance components."""

from __future__ import annotations

import numpy as np

from .core import VarianceComponents


def heritability(sigma2_g: float, sigma2_e: float, r: int) -> float:
    """Fraction of phenotypic variance attributed to genetics.

    H = sigma2_g / (sigma2_g + sigma2_e / r) for r replicates; lies in
    [0, 1] whenever the inputs are valid.
    """
    if r < 1:
        raise ValueError("replicate count must be >= 1")
    if sigma2_g < 0 or sigma2_e < 0:
        raise ValueError("variances must be nonnegative")
    denom = sigma2_g + sigma2_e / r
    if denom == 0.0:
        raise ValueError("undefined heritability: both variances are zero")
    return float(sigma2_g / denom)


def heritability_from_components(vc: VarianceComponents, r: int) -> float:
    """Heritability from a fitted set of variance components.

    In heteroscedastic mode the genetic variance entering the ratio is
    the average per-marker variance, since the ratio is defined for a
    single scalar marker variance.
    """
    return heritability(vc.mean_marker_variance(), vc.sigma2_e, r)
