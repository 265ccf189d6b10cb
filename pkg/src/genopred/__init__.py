"""Robust genomic prediction and SNP-heritability estimation under
linear mixed models."""

from .core import (FitDiagnostics, FitResult, PhenotypeDataset, RandomEffects,
                   VarianceComponents, load_dataset, save_dataset, stack_design)
from .dpd import (DpdConfig, assemble_covariance, dpd_objective,
                  mdpde_fit_generic, mdpde_fit_onestage)
from .evaluate import cv_split, mad, pearson_rho, run_experiment, run_sweep
from .heritability import heritability
from .mme import (MmeSolution, breeding_values, predict, projection_apply,
                  ridge_solution, solve_mme)
from .pipelines import MethodSpec, fit_method, predict_dataset
from .robust import RobustFitConfig, huber_weight, robust_lmm_fit
from .shrinkage import AnovaSummary, anova_per_marker, rmla_shrinkage, rmlv_fit
from .simulate import (ContaminationScheme, SimulationConfig, contaminate,
                       simulate)
from .twostage import (StageOneResult, TwoStageDesign, build_two_stage_design,
                       stage_one_fit, stage_two_fit)

__version__ = "0.1.0"

__all__ = [
    "AnovaSummary", "ContaminationScheme", "DpdConfig", "FitDiagnostics",
    "FitResult", "MethodSpec", "MmeSolution", "PhenotypeDataset",
    "RandomEffects", "RobustFitConfig", "SimulationConfig", "StageOneResult",
    "TwoStageDesign", "VarianceComponents", "assemble_covariance",
    "breeding_values", "build_two_stage_design", "contaminate", "cv_split",
    "dpd_objective", "fit_method", "heritability", "huber_weight",
    "load_dataset", "mad", "mdpde_fit_generic", "mdpde_fit_onestage",
    "pearson_rho", "predict", "predict_dataset", "projection_apply",
    "ridge_solution", "rmla_shrinkage", "rmlv_fit", "robust_lmm_fit",
    "run_experiment", "run_sweep", "save_dataset", "simulate", "solve_mme",
    "stack_design", "stage_one_fit", "stage_two_fit",
]
