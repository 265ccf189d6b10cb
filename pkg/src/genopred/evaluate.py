"""Monte-Carlo evaluation harness.

Runs replicated simulate / contaminate / split / fit / predict loops,
scoring every method on held-out genotypes with the correlation and
median-absolute-difference metrics plus the squared deviation of the
heritability estimate from its realized truth.  Seeds are derived per
replication only, so the method list can change without perturbing any
other method's numbers, and paired comparisons see identical data.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import PhenotypeDataset, subset_by_genotype
from .pipelines import MethodSpec, fit_method, predict_dataset
from .simulate import (ContaminationScheme, SimulationConfig, contaminate,
                       make_rng, mix_seed, round_half_up, simulate)

METRICS = ("rho_train", "rho_test", "mad_train", "mad_test", "h_estimate")


def pearson_rho(y: np.ndarray, yhat: np.ndarray) -> float:
    """Sample Pearson correlation; errors on constant input."""
    y = np.asarray(y, dtype=float).ravel()
    yhat = np.asarray(yhat, dtype=float).ravel()
    if y.shape != yhat.shape or y.size < 2:
        raise ValueError("need two equal-length vectors of size >= 2")
    yc = y - y.mean()
    hc = yhat - yhat.mean()
    denom = np.sqrt(float(yc @ yc) * float(hc @ hc))
    if denom == 0.0:
        raise ValueError("correlation undefined: constant input vector")
    return float(yc @ hc) / denom


def mad(y: np.ndarray, yhat: np.ndarray) -> float:
    """Median absolute difference between predictions and observations."""
    y = np.asarray(y, dtype=float).ravel()
    yhat = np.asarray(yhat, dtype=float).ravel()
    if y.shape != yhat.shape or y.size < 1:
        raise ValueError("need two equal-length nonempty vectors")
    return float(np.median(np.abs(y - yhat)))


def cv_split(ds: PhenotypeDataset, train_fraction: float = 0.7,
             seed: int = 0) -> tuple[PhenotypeDataset, PhenotypeDataset]:
    """Split genotypes (not raw observations) into train and test.

    All observations of a genotype land on the same side, so test
    predictions are genuine out-of-sample genomic predictions.  Splits
    leaving any block without training observations are redrawn up to
    20 times.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    if ds.n_obs < 10:
        raise ValueError("dataset too small to split")
    G = ds.n_genotypes
    n_train = min(max(round_half_up(train_fraction * G), 1), G - 1)
    rng = make_rng(seed)
    for _ in range(20):
        perm = rng.permutation(G)
        train_g = perm[:n_train]
        train = subset_by_genotype(ds, train_g)
        if np.all(train.Xb.sum(axis=0) > 0):
            return train, subset_by_genotype(ds, perm[n_train:])
    raise RuntimeError("20 redraws left a block without training observations")


@dataclass
class MethodCell:
    """Per-replication metric vectors of one method under one scheme."""

    rho_train: np.ndarray
    rho_test: np.ndarray
    mad_train: np.ndarray
    mad_test: np.ndarray
    h_estimate: np.ndarray
    failures: list = field(default_factory=list)

    @classmethod
    def empty(cls, n_reps: int) -> "MethodCell":
        return cls(*(np.full(n_reps, np.nan) for _ in METRICS))

    def metric(self, name: str) -> np.ndarray:
        return getattr(self, name)


@dataclass
class EvaluationReport:
    methods: list
    schemes: list
    n_reps: int
    cells: dict          # (method_label, scheme_label) -> MethodCell
    h_true: np.ndarray   # (n_reps,)
    metadata: dict

    def mean(self, method_label: str, scheme_label: str, metric: str) -> float:
        values = self.cells[(method_label, scheme_label)].metric(metric)
        if np.all(np.isnan(values)):
            return float("nan")
        return float(np.nanmean(values))

    def h_msd(self, method_label: str, scheme_label: str) -> float:
        h = self.cells[(method_label, scheme_label)].h_estimate
        dev = (h - self.h_true) ** 2
        if np.all(np.isnan(dev)):
            return float("nan")
        return float(np.nanmean(dev))

    def long_rows(self):
        """(rep, method, alpha, scheme, split, metric, value) records."""
        for spec in self.methods:
            for scheme in self.schemes:
                cell = self.cells[(spec.label, scheme.label)]
                for rep in range(self.n_reps):
                    for split in ("train", "test"):
                        yield (rep, spec.name, spec.alpha, scheme.label, split,
                               "rho", cell.metric(f"rho_{split}")[rep])
                        yield (rep, spec.name, spec.alpha, scheme.label, split,
                               "mad", cell.metric(f"mad_{split}")[rep])
                    yield (rep, spec.name, spec.alpha, scheme.label, "train",
                           "heritability", cell.h_estimate[rep])
        for rep in range(self.n_reps):
            yield (rep, "truth", None, "none", "train", "heritability",
                   self.h_true[rep])

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("rep,method,alpha,scheme,split,metric,value\n")
            for rep, name, alpha, scheme, split, metric, value in self.long_rows():
                alpha_s = "" if alpha is None else f"{alpha:.17g}"
                fh.write(f"{rep},{name},{alpha_s},{scheme},{split},{metric},"
                         f"{value:.17g}\n")

    def summary_markdown(self) -> str:
        lines = ["# Evaluation summary", "",
                 f"replications: {self.n_reps}; base seed: "
                 f"{self.metadata.get('base_seed')}; config hash: "
                 f"{self.metadata.get('config_hash')}", ""]
        scheme_labels = [s.label for s in self.schemes]
        lines.append("## Prediction accuracy (test data)")
        lines.append("")
        header = "| Method | " + " | ".join(
            f"{s} rho | {s} MAD" for s in scheme_labels) + " |"
        lines.append(header)
        lines.append("|" + "---|" * (1 + 2 * len(scheme_labels)))
        for spec in self.methods:
            cols = []
            for s in scheme_labels:
                cols.append(f"{self.mean(spec.label, s, 'rho_test'):.3f}")
                cols.append(f"{self.mean(spec.label, s, 'mad_test'):.3f}")
            lines.append(f"| {spec.label} | " + " | ".join(cols) + " |")
        lines.append("")
        lines.append("## Heritability (average estimate and MSD vs truth)")
        lines.append("")
        header = "| Method | " + " | ".join(
            f"{s} avg | {s} MSD" for s in scheme_labels) + " |"
        lines.append(header)
        lines.append("|" + "---|" * (1 + 2 * len(scheme_labels)))
        for spec in self.methods:
            cols = []
            for s in scheme_labels:
                cols.append(f"{self.mean(spec.label, s, 'h_estimate'):.4f}")
                cols.append(f"{self.h_msd(spec.label, s):.3e}")
            lines.append(f"| {spec.label} | " + " | ".join(cols) + " |")
        lines.append("")
        n_fail = sum(len(c.failures) for c in self.cells.values())
        lines.append(f"failed fits: {n_fail}")
        lines.append("")
        return "\n".join(lines)

    def write_summary(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.summary_markdown())


def config_hash(sim_cfg: SimulationConfig, schemes, methods, n_reps: int,
                base_seed: int, train_fraction: float) -> str:
    text = repr((sim_cfg, tuple(schemes), tuple(m.label for m in methods),
                 n_reps, base_seed, train_fraction))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


_SCHEME_STREAM = {"none": 11, "random": 12, "block": 13}


def _run_one_rep(rep: int, sim_cfg: SimulationConfig, schemes, methods,
                 base_seed: int, train_fraction: float):
    """All metric values of one replication: {(m, s): {metric: value}}."""
    cfg = SimulationConfig(
        phi=sim_cfg.phi, sigma2_g=sim_cfg.sigma2_g, sigma2_b=sim_cfg.sigma2_b,
        sigma2_e=sim_cfg.sigma2_e, n_genotypes=sim_cfg.n_genotypes,
        replicates=sim_cfg.replicates, p=sim_cfg.p,
        block_layout=sim_cfg.block_layout, marker_maf=sim_cfg.marker_maf,
        seed=mix_seed(base_seed, rep))
    ds, truth = simulate(cfg)
    split_seed = mix_seed(base_seed, rep, 7)
    sigma_e = float(np.sqrt(cfg.sigma2_e))
    out = {}
    failures = []
    for scheme in schemes:
        cont_seed = mix_seed(base_seed, rep, _SCHEME_STREAM[scheme.kind])
        ds_s, _ = contaminate(ds, scheme, sigma_e, cont_seed)
        train, test = cv_split(ds_s, train_fraction, split_seed)
        known_blocks = train.Xb.sum(axis=0) > 0
        for spec in methods:
            key = (spec.label, scheme.label)
            try:
                fit = fit_method(spec, train)
                yhat_test = predict_dataset(fit, test, known_blocks)
                out[key] = {
                    "rho_train": pearson_rho(train.y, fit.fitted),
                    "rho_test": pearson_rho(test.y, yhat_test),
                    "mad_train": mad(train.y, fit.fitted),
                    "mad_test": mad(test.y, yhat_test),
                    "h_estimate": fit.heritability,
                }
            except Exception as exc:  # recorded as NA, harness continues
                out[key] = {m: float("nan") for m in METRICS}
                failures.append((rep, spec.label, scheme.label, repr(exc)))
    return truth["H_p_true"], out, failures


def run_experiment(sim_cfg: SimulationConfig, schemes, methods,
                   n_reps: int, base_seed: int,
                   train_fraction: float = 0.7, jobs: int = 1) -> EvaluationReport:
    """Full Monte-Carlo comparison of the given methods and schemes."""
    schemes = list(schemes)
    methods = list(methods)
    if n_reps < 1:
        raise ValueError("n_reps must be positive")
    cells = {(m.label, s.label): MethodCell.empty(n_reps)
             for m in methods for s in schemes}
    h_true = np.full(n_reps, np.nan)

    def work(rep):
        return rep, _run_one_rep(rep, sim_cfg, schemes, methods, base_seed,
                                 train_fraction)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, range(n_reps)))
    else:
        results = [work(rep) for rep in range(n_reps)]

    for rep, (h, out, failures) in sorted(results):
        h_true[rep] = h
        for key, metrics in out.items():
            cell = cells[key]
            for name, value in metrics.items():
                cell.metric(name)[rep] = value
        for failure in failures:
            cells[(failure[1], failure[2])].failures.append(failure)

    meta = {
        "base_seed": base_seed,
        "n_reps": n_reps,
        "train_fraction": train_fraction,
        "config_hash": config_hash(sim_cfg, schemes, methods, n_reps,
                                   base_seed, train_fraction),
    }
    return EvaluationReport(methods=methods, schemes=schemes, n_reps=n_reps,
                            cells=cells, h_true=h_true, metadata=meta)


def run_sweep(sim_cfg: SimulationConfig, sigma2_g_values, sigma2_e_values,
              method: MethodSpec, n_reps: int, base_seed: int,
              train_fraction: float = 0.7, jobs: int = 1) -> list[dict]:
    """Mean test metrics of one method over a grid of signal/noise
    variances (plot-ready rows)."""
    rows = []
    scheme = ContaminationScheme.none()
    for s2e in sigma2_e_values:
        for s2g in sigma2_g_values:
            cfg = SimulationConfig(
                phi=sim_cfg.phi, sigma2_g=float(s2g), sigma2_b=sim_cfg.sigma2_b,
                sigma2_e=float(s2e), n_genotypes=sim_cfg.n_genotypes,
                replicates=sim_cfg.replicates, p=sim_cfg.p,
                block_layout=sim_cfg.block_layout,
                marker_maf=sim_cfg.marker_maf, seed=sim_cfg.seed)
            report = run_experiment(cfg, [scheme], [method], n_reps, base_seed,
                                    train_fraction, jobs=jobs)
            rows.append({
                "sigma2_g": float(s2g),
                "sigma2_e": float(s2e),
                "method": method.label,
                "rho_test": report.mean(method.label, "none", "rho_test"),
                "mad_test": report.mean(method.label, "none", "mad_test"),
                "h_estimate": report.mean(method.label, "none", "h_estimate"),
            })
    return rows


def write_sweep_csv(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sigma2_g,sigma2_e,method,rho_test,mad_test,h_estimate\n")
        for row in rows:
            fh.write(f"{row['sigma2_g']:.17g},{row['sigma2_e']:.17g},"
                     f"{row['method']},{row['rho_test']:.17g},"
                     f"{row['mad_test']:.17g},{row['h_estimate']:.17g}\n")
