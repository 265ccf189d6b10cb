"""Data model for replicated field-trial phenotype data.

A dataset stacks the phenotype observations of all replicates into one
vector, together with the confounder design Z, the SNP marker matrix Xg,
the block incidence Xb and the mapping of observations to genotypes.
All estimators in this package consume this structure.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# Supported marker coding alphabets.  "binary" is the {0,1} coding
# (heterozygote = 1, either homozygote = 0); "ternary" is {0,1,-1}
# (aa = 0, Aa = 1, AA = -1).
MARKER_CODINGS = {
    "binary": (0, 1),
    "ternary": (-1, 0, 1),
}

RANK_TOL = 1e-10


class DataValidationError(ValueError):
    """Raised when an input dataset violates a structural invariant."""


def _as_readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def matrix_rank(A: np.ndarray, tol: float = RANK_TOL) -> int:
    """Numerical rank via singular values, relative tolerance ``tol``."""
    s = np.linalg.svd(A, compute_uv=False)
    if s.size == 0:
        return 0
    return int(np.sum(s > tol * s[0]))


@dataclass(frozen=True)
class PhenotypeDataset:
    """Validated, immutable container for one replicated phenotype trial.

    Rows are ordered by replicate: the first ``replicate_sizes[0]`` rows
    belong to the first replicate, and so on.  ``genotype_of`` maps each
    observation to a genotype index in ``0..G-1``; observations of the
    same genotype share identical marker and confounder rows.
    """

    y: np.ndarray                 # (N,) phenotype values
    replicate_sizes: np.ndarray   # (r,) observations per replicate
    Z: np.ndarray                 # (N, L) confounders incl. intercept
    Xg: np.ndarray                # (N, p) marker codes
    Xb: np.ndarray                # (N, B) block incidence (0/1)
    genotype_of: np.ndarray       # (N,) genotype index per observation
    coding: tuple[int, ...]       # declared marker alphabet
    ids: tuple[str, ...] = ()               # per-observation genotype ids
    block_labels: tuple[str, ...] = ()      # Xb column labels
    replicate_labels: tuple[str, ...] = ()  # replicate label of each row (N,)
    conf_names: tuple[str, ...] = ()        # Z column names

    def __post_init__(self):
        object.__setattr__(self, "y", _as_readonly(np.asarray(self.y, dtype=float).ravel()))
        object.__setattr__(self, "replicate_sizes", _as_readonly(np.asarray(self.replicate_sizes, dtype=int).ravel()))
        object.__setattr__(self, "Z", _as_readonly(np.atleast_2d(np.asarray(self.Z, dtype=float))))
        object.__setattr__(self, "Xg", _as_readonly(np.asarray(self.Xg, dtype=float)))
        object.__setattr__(self, "Xb", _as_readonly(np.asarray(self.Xb, dtype=float)))
        object.__setattr__(self, "genotype_of", _as_readonly(np.asarray(self.genotype_of, dtype=int).ravel()))
        object.__setattr__(self, "coding", tuple(int(c) for c in self.coding))
        if not self.ids:
            object.__setattr__(self, "ids", tuple(str(g) for g in self.genotype_of))
        if not self.block_labels:
            object.__setattr__(self, "block_labels", tuple(str(b + 1) for b in range(self.Xb.shape[1])))
        if not self.replicate_labels:
            labels = np.repeat([str(k + 1) for k in range(len(self.replicate_sizes))],
                               self.replicate_sizes)
            object.__setattr__(self, "replicate_labels", tuple(labels))
        if not self.conf_names:
            object.__setattr__(self, "conf_names", tuple(
                "intercept" if j == 0 else f"conf_{j}" for j in range(self.Z.shape[1])))
        self._validate()

    # -- sizes ---------------------------------------------------------
    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def n_markers(self) -> int:
        return self.Xg.shape[1]

    @property
    def n_blocks(self) -> int:
        return self.Xb.shape[1]

    @property
    def n_replicates(self) -> int:
        return self.replicate_sizes.shape[0]

    @property
    def n_confounders(self) -> int:
        return self.Z.shape[1]

    @property
    def n_genotypes(self) -> int:
        return int(self.genotype_of.max()) + 1 if self.n_obs else 0

    def replicate_slices(self) -> list[slice]:
        """Row slices of the stacked data, one per replicate."""
        edges = np.concatenate([[0], np.cumsum(self.replicate_sizes)])
        return [slice(int(edges[k]), int(edges[k + 1])) for k in range(self.n_replicates)]

    # -- validation ----------------------------------------------------
    def _validate(self):
        N = self.n_obs
        if self.replicate_sizes.size < 1 or np.any(self.replicate_sizes < 1):
            raise DataValidationError("replicate sizes must all be >= 1")
        if int(self.replicate_sizes.sum()) != N:
            raise DataValidationError(
                f"replicate sizes sum to {int(self.replicate_sizes.sum())}, expected N={N}")
        for name, arr in (("Z", self.Z), ("Xg", self.Xg), ("Xb", self.Xb)):
            if arr.ndim != 2 or arr.shape[0] != N:
                raise DataValidationError(f"{name} must have {N} rows, got shape {arr.shape}")
        if self.genotype_of.shape[0] != N:
            raise DataValidationError("genotype_of length must equal N")
        if N and (self.genotype_of.min() < 0):
            raise DataValidationError("genotype indices must be nonnegative")
        row_sums = self.Xb.sum(axis=1)
        if not np.all(row_sums == 1.0):
            bad = int(np.argmax(row_sums != 1.0))
            raise DataValidationError(f"row {bad} of Xb does not sum to exactly 1")
        if not np.isin(self.Xb, (0.0, 1.0)).all():
            raise DataValidationError("Xb entries must be 0 or 1")
        allowed = np.array(self.coding, dtype=float)
        if self.Xg.size and not np.isin(self.Xg, allowed).all():
            bad = self.Xg.flat[int(np.argmin(np.isin(self.Xg, allowed).ravel()))]
            raise DataValidationError(
                f"unknown marker code {bad!r}; declared alphabet is {self.coding}")
        if matrix_rank(self.Z) < self.Z.shape[1]:
            raise DataValidationError("confounder matrix Z is rank-deficient")


@dataclass(frozen=True)
class RandomEffects:
    """Estimated random effects: per-marker effects and block effects."""

    u_g: np.ndarray  # (p,)
    u_b: np.ndarray  # (B,)

    def __post_init__(self):
        object.__setattr__(self, "u_g", np.asarray(self.u_g, dtype=float).ravel())
        object.__setattr__(self, "u_b", np.asarray(self.u_b, dtype=float).ravel())

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.u_g, self.u_b])


@dataclass(frozen=True)
class VarianceComponents:
    """Variance parameters of the mixed model.

    ``sigma2_g`` is either a scalar (homoscedastic marker variance) or a
    length-p vector of per-marker variances.  ``sigma2_u_total`` is the
    total genetic variance, the sum of per-marker variances (p * sigma2_g
    in the homoscedastic case).
    """

    sigma2_g: float | np.ndarray
    sigma2_b: float
    sigma2_e: float
    sigma2_u_total: float | None = None

    def __post_init__(self):
        if np.ndim(self.sigma2_g) > 0:
            g = np.asarray(self.sigma2_g, dtype=float).ravel()
            if np.any(g < 0):
                raise DataValidationError("per-marker variances must be nonnegative")
            object.__setattr__(self, "sigma2_g", _as_readonly(g))
            total = float(g.sum())
        else:
            if self.sigma2_g < 0:
                raise DataValidationError("sigma2_g must be nonnegative")
            object.__setattr__(self, "sigma2_g", float(self.sigma2_g))
            total = None
        if self.sigma2_b < 0:
            raise DataValidationError("sigma2_b must be nonnegative")
        if self.sigma2_e <= 0:
            raise DataValidationError("sigma2_e must be positive")
        object.__setattr__(self, "sigma2_b", float(self.sigma2_b))
        object.__setattr__(self, "sigma2_e", float(self.sigma2_e))
        if self.sigma2_u_total is None:
            object.__setattr__(self, "sigma2_u_total", total)
        else:
            if self.sigma2_u_total < 0:
                raise DataValidationError("sigma2_u_total must be nonnegative")
            object.__setattr__(self, "sigma2_u_total", float(self.sigma2_u_total))

    @property
    def heteroscedastic(self) -> bool:
        return np.ndim(self.sigma2_g) > 0

    def mean_marker_variance(self) -> float:
        if self.heteroscedastic:
            return float(np.mean(self.sigma2_g))
        return float(self.sigma2_g)


@dataclass(frozen=True)
class FitDiagnostics:
    iterations: int
    objective: float
    converged: bool
    method: str = ""
    alpha: float | None = None
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FitResult:
    """Everything a fitted genomic-prediction model reports."""

    gamma_hat: np.ndarray          # (L,) fixed effects
    effects: RandomEffects
    variances: VarianceComponents
    shrinkage: np.ndarray          # (p,) per-marker ridge penalties
    breeding_values: np.ndarray    # (N,)
    fitted: np.ndarray             # (N,)
    heritability: float
    diagnostics: FitDiagnostics

    def __post_init__(self):
        object.__setattr__(self, "gamma_hat", np.asarray(self.gamma_hat, dtype=float).ravel())
        object.__setattr__(self, "shrinkage", np.asarray(self.shrinkage, dtype=float).ravel())
        object.__setattr__(self, "breeding_values", np.asarray(self.breeding_values, dtype=float).ravel())
        object.__setattr__(self, "fitted", np.asarray(self.fitted, dtype=float).ravel())
        if not (0.0 <= self.heritability <= 1.0):
            raise DataValidationError(f"heritability {self.heritability} outside [0, 1]")
        if np.any(self.shrinkage <= 0):
            raise DataValidationError("shrinkage entries must all be positive")


def variance_floor(estimates: np.ndarray) -> float:
    """Floor for per-marker variance estimates: 1e-8 of the mean positive
    estimate.  Moment estimators can produce negative values; flooring
    instead of dropping keeps p and all downstream dimensions fixed."""
    estimates = np.asarray(estimates, dtype=float)
    positive = estimates[estimates > 0]
    scale = float(positive.mean()) if positive.size else 1.0
    return 1e-8 * scale


def stack_design(ds: PhenotypeDataset) -> np.ndarray:
    """Joint random-effect design ``X = [Xg Xb]``, marker columns first."""
    return np.hstack([ds.Xg, ds.Xb])


# ---------------------------------------------------------------------
# CSV I/O
#
# Phenotype CSV: header id,replicate,block,y[,<confounder columns>...]
# Marker CSV:    header id,m_1,...,m_p with one row per genotype id
# ---------------------------------------------------------------------

def _natural_key(label: str):
    try:
        return (0, float(label), "")
    except ValueError:
        return (1, 0.0, label)


def _read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError(f"{path}: empty file") from None
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    header = [h.strip() for h in header]
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise DataValidationError(
                f"{path}: row {i + 2} has {len(row)} fields, header has {len(header)}")
    return header, rows


def resolve_coding(coding) -> tuple[int, ...]:
    if isinstance(coding, str):
        try:
            return MARKER_CODINGS[coding]
        except KeyError:
            raise DataValidationError(
                f"unknown coding {coding!r}; choose from {sorted(MARKER_CODINGS)}") from None
    return tuple(int(c) for c in coding)


def load_dataset(phenotype_file, marker_file, coding) -> PhenotypeDataset:
    """Load and validate a dataset from the documented CSV pair.

    Observations are reordered so that replicates are contiguous
    (replicates sorted by label, file order preserved within each);
    loading the same files twice therefore yields identical in-memory
    values.  An intercept column is prepended to Z when the phenotype
    file supplies no constant confounder column.
    """
    alphabet = resolve_coding(coding)

    header, rows = _read_csv(phenotype_file)
    required = ["id", "replicate", "block", "y"]
    if [h.lower() for h in header[:4]] != required:
        raise DataValidationError(
            f"{phenotype_file}: header must start with {','.join(required)}")
    conf_cols = header[4:]

    seen: set[tuple[str, str]] = set()
    for row in rows:
        key = (row[0], row[1])
        if key in seen:
            raise DataValidationError(
                f"duplicate observation id {row[0]!r} in replicate {row[1]!r}")
        seen.add(key)

    rep_labels = sorted({row[1] for row in rows}, key=_natural_key)
    rep_order = {lab: k for k, lab in enumerate(rep_labels)}
    order = sorted(range(len(rows)), key=lambda i: rep_order[rows[i][1]])
    rows = [rows[i] for i in order]

    ids = [row[0] for row in rows]
    block_raw = [row[2] for row in rows]
    try:
        y = np.array([float(row[3]) for row in rows])
        conf = np.array([[float(v) for v in row[4:]] for row in rows]) if conf_cols \
            else np.empty((len(rows), 0))
    except ValueError as exc:
        raise DataValidationError(f"{phenotype_file}: non-numeric value ({exc})") from None

    replicate_sizes = [sum(1 for row in rows if row[1] == lab) for lab in rep_labels]

    block_labels = sorted(set(block_raw), key=_natural_key)
    # Integer block labels must form a contiguous range: a gap means a
    # declared block received no observations.
    if all(_natural_key(b)[0] == 0 for b in block_labels):
        values = sorted(int(float(b)) for b in block_labels)
        expected = list(range(values[0], values[0] + len(values)))
        if values != expected:
            missing = sorted(set(expected) - set(values))[0]
            raise DataValidationError(f"block {missing} has zero observations")
    block_index = {lab: j for j, lab in enumerate(block_labels)}
    Xb = np.zeros((len(rows), len(block_labels)))
    Xb[np.arange(len(rows)), [block_index[b] for b in block_raw]] = 1.0

    mheader, mrows = _read_csv(marker_file)
    if not mheader or mheader[0].lower() != "id":
        raise DataValidationError(f"{marker_file}: first column must be 'id'")
    marker_names = mheader[1:]
    marker_by_id: dict[str, np.ndarray] = {}
    for row in mrows:
        if row[0] in marker_by_id:
            raise DataValidationError(f"duplicate observation id {row[0]!r} in marker file")
        try:
            codes = np.array([float(v) for v in row[1:]])
        except ValueError as exc:
            raise DataValidationError(f"{marker_file}: non-numeric marker code ({exc})") from None
        bad = codes[~np.isin(codes, np.array(alphabet, dtype=float))]
        if bad.size:
            raise DataValidationError(
                f"unknown marker code {bad[0]:g} for id {row[0]!r}; alphabet is {alphabet}")
        marker_by_id[row[0]] = codes

    missing = [i for i in ids if i not in marker_by_id]
    if missing:
        raise DataValidationError(f"marker file lacks rows for ids {missing[:5]}")

    # Genotype indices in order of first appearance in the stacked data.
    genotype_index: dict[str, int] = {}
    for i in ids:
        if i not in genotype_index:
            genotype_index[i] = len(genotype_index)
    genotype_of = np.array([genotype_index[i] for i in ids], dtype=int)
    Xg = np.vstack([marker_by_id[i] for i in ids]) if ids else np.empty((0, len(marker_names)))

    has_intercept = any(np.all(conf[:, j] == 1.0) for j in range(conf.shape[1]))
    if has_intercept:
        Z = conf
        conf_names = tuple(conf_cols)
    else:
        Z = np.column_stack([np.ones(len(rows)), conf])
        conf_names = ("intercept",) + tuple(conf_cols)

    return PhenotypeDataset(
        y=y, replicate_sizes=np.array(replicate_sizes), Z=Z, Xg=Xg, Xb=Xb,
        genotype_of=genotype_of, coding=alphabet, ids=tuple(ids),
        block_labels=tuple(block_labels),
        replicate_labels=tuple(np.repeat(rep_labels, replicate_sizes)),
        conf_names=conf_names,
    )


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def save_dataset(ds: PhenotypeDataset, phenotype_file, marker_file) -> None:
    """Write a dataset back to the CSV pair (17 significant digits)."""
    block_of = np.argmax(ds.Xb, axis=1)
    auto_intercept = ds.conf_names[:1] == ("intercept",) and np.all(ds.Z[:, 0] == 1.0)
    conf_cols = ds.conf_names[1:] if auto_intercept else ds.conf_names
    conf_mat = ds.Z[:, 1:] if auto_intercept else ds.Z
    with open(phenotype_file, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "replicate", "block", "y", *conf_cols])
        for i in range(ds.n_obs):
            writer.writerow([
                ds.ids[i], ds.replicate_labels[i], ds.block_labels[int(block_of[i])],
                _fmt(ds.y[i]), *(_fmt(v) for v in conf_mat[i]),
            ])
    first_row_of: dict[int, int] = {}
    for i, g in enumerate(ds.genotype_of):
        first_row_of.setdefault(int(g), i)
    with open(marker_file, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", *(f"m_{j + 1}" for j in range(ds.n_markers))])
        for g in sorted(first_row_of):
            i = first_row_of[g]
            writer.writerow([ds.ids[i], *(f"{int(v):d}" for v in ds.Xg[i])])


def subset_by_genotype(ds: PhenotypeDataset, genotypes: Sequence[int]) -> PhenotypeDataset:
    """Dataset restricted to the observations of the given genotypes.

    Row order, replicate partition, block columns and confounders are
    preserved; genotype indices are re-numbered by first appearance.
    """
    keep = np.isin(ds.genotype_of, np.asarray(list(genotypes), dtype=int))
    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        raise DataValidationError("genotype subset selects no observations")
    new_sizes = []
    for sl in ds.replicate_slices():
        n = int(keep[sl].sum())
        if n:
            new_sizes.append(n)
    remap: dict[int, int] = {}
    for g in ds.genotype_of[idx]:
        if int(g) not in remap:
            remap[int(g)] = len(remap)
    rep_labels = tuple(np.asarray(ds.replicate_labels)[idx])
    return PhenotypeDataset(
        y=ds.y[idx], replicate_sizes=np.array(new_sizes), Z=ds.Z[idx],
        Xg=ds.Xg[idx], Xb=ds.Xb[idx],
        genotype_of=np.array([remap[int(g)] for g in ds.genotype_of[idx]]),
        coding=ds.coding, ids=tuple(np.asarray(ds.ids)[idx]),
        block_labels=ds.block_labels, replicate_labels=rep_labels,
        conf_names=ds.conf_names,
    )


def replace_phenotypes(ds: PhenotypeDataset, y_new: np.ndarray) -> PhenotypeDataset:
    """Copy of ``ds`` with a new phenotype vector, everything else shared."""
    return PhenotypeDataset(
        y=y_new, replicate_sizes=ds.replicate_sizes, Z=ds.Z, Xg=ds.Xg, Xb=ds.Xb,
        genotype_of=ds.genotype_of, coding=ds.coding, ids=ds.ids,
        block_labels=ds.block_labels, replicate_labels=ds.replicate_labels,
        conf_names=ds.conf_names,
    )
