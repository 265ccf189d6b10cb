"""Artificial-data generator and outlier-injection schemes.

Phenotypes follow y = phi + g_i + b_j + e with genotypic values built
from biallelic marker draws, shared block effects across replicates and
independent Gaussian noise.  Two contamination schemes inject outliers:
a random fraction of observations shifted by a multiple of the residual
standard deviation, or whole blocks shifted across every replicate.

All randomness flows through numpy's PCG64 generator (a named, seedable
64-bit algorithm); normal variates are produced by the inverse-CDF
method so streams are reproducible across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .core import DataValidationError, PhenotypeDataset, replace_phenotypes


def mix_seed(base: int, *parts: int) -> int:
    """Derive a child seed deterministically from a base seed and indices.

    Uses the splitmix64 finalizer, chained over the parts, so derived
    streams are independent of Python's salted hash and of each other.
    """
    state = base & 0xFFFFFFFFFFFFFFFF
    for part in parts:
        state ^= (part & 0xFFFFFFFFFFFFFFFF) + 0x9E3779B97F4A7C15
        state &= 0xFFFFFFFFFFFFFFFF
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
        state = z ^ (z >> 31)
    return state


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def normal_draws(rng: np.random.Generator, size, sigma: float = 1.0) -> np.ndarray:
    """N(0, sigma^2) variates via the inverse CDF of uniform draws."""
    u = rng.random(size)
    u = np.clip(u, 1e-300, 1.0 - 1e-16)
    return sigma * ndtri(u)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SimulationConfig:
    """Parameters of the data-generating model."""

    phi: float = 0.05
    sigma2_g: float = 0.005892
    sigma2_b: float = 6.27
    sigma2_e: float = 53.8715
    n_genotypes: int = 715
    replicates: int = 2
    p: int = 11646
    block_layout: tuple[int, ...] = field(
        default_factory=lambda: (13,) * 5 + (10,) * 65)
    marker_maf: float = 0.3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "block_layout", tuple(int(b) for b in self.block_layout))
        if self.sigma2_e <= 0 or self.sigma2_g < 0 or self.sigma2_b < 0:
            raise DataValidationError("variances must be nonnegative, sigma2_e positive")
        if not (0.0 < self.marker_maf <= 0.5):
            raise DataValidationError("marker_maf must lie in (0, 0.5]")
        if self.n_genotypes < 1 or self.replicates < 1 or self.p < 1:
            raise DataValidationError("counts must be positive")
        if sum(self.block_layout) != self.n_genotypes:
            raise DataValidationError(
                f"block layout sums to {sum(self.block_layout)}, "
                f"expected one observation per genotype per replicate "
                f"({self.n_genotypes})")
        if any(b < 1 for b in self.block_layout):
            raise DataValidationError("block sizes must be positive")


@dataclass(frozen=True)
class ContaminationScheme:
    """Outlier injection: none, random observations, or whole blocks."""

    kind: str = "none"                   # none | random | block
    fraction_or_blocks: float = 0.0      # fraction of obs / number of blocks
    shift_multiplier: float = 0.0        # in units of residual SD

    def __post_init__(self):
        if self.kind not in ("none", "random", "block"):
            raise DataValidationError(f"unknown contamination kind {self.kind!r}")
        if self.kind != "none":
            if self.fraction_or_blocks <= 0 or self.shift_multiplier <= 0:
                raise DataValidationError("contamination parameters must be positive")
            if self.kind == "random" and self.fraction_or_blocks >= 1:
                raise DataValidationError("contamination fraction must be below 1")

    @classmethod
    def none(cls) -> "ContaminationScheme":
        return cls("none")

    @classmethod
    def random(cls, fraction: float = 0.05, shift: float = 5.0) -> "ContaminationScheme":
        return cls("random", fraction, shift)

    @classmethod
    def block(cls, n_blocks: int = 5, shift: float = 8.0) -> "ContaminationScheme":
        return cls("block", n_blocks, shift)

    @property
    def label(self) -> str:
        return self.kind


def _sample_markers(rng: np.random.Generator, G: int, p: int, maf: float) -> np.ndarray:
    """Biallelic draws recoded to {0,1}: heterozygote 1, homozygotes 0."""
    alleles = rng.random((G, p, 2)) < maf
    dosage = alleles.sum(axis=2)
    return (dosage == 1).astype(float)


def simulate(cfg: SimulationConfig) -> tuple[PhenotypeDataset, dict]:
    """Draw one dataset from the model, plus a truth record.

    The truth dict carries the marker effects, the overall mean, the
    genotypic value of each genotype, the generating variances and the
    realized heritability Var(g) / (Var(g) + sigma2_e / r).
    """
    rng = make_rng(cfg.seed)
    G, r, p, B = cfg.n_genotypes, cfg.replicates, cfg.p, len(cfg.block_layout)

    markers = _sample_markers(rng, G, p, cfg.marker_maf)
    u_g = normal_draws(rng, p, math.sqrt(cfg.sigma2_g))
    g = markers @ u_g
    block_effects = normal_draws(rng, B, math.sqrt(cfg.sigma2_b))

    block_sizes = np.array(cfg.block_layout, dtype=int)
    block_of_template = np.repeat(np.arange(B), block_sizes)

    rows_y, rows_geno, rows_block = [], [], []
    for _ in range(r):
        # Fresh randomized complete block: genotypes permuted into the
        # fixed block layout each replicate.
        perm = rng.permutation(G)
        noise = normal_draws(rng, G, math.sqrt(cfg.sigma2_e))
        rows_geno.append(perm)
        rows_block.append(block_of_template)
        rows_y.append(cfg.phi + g[perm] + block_effects[block_of_template] + noise)

    y = np.concatenate(rows_y)
    genotype_of = np.concatenate(rows_geno)
    block_of = np.concatenate(rows_block)
    N = G * r

    Xb = np.zeros((N, B))
    Xb[np.arange(N), block_of] = 1.0
    ds = PhenotypeDataset(
        y=y,
        replicate_sizes=np.full(r, G),
        Z=np.ones((N, 1)),
        Xg=markers[genotype_of],
        Xb=Xb,
        genotype_of=genotype_of,
        coding=(0, 1),
        ids=tuple(f"g{i + 1}" for i in genotype_of),
    )

    var_g = float(np.var(g, ddof=1)) if G > 1 else 0.0
    denom = var_g + cfg.sigma2_e / r
    truth = {
        "u_g": u_g,
        "gamma": np.array([cfg.phi]),
        "g": g,
        "block_effects": block_effects,
        "H_p_true": var_g / denom if denom > 0 else 0.0,
        "sigma2_g": cfg.sigma2_g,
        "sigma2_b": cfg.sigma2_b,
        "sigma2_e": cfg.sigma2_e,
    }
    return ds, truth


def contaminate(ds: PhenotypeDataset, scheme: ContaminationScheme,
                sigma_e: float, seed: int) -> tuple[PhenotypeDataset, np.ndarray]:
    """Apply an outlier scheme to a copy of the dataset.

    Random: exactly round(fraction * N) distinct observations get
    y += shift * sigma_e.  Block: the requested number of distinct
    blocks is drawn and every observation of those blocks, in all
    replicates, gets y += shift * sigma_e.  Returns the modified copy
    and the sorted indices of altered observations.
    """
    if sigma_e <= 0:
        raise DataValidationError("sigma_e must be positive")
    if scheme.kind == "none":
        return replace_phenotypes(ds, ds.y.copy()), np.empty(0, dtype=int)
    rng = make_rng(seed)
    if scheme.kind == "random":
        count = max(round_half_up(scheme.fraction_or_blocks * ds.n_obs), 1)
        idx = np.sort(rng.choice(ds.n_obs, size=count, replace=False))
    else:
        n_blocks = int(scheme.fraction_or_blocks)
        if n_blocks > ds.n_blocks:
            raise DataValidationError(
                f"requested {n_blocks} contaminated blocks, dataset has {ds.n_blocks}")
        blocks = rng.choice(ds.n_blocks, size=n_blocks, replace=False)
        mask = ds.Xb[:, np.sort(blocks)].sum(axis=1) > 0
        idx = np.nonzero(mask)[0]
    y_new = ds.y.copy()
    y_new[idx] += scheme.shift_multiplier * sigma_e
    return replace_phenotypes(ds, y_new), idx


def save_truth(truth: dict, path) -> None:
    """Truth sidecar CSV with columns quantity,value."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("quantity,value\n")
        for name in ("H_p_true", "sigma2_g", "sigma2_b", "sigma2_e"):
            fh.write(f"{name},{truth[name]:.17g}\n")
        fh.write(f"phi,{truth['gamma'][0]:.17g}\n")
        for j, val in enumerate(truth["u_g"]):
            fh.write(f"u_g_{j + 1},{val:.17g}\n")


def load_truth(path) -> dict:
    values: dict[str, float] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if header.strip() != "quantity,value":
            raise DataValidationError(f"{path}: expected header quantity,value")
        for line in fh:
            name, _, raw = line.strip().partition(",")
            if name:
                values[name] = float(raw)
    u_g = [values[k] for k in sorted(
        (k for k in values if k.startswith("u_g_")),
        key=lambda k: int(k.split("_")[-1]))]
    out = {k: v for k, v in values.items() if not k.startswith("u_g_")}
    out["u_g"] = np.array(u_g)
    return out
