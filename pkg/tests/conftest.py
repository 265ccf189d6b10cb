import numpy as np
import pytest

from genopred.core import PhenotypeDataset


def random_dataset(rng, N=12, p=3, B=2, r=2, L=1, coding=(0, 1)):
    """Small random-but-valid dataset for kernel tests."""
    sizes = [N // r] * (r - 1) + [N - (N // r) * (r - 1)]
    codes = np.array(coding, dtype=float)
    Xg = rng.choice(codes, size=(N, p))
    Xb = np.zeros((N, B))
    Xb[np.arange(N), rng.integers(0, B, N)] = 1.0
    cols = [np.ones(N)]
    for _ in range(L - 1):
        cols.append(rng.normal(size=N))
    Z = np.column_stack(cols)
    y = rng.normal(size=N)
    genotype_of = np.arange(N) % max(N // r, 1)
    return PhenotypeDataset(y=y, replicate_sizes=sizes, Z=Z, Xg=Xg, Xb=Xb,
                            genotype_of=genotype_of, coding=coding)


@pytest.fixture
def rng():
    return np.random.default_rng(20240117)


PHENO_6ROW = """id,replicate,block,y
g1,1,1,1.5
g2,1,1,2.5
g3,1,2,3.5
g1,2,1,1.0
g2,2,2,2.0
g3,2,2,3.0
"""

MARKER_6ROW = """id,m_1,m_2
g1,0,1
g2,1,0
g3,1,1
"""


@pytest.fixture
def csv_pair(tmp_path):
    """The six-row toy dataset from the loader contract."""
    pheno = tmp_path / "phenotypes.csv"
    markers = tmp_path / "markers.csv"
    pheno.write_text(PHENO_6ROW)
    markers.write_text(MARKER_6ROW)
    return pheno, markers
