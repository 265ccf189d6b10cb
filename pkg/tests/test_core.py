import numpy as np
import pytest

from genopred.core import (DataValidationError, PhenotypeDataset, load_dataset,
                           save_dataset, stack_design, subset_by_genotype,
                           variance_floor)
from genopred.simulate import SimulationConfig, simulate

from conftest import MARKER_6ROW, PHENO_6ROW, random_dataset


class TestLoadDataset:
    def test_six_row_round_trip(self, csv_pair):
        ds = load_dataset(*csv_pair, coding="binary")
        assert ds.n_obs == 6
        assert ds.n_replicates == 2
        assert ds.n_markers == 2
        assert ds.n_blocks == 2
        assert ds.n_genotypes == 3
        assert list(ds.replicate_sizes) == [3, 3]
        # intercept supplied by the loader
        assert ds.n_confounders == 1
        assert np.all(ds.Z == 1.0)

    def test_unknown_marker_code(self, tmp_path):
        pheno = tmp_path / "p.csv"
        markers = tmp_path / "m.csv"
        pheno.write_text(PHENO_6ROW)
        markers.write_text("id,m_1,m_2\ng1,0,1\ng2,2,0\ng3,1,1\n")
        with pytest.raises(DataValidationError, match="unknown marker code"):
            load_dataset(pheno, markers, coding="ternary")

    def test_field_trial_layout_715(self, tmp_path):
        # 715 rows in 70 blocks: 5 blocks of 13 plus 65 blocks of 10.
        cfg = SimulationConfig(phi=1.0, sigma2_g=0.1, sigma2_b=1.0, sigma2_e=1.0,
                               n_genotypes=715, replicates=1, p=3,
                               block_layout=(13,) * 5 + (10,) * 65, seed=4)
        ds, _ = simulate(cfg)
        save_dataset(ds, tmp_path / "p.csv", tmp_path / "m.csv")
        loaded = load_dataset(tmp_path / "p.csv", tmp_path / "m.csv", coding="binary")
        assert loaded.n_obs == 715
        assert loaded.n_blocks == 70
        assert sorted(loaded.Xb.sum(axis=0)) == [10.0] * 65 + [13.0] * 5

    def test_duplicate_observation_id(self, tmp_path):
        pheno = tmp_path / "p.csv"
        markers = tmp_path / "m.csv"
        pheno.write_text("id,replicate,block,y\ng1,1,1,1.0\ng1,1,2,2.0\n")
        markers.write_text("id,m_1\ng1,0\n")
        with pytest.raises(DataValidationError, match="duplicate observation id"):
            load_dataset(pheno, markers, coding="binary")

    def test_block_with_zero_observations(self, tmp_path):
        pheno = tmp_path / "p.csv"
        markers = tmp_path / "m.csv"
        # integer block labels 1 and 3: block 2 is missing
        pheno.write_text("id,replicate,block,y\ng1,1,1,1.0\ng2,1,3,2.0\n")
        markers.write_text("id,m_1\ng1,0\ng2,1\n")
        with pytest.raises(DataValidationError, match="zero observations"):
            load_dataset(pheno, markers, coding="binary")

    def test_rank_deficient_confounders(self, tmp_path):
        pheno = tmp_path / "p.csv"
        markers = tmp_path / "m.csv"
        rows = ["id,replicate,block,y,conf_1,conf_2"]
        for i in range(4):
            rows.append(f"g{i},1,1,{i}.0,{i}.0,{2 * i}.0")  # conf_2 = 2*conf_1
        pheno.write_text("\n".join(rows) + "\n")
        markers.write_text("id,m_1\n" + "".join(f"g{i},0\n" for i in range(4)))
        with pytest.raises(DataValidationError, match="rank-deficient"):
            load_dataset(pheno, markers, coding="binary")

    def test_dimension_mismatch(self, tmp_path):
        pheno = tmp_path / "p.csv"
        markers = tmp_path / "m.csv"
        pheno.write_text("id,replicate,block,y\ng1,1,1,1.0\ng2,1,1,2.0,extra\n")
        markers.write_text("id,m_1\ng1,0\ng2,1\n")
        with pytest.raises(DataValidationError, match="fields"):
            load_dataset(pheno, markers, coding="binary")

    def test_loading_is_deterministic(self, csv_pair):
        a = load_dataset(*csv_pair, coding="binary")
        b = load_dataset(*csv_pair, coding="binary")
        assert np.array_equal(a.y, b.y)
        assert np.array_equal(a.Xg, b.Xg)
        assert np.array_equal(a.Xb, b.Xb)
        assert a.ids == b.ids

    def test_save_load_round_trip(self, csv_pair, tmp_path):
        ds = load_dataset(*csv_pair, coding="binary")
        save_dataset(ds, tmp_path / "p2.csv", tmp_path / "m2.csv")
        again = load_dataset(tmp_path / "p2.csv", tmp_path / "m2.csv", coding="binary")
        assert np.array_equal(ds.y, again.y)
        assert np.array_equal(ds.Xg, again.Xg)
        assert np.array_equal(ds.Xb, again.Xb)
        assert np.array_equal(ds.genotype_of, again.genotype_of)


class TestStackDesign:
    def test_marker_columns_first(self):
        ds = PhenotypeDataset(
            y=[1.0, 2.0, 3.0], replicate_sizes=[3], Z=np.ones((3, 1)),
            Xg=[[0, 1], [1, 0], [1, 1]],
            Xb=[[1, 0], [0, 1], [1, 0]], genotype_of=[0, 1, 2], coding=(0, 1))
        X = stack_design(ds)
        assert X.shape == (3, 4)
        assert np.array_equal(X[:, :2], ds.Xg)
        assert np.array_equal(X[:, 2:], ds.Xb)

    def test_no_markers(self):
        ds = PhenotypeDataset(
            y=[1.0, 2.0], replicate_sizes=[2], Z=np.ones((2, 1)),
            Xg=np.empty((2, 0)), Xb=[[1, 0], [0, 1]],
            genotype_of=[0, 1], coding=(0, 1))
        assert np.array_equal(stack_design(ds), ds.Xb)

    def test_genomic_scale_shape(self):
        cfg = SimulationConfig(n_genotypes=715, replicates=1, p=11646,
                               block_layout=(13,) * 5 + (10,) * 65, seed=1)
        ds, _ = simulate(cfg)
        assert stack_design(ds).shape == (715, 11716)

    def test_split_recovers_blocks_exactly(self, rng):
        ds = random_dataset(rng, N=10, p=4, B=3)
        X = stack_design(ds)
        assert np.array_equal(X[:, :4], ds.Xg)
        assert np.array_equal(X[:, 4:], ds.Xb)


class TestInvariants:
    def test_every_row_in_exactly_one_block(self, rng):
        ds = random_dataset(rng, N=25, p=3, B=4)
        assert np.all(ds.Xb @ np.ones(ds.n_blocks) == 1.0)

    def test_bad_block_row_rejected(self, rng):
        ds = random_dataset(rng, N=6, p=2, B=2)
        Xb = ds.Xb.copy()
        Xb[0] = [1.0, 1.0]
        with pytest.raises(DataValidationError, match="does not sum"):
            PhenotypeDataset(y=ds.y, replicate_sizes=ds.replicate_sizes, Z=ds.Z,
                             Xg=ds.Xg, Xb=Xb, genotype_of=ds.genotype_of,
                             coding=ds.coding)

    def test_marker_alphabet_enforced(self, rng):
        ds = random_dataset(rng, N=6, p=2, B=2)
        Xg = ds.Xg.copy()
        Xg[0, 0] = 3.0
        with pytest.raises(DataValidationError, match="unknown marker code"):
            PhenotypeDataset(y=ds.y, replicate_sizes=ds.replicate_sizes, Z=ds.Z,
                             Xg=Xg, Xb=ds.Xb, genotype_of=ds.genotype_of,
                             coding=ds.coding)

    def test_arrays_are_immutable(self, rng):
        ds = random_dataset(rng)
        with pytest.raises(ValueError):
            ds.y[0] = 99.0

    def test_replicate_sizes_must_sum(self, rng):
        ds = random_dataset(rng, N=6)
        with pytest.raises(DataValidationError, match="replicate sizes"):
            PhenotypeDataset(y=ds.y, replicate_sizes=[2, 2], Z=ds.Z, Xg=ds.Xg,
                             Xb=ds.Xb, genotype_of=ds.genotype_of, coding=ds.coding)


class TestSubset:
    def test_subset_preserves_structure(self, rng):
        ds = random_dataset(rng, N=20, p=3, B=3, r=2)
        sub = subset_by_genotype(ds, [0, 2, 4])
        assert sub.n_obs == int(np.isin(ds.genotype_of, [0, 2, 4]).sum())
        assert sub.n_blocks == ds.n_blocks
        assert sub.n_markers == ds.n_markers
        assert np.all(sub.Xb.sum(axis=1) == 1.0)


def test_variance_floor_scales_with_positive_mean():
    est = np.array([1.0, 3.0, -0.5])
    assert variance_floor(est) == pytest.approx(1e-8 * 2.0)
    assert variance_floor(np.array([-1.0, -2.0])) == pytest.approx(1e-8)
