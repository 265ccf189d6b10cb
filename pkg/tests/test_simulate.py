import numpy as np
import pytest

from genopred.core import DataValidationError
from genopred.simulate import (ContaminationScheme, SimulationConfig,
                               contaminate, make_rng, mix_seed, normal_draws,
                               round_half_up, simulate)

DESK = dict(phi=10.0, sigma2_g=1.0, sigma2_b=4.0, sigma2_e=25.0,
            n_genotypes=50, replicates=2, p=20, block_layout=(5,) * 10,
            marker_maf=0.3)


class TestSimulate:
    def test_degenerate_noise_returns_mean(self):
        cfg = SimulationConfig(phi=0.05, sigma2_g=0.0, sigma2_b=0.0,
                               sigma2_e=1e-10, n_genotypes=20, replicates=2,
                               p=5, block_layout=(5, 5, 5, 5), seed=3)
        ds, _ = simulate(cfg)
        assert np.max(np.abs(ds.y - 0.05)) < 1e-4

    def test_published_parameter_layout(self):
        cfg = SimulationConfig()  # defaults carry the published setup
        assert cfg.sigma2_b == 6.27
        assert cfg.sigma2_e == 53.8715
        assert cfg.sigma2_g == 0.005892
        cfg_small = SimulationConfig(phi=0.05, sigma2_g=0.005892, sigma2_b=6.27,
                                     sigma2_e=53.8715, n_genotypes=715,
                                     replicates=2, p=40,
                                     block_layout=(13,) * 5 + (10,) * 65, seed=11)
        ds, _ = simulate(cfg_small)
        assert ds.n_obs == 1430
        assert ds.n_blocks == 70
        # every block appears in both replicates
        for sl in ds.replicate_slices():
            assert np.all(ds.Xb[sl].sum(axis=0) > 0)

    def test_seeded_determinism(self):
        a, ta = simulate(SimulationConfig(seed=99, **DESK))
        b, tb = simulate(SimulationConfig(seed=99, **DESK))
        assert np.array_equal(a.y, b.y)
        assert np.array_equal(a.Xg, b.Xg)
        assert np.array_equal(a.Xb, b.Xb)
        assert np.array_equal(ta["u_g"], tb["u_g"])
        c, _ = simulate(SimulationConfig(seed=100, **DESK))
        assert not np.array_equal(a.y, c.y)

    def test_marker_alphabet_binary(self):
        ds, _ = simulate(SimulationConfig(seed=5, **DESK))
        assert set(np.unique(ds.Xg)) <= {0.0, 1.0}

    def test_zero_genetic_variance_truth(self):
        cfg = SimulationConfig(seed=2, **{**DESK, "sigma2_g": 0.0})
        _, truth = simulate(cfg)
        assert truth["H_p_true"] == 0.0

    def test_truth_matches_realized_variance(self):
        cfg = SimulationConfig(seed=8, **DESK)
        _, truth = simulate(cfg)
        var_g = np.var(truth["g"], ddof=1)
        expected = var_g / (var_g + cfg.sigma2_e / cfg.replicates)
        assert truth["H_p_true"] == pytest.approx(expected, rel=1e-12)

    def test_layout_must_cover_genotypes(self):
        with pytest.raises(DataValidationError, match="block layout"):
            SimulationConfig(n_genotypes=20, block_layout=(5, 5), p=5)


class TestNormalDraws:
    def test_moments_within_two_percent(self):
        rng = make_rng(123)
        e = normal_draws(rng, 100_000, sigma=3.0)
        assert abs(np.var(e) - 9.0) / 9.0 < 0.02
        assert abs(np.mean(e)) < 0.05


class TestContaminate:
    def test_random_scheme_exact_count_and_shift(self):
        ds, _ = simulate(SimulationConfig(seed=7, **DESK))
        scheme = ContaminationScheme.random(0.05, 5.0)
        ds_c, idx = contaminate(ds, scheme, sigma_e=2.0, seed=42)
        assert idx.size == round_half_up(0.05 * ds.n_obs)
        assert np.unique(idx).size == idx.size
        assert np.allclose(ds_c.y[idx] - ds.y[idx], 10.0)
        mask = np.ones(ds.n_obs, bool)
        mask[idx] = False
        assert np.array_equal(ds_c.y[mask], ds.y[mask])

    def test_none_scheme_identity(self):
        ds, _ = simulate(SimulationConfig(seed=7, **DESK))
        ds_c, idx = contaminate(ds, ContaminationScheme.none(), 2.0, 1)
        assert idx.size == 0
        assert np.array_equal(ds_c.y, ds.y)

    def test_block_scheme_field_trial_bounds(self):
        cfg = SimulationConfig(phi=0.0, sigma2_g=0.01, sigma2_b=1.0, sigma2_e=1.0,
                               n_genotypes=715, replicates=2, p=10,
                               block_layout=(13,) * 5 + (10,) * 65, seed=13)
        ds, _ = simulate(cfg)
        ds_c, idx = contaminate(ds, ContaminationScheme.block(5, 8.0), 1.0, 9)
        # 5 blocks x {10 or 13} observations x 2 replicates
        assert 100 <= idx.size <= 130
        assert np.allclose(ds_c.y[idx] - ds.y[idx], 8.0)

    def test_block_scheme_hits_all_replicates(self):
        ds, _ = simulate(SimulationConfig(seed=21, **DESK))
        ds_c, idx = contaminate(ds, ContaminationScheme.block(3, 8.0), 1.0, 5)
        touched = np.argmax(ds.Xb[idx], axis=1)
        blocks = np.unique(touched)
        assert blocks.size == 3
        for sl in ds.replicate_slices():
            rep_blocks = np.unique(np.argmax(ds.Xb[sl], axis=1)[np.isin(
                np.arange(ds.n_obs)[sl], idx)])
            assert np.array_equal(rep_blocks, blocks)

    def test_design_untouched(self):
        ds, _ = simulate(SimulationConfig(seed=7, **DESK))
        ds_c, _ = contaminate(ds, ContaminationScheme.random(0.1, 5.0), 2.0, 3)
        assert ds_c.Xg is ds.Xg
        assert ds_c.Xb is ds.Xb
        assert ds_c.Z is ds.Z
        assert np.array_equal(ds_c.replicate_sizes, ds.replicate_sizes)

    def test_too_many_blocks_rejected(self):
        ds, _ = simulate(SimulationConfig(seed=7, **DESK))
        with pytest.raises(DataValidationError, match="blocks"):
            contaminate(ds, ContaminationScheme.block(11, 8.0), 1.0, 1)

    def test_minimum_one_observation(self):
        ds, _ = simulate(SimulationConfig(seed=7, **DESK))
        _, idx = contaminate(ds, ContaminationScheme.random(0.001, 5.0), 1.0, 1)
        assert idx.size == 1


def test_round_half_up():
    assert round_half_up(35.75) == 36
    assert round_half_up(71.5) == 72
    assert round_half_up(70.5) == 71
    assert round_half_up(5.0) == 5


def test_mix_seed_is_deterministic_and_spreads():
    assert mix_seed(1, 2, 3) == mix_seed(1, 2, 3)
    assert mix_seed(1, 2) != mix_seed(1, 3)
    assert mix_seed(1, 2) != mix_seed(2, 2)
    assert 0 <= mix_seed(2**63, 7) < 2**64
