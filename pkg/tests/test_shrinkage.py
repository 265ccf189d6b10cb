import numpy as np
import pytest

from genopred.core import PhenotypeDataset, VarianceComponents, replace_phenotypes
from genopred.shrinkage import (ShrinkageError, anova_per_marker,
                                marker_moment_variances, rmla_shrinkage,
                                rmla_variances, rmlv_fit)
from genopred.simulate import SimulationConfig, make_rng, mix_seed, normal_draws, simulate

from conftest import random_dataset


def brute_force_anova(y, codes, alphabet):
    """Direct sums-of-squares oracle."""
    groups = [y[codes == c] for c in alphabet if np.any(codes == c)]
    k = len(groups)
    grand = y.mean()
    ssb = sum(len(g) * (g.mean() - grand) ** 2 for g in groups)
    ssw = sum(((g - g.mean()) ** 2).sum() for g in groups)
    return ssb / (k - 1), ssw / (len(y) - k) if len(y) > k else 0.0


def two_group_dataset(y_values, codes):
    n = len(y_values)
    Xg = np.array(codes, dtype=float).reshape(-1, 1)
    Xb = np.ones((n, 1))
    return PhenotypeDataset(y=y_values, replicate_sizes=[n], Z=np.ones((n, 1)),
                            Xg=Xg, Xb=Xb, genotype_of=list(range(n)),
                            coding=(0, 1))


class TestAnova:
    def test_hand_computed_case(self):
        # groups (1,1) and (3,3): SSB = 4 with 1 df, SSW = 0
        ds = two_group_dataset([1.0, 1.0, 3.0, 3.0], [0, 0, 1, 1])
        summary = anova_per_marker(ds, 0)
        assert summary.mqm == pytest.approx(4.0, abs=1e-12)
        assert summary.mqe == pytest.approx(0.0, abs=1e-12)
        assert sorted(summary.group_sizes) == [2, 2]

    def test_constant_response(self):
        ds = two_group_dataset([2.0, 2.0, 2.0, 2.0], [0, 0, 1, 1])
        summary = anova_per_marker(ds, 0)
        assert summary.mqm == 0.0
        assert summary.mqe == 0.0

    def test_matches_brute_force(self, rng):
        ds = random_dataset(rng, N=30, p=4, B=2, r=2)
        for j in range(4):
            mqm, mqe = brute_force_anova(ds.y, ds.Xg[:, j], ds.coding)
            summary = anova_per_marker(ds, j)
            assert summary.mqm == pytest.approx(mqm, rel=1e-10)
            assert summary.mqe == pytest.approx(mqe, rel=1e-10)

    def test_sst_decomposition(self, rng):
        ds = random_dataset(rng, N=24, p=3, B=2)
        for j in range(3):
            s = anova_per_marker(ds, j)
            k = len(s.group_sizes)
            sst = float(((ds.y - ds.y.mean()) ** 2).sum())
            assert s.mqm * (k - 1) + s.mqe * (ds.n_obs - k) == pytest.approx(
                sst, rel=1e-10)

    def test_constant_marker_flagged(self):
        ds = two_group_dataset([1.0, 2.0, 3.0, 4.0], [1, 1, 1, 1])
        with pytest.raises(ShrinkageError, match="constant"):
            anova_per_marker(ds, 0)

    def test_vectorized_matches_scalar(self, rng):
        ds = random_dataset(rng, N=30, p=5, B=2)
        vec = marker_moment_variances(ds)
        N = ds.n_obs
        for j in range(5):
            s = anova_per_marker(ds, j)
            denom = 0.5 * (N - np.sum(s.group_sizes.astype(float) ** 2) / N)
            assert vec[j] == pytest.approx((s.mqm - s.mqe) / denom, rel=1e-10)


class TestRmla:
    def test_identical_markers_share_lambda(self, rng):
        ds0 = random_dataset(rng, N=20, p=1, B=2)
        Xg = np.repeat(ds0.Xg, 3, axis=1)  # three identical copies
        ds = PhenotypeDataset(y=ds0.y, replicate_sizes=ds0.replicate_sizes,
                              Z=ds0.Z, Xg=Xg, Xb=ds0.Xb,
                              genotype_of=ds0.genotype_of, coding=ds0.coding)
        base = VarianceComponents(sigma2_g=1.0, sigma2_b=1.0, sigma2_e=2.0,
                                  sigma2_u_total=4.0)
        lam = rmla_shrinkage(ds, base)
        assert np.allclose(lam, lam[0])
        assert lam[0] == pytest.approx(3 * 2.0 / 4.0, rel=1e-10)

    def test_inverse_proportionality(self, rng):
        # marker with twice the moment estimate gets half the penalty
        ds = random_dataset(rng, N=40, p=3, B=2)
        est = rmla_variances(ds)
        base = VarianceComponents(sigma2_g=1.0, sigma2_b=1.0, sigma2_e=2.0,
                                  sigma2_u_total=5.0)
        lam = rmla_shrinkage(ds, base)
        assert lam[0] * est[0] == pytest.approx(lam[1] * est[1], rel=1e-10)
        assert lam[0] * est[0] == pytest.approx(lam[2] * est[2], rel=1e-10)

    def test_against_stepwise_oracle(self):
        # markers with real effects so the moment estimates stay positive
        rng = make_rng(97)
        ds0 = random_dataset(rng, N=40, p=3, B=2)
        y = ds0.Xg @ np.array([3.0, -2.0, 1.0]) + normal_draws(rng, 40, 0.5)
        ds = replace_phenotypes(ds0, y)
        base = VarianceComponents(sigma2_g=0.7, sigma2_b=1.0, sigma2_e=1.9,
                                  sigma2_u_total=2.1)
        lam = rmla_shrinkage(ds, base)
        # literal walk through the moment formulas
        est = []
        for j in range(3):
            codes = ds.Xg[:, j]
            groups = [ds.y[codes == c] for c in ds.coding if np.any(codes == c)]
            k = len(groups)
            grand = ds.y.mean()
            mqm = sum(len(g) * (g.mean() - grand) ** 2 for g in groups) / (k - 1)
            mqe = sum(((g - g.mean()) ** 2).sum() for g in groups) / (ds.n_obs - k)
            n_i = np.array([len(g) for g in groups], dtype=float)
            est.append((mqm - mqe) / (0.5 * (ds.n_obs - np.sum(n_i ** 2) / ds.n_obs)))
        est = np.array(est)
        floor = 1e-8 * est[est > 0].mean()
        est = np.maximum(est, floor)
        expected = (1.9 / 2.1) * est.sum() / est
        assert np.allclose(lam, expected, rtol=1e-10)

    def test_permutation_equivariance(self, rng):
        ds = random_dataset(rng, N=30, p=4, B=2)
        base = VarianceComponents(sigma2_g=1.0, sigma2_b=1.0, sigma2_e=2.0,
                                  sigma2_u_total=4.0)
        lam = rmla_shrinkage(ds, base)
        perm = [2, 0, 3, 1]
        ds_p = PhenotypeDataset(y=ds.y, replicate_sizes=ds.replicate_sizes,
                                Z=ds.Z, Xg=ds.Xg[:, perm], Xb=ds.Xb,
                                genotype_of=ds.genotype_of, coding=ds.coding)
        lam_p = rmla_shrinkage(ds_p, base)
        assert np.allclose(lam_p, lam[perm], rtol=1e-12)

    def test_no_signal_warning(self):
        # constant phenotype: every moment estimate lands on the floor
        ds = two_group_dataset([2.0, 2.0, 2.0, 2.0], [0, 0, 1, 1])
        base = VarianceComponents(sigma2_g=1.0, sigma2_b=1.0, sigma2_e=2.0,
                                  sigma2_u_total=1.0)
        with pytest.warns(RuntimeWarning, match="no marker variance signal"):
            rmla_shrinkage(ds, base)


def _signal_dataset(seed, N=60, p=4, effects=None):
    rng = make_rng(seed)
    sizes = [N // 2, N - N // 2]
    Xg = (rng.random((N, p)) < 0.5).astype(float)
    B = 2
    Xb = np.zeros((N, B))
    Xb[np.arange(N), rng.integers(0, B, N)] = 1.0
    if effects is None:
        effects = np.full(p, 0.1)
        effects[0] = 10.0
    y = Xg @ np.asarray(effects, dtype=float) + normal_draws(rng, N, 1.0)
    return PhenotypeDataset(y=y, replicate_sizes=sizes, Z=np.ones((N, 1)),
                            Xg=Xg, Xb=Xb, genotype_of=np.arange(N) % (N // 2),
                            coding=(0, 1))


class TestRmlv:
    def test_strong_marker_gets_smallest_lambda(self):
        ds = _signal_dataset(31, effects=[0.1, 0.1, 10.0, 0.1])
        base = VarianceComponents(sigma2_g=1.0, sigma2_b=0.5, sigma2_e=1.0,
                                  sigma2_u_total=4.0)
        lam, vc, sol, _ = rmlv_fit(ds, base)
        assert np.argmin(lam) == 2
        assert np.argmax(vc.sigma2_g) == 2

    def _null_signal_norms(self):
        from genopred.mme import solve_mme
        norms_rmlv, norms_base = [], []
        for rep in range(20):
            rng = make_rng(mix_seed(41, rep))
            ds0 = random_dataset(rng, N=200, p=4, B=2)
            ds = replace_phenotypes(ds0, normal_draws(rng, 200, 1.0))
            base = VarianceComponents(sigma2_g=0.5, sigma2_b=0.5, sigma2_e=1.0,
                                      sigma2_u_total=2.0)
            lam, vc, sol, _ = rmlv_fit(ds, base, max_iter=400, tol=1e-8)
            norms_rmlv.append(np.linalg.norm(sol.u_hat[:4]))
            weak = solve_mme(ds, np.full(6, 1.0))
            norms_base.append(np.linalg.norm(weak.u_hat[:4]))
        return np.mean(norms_rmlv), np.mean(norms_base)

    @pytest.mark.xfail(
        strict=True,
        reason="the per-marker EM update keeps interior fixed points on "
               "markers whose chance correlation with the noise is large, "
               "so pure-noise runs retain ~30% of the weak-shrinkage "
               "effect norm rather than collapsing below 10%")
    def test_zero_signal_effects_vanish(self):
        mean_rmlv, mean_base = self._null_signal_norms()
        assert mean_rmlv < 0.10 * mean_base

    def test_zero_signal_shrinks_harder_than_fixed_penalty(self):
        mean_rmlv, mean_base = self._null_signal_norms()
        assert mean_rmlv < 0.5 * mean_base

    def test_fixed_point(self):
        ds = _signal_dataset(53)
        base = VarianceComponents(sigma2_g=1.0, sigma2_b=0.5, sigma2_e=1.0,
                                  sigma2_u_total=4.0)
        lam, vc, sol, converged = rmlv_fit(ds, base, max_iter=200, tol=1e-8)
        assert converged
        lam2, vc2, _, _ = rmlv_fit(ds, vc, max_iter=1, tol=1e-8)
        assert np.allclose(lam2, lam, rtol=1e-4)

    def test_residual_variance_stays_positive(self):
        ds = _signal_dataset(61)
        base = VarianceComponents(sigma2_g=1.0, sigma2_b=0.5, sigma2_e=1.0,
                                  sigma2_u_total=4.0)
        _, vc, _, _ = rmlv_fit(ds, base)
        assert vc.sigma2_e > 0
        assert np.all(np.isfinite(vc.sigma2_g))

    def test_literal_update_is_available(self):
        ds = _signal_dataset(71)
        base = VarianceComponents(sigma2_g=1.0, sigma2_b=0.5, sigma2_e=1.0,
                                  sigma2_u_total=4.0)
        lam_lit, vc_lit, _, _ = rmlv_fit(ds, base, literal_update=True)
        # the published update drives most variances to the floor
        assert np.all(lam_lit > 0)
        assert np.median(vc_lit.sigma2_g) <= np.median(rmla_variances(ds))
