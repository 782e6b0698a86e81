"""Generator tests: covariance against the kernel oracle, task offsets,
determinism, and the GP-fit calibration chain."""

import numpy as np
import pytest
from scipy import stats

from windndp.gp import fit_gp, gp_predict, gp_summary
from windndp.synthetic import SyntheticTaskSpec, sample_gp_functions, sample_multitask_functions


def kernel_oracle(x, signal_variance, lengthscale):
    """Independent double-loop RBF evaluation."""
    n = len(x)
    out = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = signal_variance * np.exp(
                -0.5 * np.sum((x[i] - x[j]) ** 2) / lengthscale**2
            )
    return out


class TestSingleTask:
    def test_empirical_covariance_matches_kernel(self):
        # 10^4 draws at 5 fixed inputs: the sample covariance must match the
        # kernel matrix (plus noise on the diagonal) entrywise
        spec = SyntheticTaskSpec(offsets=(0.7,))
        x_fixed = np.array([-0.2, -0.1, 0.0, 0.1, 0.2])[:, None]
        samples, _ = sample_gp_functions(
            spec, 10_000, 5, np.random.default_rng(0), inputs=x_fixed
        )
        ys = np.stack([s.y for s in samples])
        expected = kernel_oracle(x_fixed, spec.signal_variance, spec.lengthscale)
        expected += spec.noise_variance * np.eye(5)
        np.testing.assert_allclose(np.cov(ys.T), expected, rtol=0.05)
        np.testing.assert_allclose(ys.mean(axis=0), 0.7, atol=0.05)

    def test_same_seed_identical(self):
        spec = SyntheticTaskSpec()
        a, _ = sample_gp_functions(spec, 3, 10, np.random.default_rng(5))
        b, _ = sample_gp_functions(spec, 3, 10, np.random.default_rng(5))
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.x, sb.x)
            np.testing.assert_array_equal(sa.y, sb.y)

    def test_zero_signal_gives_offset_plus_noise(self):
        spec = SyntheticTaskSpec(signal_variance=0.0, noise_variance=0.04, offsets=(1.5,))
        samples, _ = sample_gp_functions(spec, 20, 100, np.random.default_rng(2))
        y = np.concatenate([s.y for s in samples])
        assert y.mean() == pytest.approx(1.5, abs=0.02)
        assert y.std() == pytest.approx(0.2, rel=0.1)

    def test_inputs_within_domain(self):
        spec = SyntheticTaskSpec(domain=(-1.0, 3.0), input_dim=2)
        samples, _ = sample_gp_functions(spec, 4, 25, np.random.default_rng(3))
        for s in samples:
            assert s.x.shape == (25, 2)
            assert np.all(s.x >= -1.0) and np.all(s.x <= 3.0)

    def test_context_pool_on_same_function_disjoint_rows(self):
        spec = SyntheticTaskSpec()
        samples, pools = sample_gp_functions(
            spec, 5, 16, np.random.default_rng(4), context_size=8
        )
        assert len(pools) == 5
        for s, p in zip(samples, pools):
            assert p.size == 8
            target_rows = {tuple(row) for row in s.x}
            pool_rows = {tuple(row) for row in p.x}
            assert target_rows.isdisjoint(pool_rows)
            # smoothness carries across the split: pool values correlate
            # with target values through the shared function
            assert np.isfinite(p.y).all()

    def test_validation(self):
        with pytest.raises(ValueError, match="interval"):
            SyntheticTaskSpec(domain=(1.0, 1.0))
        with pytest.raises(ValueError, match="align"):
            SyntheticTaskSpec(offsets=(0.0, 1.0), lengthscale_multipliers=(1.0,))
        spec = SyntheticTaskSpec()
        with pytest.raises(ValueError, match="out of range"):
            sample_gp_functions(spec, 1, 4, np.random.default_rng(0), task_index=1)


class TestMultiTask:
    def test_counts_and_task_ids(self):
        spec = SyntheticTaskSpec(offsets=(-1.0, 0.0, 1.0))
        samples, pools = sample_multitask_functions(
            spec, [2, 3, 4], 8, np.random.default_rng(0), context_size=4
        )
        assert [s.task_id for s in samples] == ["task0"] * 2 + ["task1"] * 3 + ["task2"] * 4
        assert len(pools) == 9
        assert all(s.n_points == 8 for s in samples)

    def test_degenerate_perturbation_indistinguishable(self):
        # points within one function are correlated, so the independent unit
        # for the two-sample test is the per-function mean
        spec = SyntheticTaskSpec(offsets=(0.0, 0.0))
        samples, _ = sample_multitask_functions(spec, 60, 50, np.random.default_rng(1))
        m0 = [s.y.mean() for s in samples if s.task_id == "task0"]
        m1 = [s.y.mean() for s in samples if s.task_id == "task1"]
        assert stats.ttest_ind(m0, m1).pvalue > 0.01

    def test_offset_separates_means(self):
        spec = SyntheticTaskSpec(offsets=(0.0, 2.0))
        samples, _ = sample_multitask_functions(spec, 200, 50, np.random.default_rng(2))
        y0 = np.concatenate([s.y for s in samples if s.task_id == "task0"])
        y1 = np.concatenate([s.y for s in samples if s.task_id == "task1"])
        assert y1.mean() - y0.mean() > 1.5

    def test_scalar_count_broadcasts(self):
        spec = SyntheticTaskSpec(offsets=(0.0, 1.0))
        samples, _ = sample_multitask_functions(spec, 3, 8, np.random.default_rng(3))
        assert len(samples) == 6


class TestCalibrationChain:
    def test_generated_function_passes_gp_self_calibration(self):
        # one long draw, fit on a slice, check interval coverage on the rest:
        # validates generator, GP fit and the coverage pipeline together
        spec = SyntheticTaskSpec()
        samples, pools = sample_gp_functions(
            spec, 1, 100, np.random.default_rng(6), context_size=1000
        )
        train, test = samples[0], pools[0]
        post = fit_gp(train.x, train.y, seed=0)
        summary = gp_summary(post, test.x)
        covered = (summary.lower <= test.y) & (test.y <= summary.upper)
        ce = np.mean(np.abs(covered.mean(axis=1) - summary.levels))
        assert ce < 0.03

    def test_fitted_mean_tracks_function(self):
        spec = SyntheticTaskSpec(noise_variance=0.001)
        samples, pools = sample_gp_functions(
            spec, 1, 80, np.random.default_rng(7), context_size=40
        )
        post = fit_gp(samples[0].x, samples[0].y, seed=0)
        mean, _ = gp_predict(post, pools[0].x)
        rmse = np.sqrt(np.mean((mean - pools[0].y) ** 2))
        assert rmse < 0.2  # far below the unit prior scale
