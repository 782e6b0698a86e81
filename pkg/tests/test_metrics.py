"""Metric and protocol tests: hand-computed oracles, shared fixtures,
PCA geometry."""

import numpy as np
import pytest
import torch

from windndp.diffusion import (
    DEFAULT_LEVELS,
    ContextSet,
    FunctionSample,
    PredictiveSummary,
)
from windndp.encoder import init_task_encoder
from windndp.errors import ConfigurationError
from windndp.gp import fit_gp
from windndp.metrics import (
    DiffusionAdapter,
    GpAdapter,
    MetricsReport,
    coverage_error,
    empirical_coverage,
    encoder_separation,
    evaluate_protocol,
    mae_rmse,
    pca_embeddings,
    separation_ratio,
)
from windndp.scada import NormalizationStats
from windndp.schedules import build_cosine_schedule


class TestMaeRmse:
    def test_perfect_prediction(self):
        y = np.array([1.0, -2.0, 3.0])
        assert mae_rmse(y, y) == (0.0, 0.0)

    def test_hand_case(self):
        y = np.array([3.0, -4.0])
        mae, rmse = mae_rmse(y, np.zeros(2))
        assert mae == pytest.approx(3.5)
        assert rmse == pytest.approx(np.sqrt(12.5))

    def test_constant_residual(self):
        y = np.linspace(-1, 1, 9)
        mae, rmse = mae_rmse(y + 0.7, y)
        assert mae == pytest.approx(0.7) and rmse == pytest.approx(0.7)

    def test_mae_bounded_by_rmse(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            y = rng.normal(size=17)
            y_hat = rng.normal(size=17)
            mae, rmse = mae_rmse(y, y_hat)
            assert mae <= rmse + 1e-12

    def test_validation(self):
        with pytest.raises(ValueError):
            mae_rmse(np.zeros(0), np.zeros(0))
        with pytest.raises(ValueError):
            mae_rmse(np.zeros(3), np.zeros(4))


def interval_grid(y, cover_counts):
    """Build per-level intervals covering exactly cover_counts[j] points."""
    n = y.shape[0]
    lower = np.empty((len(cover_counts), n))
    upper = np.empty((len(cover_counts), n))
    order = np.argsort(y)
    for j, k in enumerate(cover_counts):
        lo = np.full(n, 1.0)
        hi = np.full(n, -1.0)  # [y+1, y+2] misses the point
        covered = order[:k]
        lower[j] = y + np.where(np.isin(np.arange(n), covered), -lo, 1.0)
        upper[j] = y + np.where(np.isin(np.arange(n), covered), lo, 2.0)
    return lower, upper


class TestCoverageError:
    def test_exact_nominal_coverage_gives_zero(self):
        # 20 points, levels 0.05..0.95: q*20 is an integer for every q
        y = np.arange(20, dtype=np.float64)
        counts = [int(round(q * 20)) for q in DEFAULT_LEVELS]
        lower, upper = interval_grid(y, counts)
        ce, coverage = coverage_error(y, lower, upper, DEFAULT_LEVELS)
        assert ce == pytest.approx(0.0, abs=1e-15)
        np.testing.assert_allclose(coverage, DEFAULT_LEVELS)

    def test_zero_width_intervals(self):
        y = np.random.default_rng(0).normal(size=50)
        point = np.tile(y + 0.1, (19, 1))  # zero width, off the data
        ce, coverage = coverage_error(y, point, point, DEFAULT_LEVELS)
        assert ce == pytest.approx(np.mean(DEFAULT_LEVELS))  # = 0.5
        assert ce == pytest.approx(0.5)
        assert np.all(coverage == 0)

    def test_infinite_width_intervals(self):
        y = np.random.default_rng(1).normal(size=50)
        lower = np.full((19, 50), -np.inf)
        upper = np.full((19, 50), np.inf)
        ce, coverage = coverage_error(y, lower, upper, DEFAULT_LEVELS)
        assert ce == pytest.approx(np.mean(1.0 - DEFAULT_LEVELS))
        assert ce == pytest.approx(0.5)
        assert np.all(coverage == 1)

    def test_order_invariance(self):
        rng = np.random.default_rng(2)
        y = rng.normal(size=30)
        width = np.linspace(0.1, 3.0, 19)[:, None]
        lower, upper = y - width, y + width
        ce, _ = coverage_error(y, lower, upper, DEFAULT_LEVELS)
        perm = rng.permutation(30)
        ce_p, _ = coverage_error(y[perm], lower[:, perm], upper[:, perm], DEFAULT_LEVELS)
        assert ce == pytest.approx(ce_p, abs=0)

    def test_ce_range_property(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            y = rng.normal(size=25)
            width = np.sort(rng.uniform(0, 2, 19))[:, None]
            ce, _ = coverage_error(y, y - width, y + width, DEFAULT_LEVELS)
            assert 0.0 <= ce <= max(np.mean(DEFAULT_LEVELS), np.mean(1 - DEFAULT_LEVELS))

    def test_decreasing_coverage_rejected(self):
        y = np.zeros(4)
        lower = np.stack([np.full(4, -1.0)] + [np.full(4, 1.0)] * 18)
        upper = np.stack([np.full(4, 1.0)] + [np.full(4, 2.0)] * 18)
        with pytest.raises(ValueError, match="non-decreasing"):
            coverage_error(y, lower, upper, DEFAULT_LEVELS)

    def test_shape_validation(self):
        y = np.zeros(5)
        with pytest.raises(ValueError, match="levels"):
            coverage_error(y, np.zeros((7, 5)), np.zeros((7, 5)), DEFAULT_LEVELS)
        with pytest.raises(ValueError, match="match"):
            coverage_error(y, np.zeros((19, 6)), np.zeros((19, 6)), DEFAULT_LEVELS)


# --------------------------------------------------------------------------
# protocol
# --------------------------------------------------------------------------


def make_fixtures(n_samples=4, n_points=12, pool=30, d=1, seed=0):
    rng = np.random.default_rng(seed)
    samples, contexts = [], []
    for i in range(n_samples):
        samples.append(
            FunctionSample(
                x=rng.uniform(-2, 2, size=(n_points, d)),
                y=rng.normal(size=n_points),
                task_id=f"task{i % 2}",
            )
        )
        contexts.append(
            ContextSet(
                x=rng.uniform(-2, 2, size=(pool, d)), y=rng.normal(size=pool), task_id=f"task{i % 2}"
            )
        )
    return samples, contexts


class OracleAdapter:
    """Returns the true targets with fixed-width intervals; records the
    context sets it was handed."""

    name = "oracle"

    def __init__(self, truths, bias=0.0):
        self.truths = {id(t.x): t.y for t in truths}
        self.seen = []

    def predict_batch(self, samples, contexts, seeds):
        self.seen.append([c.x.copy() for c in contexts])
        out = []
        for s in samples:
            width = np.linspace(0.5, 5.0, 19)[:, None] * np.ones(s.n_points)
            out.append(
                PredictiveSummary(
                    x=s.x, mean=s.y.copy(), levels=DEFAULT_LEVELS,
                    lower=s.y - width, upper=s.y + width,
                )
            )
        return out


class TestEvaluateProtocol:
    def test_oracle_scores_zero_error(self):
        samples, contexts = make_fixtures()
        report = evaluate_protocol(
            OracleAdapter(samples), samples, contexts, context_sizes=(0, 5, 10)
        )
        assert report.context_sizes == (0, 5, 10)
        for agg in report.aggregates():
            assert agg["mae_mean"] == 0.0 and agg["rmse_mean"] == 0.0
            assert agg["n_samples"] == 4

    def test_contexts_are_nested_prefixes(self):
        samples, contexts = make_fixtures()
        adapter = OracleAdapter(samples)
        evaluate_protocol(adapter, samples, contexts, context_sizes=(3, 7))
        first, second = adapter.seen
        for c3, c7, pool in zip(first, second, contexts):
            assert c3.shape == (3, 1) and c7.shape == (7, 1)
            np.testing.assert_array_equal(c7[:3], c3)
            np.testing.assert_array_equal(pool.x[:7], c7)

    def test_aggregate_is_arithmetic_mean(self):
        samples, contexts = make_fixtures(n_samples=6)

        class Jitter(OracleAdapter):
            name = "jitter"

            def predict_batch(self, samples, contexts, seeds):
                out = super().predict_batch(samples, contexts, seeds)
                return [
                    PredictiveSummary(
                        x=s.x, mean=p.mean + 0.1 * (i + 1), levels=p.levels,
                        lower=p.lower, upper=p.upper,
                    )
                    for i, (s, p) in enumerate(zip(samples, out))
                ]

        report = evaluate_protocol(Jitter(samples), samples, contexts, context_sizes=(0,))
        maes = [s.mae for s in report.subset(0)]
        assert report.aggregate(0)["mae_mean"] == pytest.approx(
            sum(maes) / len(maes), abs=1e-12
        )
        np.testing.assert_allclose(maes, 0.1 * np.arange(1, 7), atol=1e-12)

    def test_destandardization_to_physical_units(self):
        samples, contexts = make_fixtures(n_samples=3)
        stats = NormalizationStats(np.zeros(1), np.ones(1), target_mean=250.0, target_std=100.0)

        class Biased(OracleAdapter):
            name = "biased"

            def predict_batch(self, samples, contexts, seeds):
                out = super().predict_batch(samples, contexts, seeds)
                return [
                    PredictiveSummary(
                        x=s.x, mean=p.mean + 0.25, levels=p.levels,
                        lower=p.lower, upper=p.upper,
                    )
                    for s, p in zip(samples, out)
                ]

        report = evaluate_protocol(
            Biased(samples), samples, contexts, context_sizes=(0,), stats=stats
        )
        # 0.25 standardized units × 100 kW per unit
        assert report.aggregate(0)["mae_mean"] == pytest.approx(25.0, rel=1e-12)

    def test_pool_too_small_is_configuration_error(self):
        samples, contexts = make_fixtures(pool=8)
        with pytest.raises(ConfigurationError, match="pool"):
            evaluate_protocol(OracleAdapter(samples), samples, contexts, context_sizes=(0, 25))

    def test_diffusion_adapter_deterministic(self):
        schedule = build_cosine_schedule(8)

        def zero_model(x_rows, y_rows, t_idx):
            return torch.zeros_like(y_rows)

        samples, contexts = make_fixtures(n_samples=2, n_points=5, pool=6)
        adapter = DiffusionAdapter(zero_model, schedule, n_trajectories=8)
        assert adapter.name == "ndp"
        r1 = evaluate_protocol(adapter, samples, contexts, context_sizes=(0, 2), seed=11)
        r2 = evaluate_protocol(adapter, samples, contexts, context_sizes=(0, 2), seed=11)
        r3 = evaluate_protocol(adapter, samples, contexts, context_sizes=(0, 2), seed=12)
        assert r1.to_dict() == r2.to_dict()
        assert r1.to_dict() != r3.to_dict()

    def test_gp_adapter_constant_across_context_sizes(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-2, 2, size=(25, 1))
        y = np.sin(2 * x[:, 0]) + rng.normal(0, 0.1, 25)
        posterior = fit_gp(x, y, n_restarts=1, seed=0)
        samples, contexts = make_fixtures(n_samples=3)
        report = evaluate_protocol(
            GpAdapter(posterior), samples, contexts, context_sizes=(0, 10)
        )
        a, b = report.aggregate(0), report.aggregate(10)
        assert a["mae_mean"] == b["mae_mean"]
        assert a["ce_mean"] == b["ce_mean"]

    def test_report_roundtrip(self, tmp_path):
        samples, contexts = make_fixtures()
        report = evaluate_protocol(
            OracleAdapter(samples), samples, contexts, context_sizes=(0, 5), seed=3,
            feature_set="F1", meta={"checkpoint": "abc123"},
        )
        path = report.save(tmp_path / "report.json")
        again = MetricsReport.load(path)
        assert again.to_dict() == report.to_dict()
        assert again.meta["checkpoint"] == "abc123"
        assert again.feature_set == "F1"
        frame = again.frame()
        assert len(frame) == 8 and set(frame["context_size"]) == {0, 5}

    def test_coverage_curve(self):
        samples, contexts = make_fixtures()
        report = evaluate_protocol(OracleAdapter(samples), samples, contexts, context_sizes=(0,))
        levels, observed = report.coverage_curve(0)
        np.testing.assert_array_equal(levels, DEFAULT_LEVELS)
        assert observed.shape == (19,)
        assert np.all(np.diff(observed) >= 0)


# --------------------------------------------------------------------------
# PCA and separation
# --------------------------------------------------------------------------


class TestPca:
    def test_two_clusters_align_pc1(self):
        rng = np.random.default_rng(0)
        direction = np.array([3.0, 4.0, 0.0, 0.0]) / 5.0
        a = rng.normal(0, 0.05, size=(40, 4)) - 2 * direction
        b = rng.normal(0, 0.05, size=(40, 4)) + 2 * direction
        proj = pca_embeddings(np.vstack([a, b]), ["a"] * 40 + ["b"] * 40)
        cos = abs(float(proj.components[0] @ direction))
        assert cos > 0.99
        assert not proj.degenerate
        # orthonormal components, non-increasing variance
        np.testing.assert_allclose(proj.components @ proj.components.T, np.eye(2), atol=1e-12)
        assert proj.explained_variance[0] >= proj.explained_variance[1]
        # group means separated along PC1
        assert abs(proj.group_means["a"][0] - proj.group_means["b"][0]) > 3.5

    def test_planar_data_distances_preserved(self):
        rng = np.random.default_rng(1)
        flat = rng.normal(size=(30, 2))
        lift, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        cloud = np.c_[flat, np.zeros((30, 6))] @ lift.T
        proj = pca_embeddings(cloud)
        d_orig = np.linalg.norm(cloud[:, None] - cloud[None, :], axis=-1)
        d_proj = np.linalg.norm(proj.points[:, None] - proj.points[None, :], axis=-1)
        np.testing.assert_allclose(d_proj, d_orig, atol=1e-9)

    def test_identical_embeddings_degenerate(self):
        cloud = np.ones((10, 5))
        with pytest.warns(RuntimeWarning, match="rank"):
            proj = pca_embeddings(cloud)
        assert proj.degenerate and proj.components.shape[0] == 1
        assert proj.explained_variance[0] == pytest.approx(0.0, abs=1e-12)

    def test_line_data_falls_back_to_one_component(self):
        t = np.linspace(0, 1, 15)[:, None]
        cloud = t * np.array([1.0, 2.0, -1.0])
        with pytest.warns(RuntimeWarning, match="rank"):
            proj = pca_embeddings(cloud)
        assert proj.components.shape == (1, 3)
        assert proj.points.shape == (15, 1)

    def test_ellipse_axes_match_cluster_spread(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(4000, 2)) * np.array([2.0, 0.5])
        proj = pca_embeddings(pts, ["g"] * 4000)
        axes = np.sort(proj.ellipses["g"]["axis_lengths"])[::-1]
        from scipy.stats import chi2

        scale = np.sqrt(chi2.ppf(0.68, 2))
        np.testing.assert_allclose(axes, [2.0 * scale, 0.5 * scale], rtol=0.1)

    def test_validation(self):
        with pytest.raises(ValueError):
            pca_embeddings(np.zeros((1, 4)))
        with pytest.raises(ValueError, match="label"):
            pca_embeddings(np.zeros((4, 4)), ["a"])


class TestSeparation:
    def test_hand_computed_ratio(self):
        pts = np.array([[0.0, 0.0], [0.0, 2.0], [10.0, 0.0], [10.0, 2.0]])
        ratio = separation_ratio(pts, ["a", "a", "b", "b"])
        # between = 4·25, within = 4·1
        assert ratio == pytest.approx(25.0)

    def test_point_masses(self):
        pts = np.array([[0.0], [0.0], [1.0], [1.0]])
        assert separation_ratio(pts, ["a", "a", "b", "b"]) == np.inf
        assert separation_ratio(np.zeros((4, 1)), ["a", "a", "b", "b"]) == 0.0

    def test_needs_two_groups(self):
        with pytest.raises(ValueError, match="group"):
            separation_ratio(np.zeros((3, 2)), ["a", "a", "a"])

    def test_encoder_separation_buckets(self):
        encoder = init_task_encoder(input_dim=2, output_dim=4, width=16, depth=2, seed=1)
        rng = np.random.default_rng(0)
        pools = {}
        for task, offset in (("lo", -5.0), ("hi", 5.0)):
            x = rng.uniform(-2, 2, size=(300, 1))
            pools[task] = (x, offset + 0.1 * rng.normal(size=300))
        result = encoder_separation(
            encoder, pools, buckets=((0, 4), (46, 50)), draws_per_task=30, seed=7
        )
        assert set(result) == {"0-4", "46-50"}
        small, large = result["0-4"], result["46-50"]
        assert large["ratio"] > small["ratio"]
        assert small["projection"].points.shape[0] == 60
        # deterministic under the seed
        again = encoder_separation(
            encoder, pools, buckets=((0, 4), (46, 50)), draws_per_task=30, seed=7
        )
        assert again["46-50"]["ratio"] == result["46-50"]["ratio"]
