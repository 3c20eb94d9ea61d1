import numpy as np
import pytest

from hmmvb import (
    BlockStructure,
    Dataset,
    FitConfig,
    HmmVbModel,
    ModelValidationError,
    baum_welch_fit,
    bic,
    count_nonempty_components,
    forward_backward,
    initialize,
    log_likelihood,
    num_free_parameters,
    select_model,
)

from conftest import make_model, make_structure


def two_group_dataset(rng, n=300, d=4, gap=6.0, weights=None):
    half = n // 2
    X = rng.normal(size=(n, d))
    X[:half] -= gap / 2
    X[half:] += gap / 2
    return Dataset(X, weights=weights)


class TestFitConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(max_iterations=-1),
            dict(rel_loglik_tolerance=0.0),
            dict(covariance_ridge=-1e-9),
            dict(init_scheme="nope"),
            dict(subset_fraction=0.0),
            dict(subset_fraction=1.5),
            dict(covariance_shrinkage=-0.1),
            dict(restarts=0),
        ],
    )
    def test_rejects_bad_settings(self, kwargs):
        with pytest.raises(ModelValidationError):
            FitConfig(**kwargs)

    def test_zero_ridge_is_allowed(self):
        assert FitConfig(covariance_ridge=0.0).covariance_ridge == 0.0


class TestInitialize:
    @pytest.mark.parametrize("scheme", ["kmeans-full", "kmeans-subset", "random-centroids"])
    def test_schemes_produce_valid_models(self, scheme):
        rng = np.random.default_rng(300)
        ds = two_group_dataset(rng)
        s = BlockStructure((2, 2), (2, 3))
        config = FitConfig(init_scheme=scheme, rng_seed=1)
        model = initialize(ds, s, config)
        assert isinstance(model, HmmVbModel)
        assert model.structure == s
        # uniform start and transition rows
        assert np.abs(model.initial_probs - 0.5).max() < 1e-12
        assert np.abs(model.transitions[0] - 1 / 3).max() < 1e-12
        # initialization must already explain the data reasonably
        assert np.isfinite(log_likelihood(model, ds))

    def test_deterministic_under_fixed_rng(self):
        rng = np.random.default_rng(301)
        ds = two_group_dataset(rng)
        s = BlockStructure((2, 2), (2, 2))
        config = FitConfig(rng_seed=7)
        a = initialize(ds, s, config, rng=np.random.default_rng(5))
        b = initialize(ds, s, config, rng=np.random.default_rng(5))
        for t in range(2):
            assert np.array_equal(a.block_means[t], b.block_means[t])
            assert np.array_equal(a.block_covariances[t], b.block_covariances[t])


class TestBaumWelch:
    def test_loglik_never_decreases(self):
        rng = np.random.default_rng(302)
        for _ in range(6):
            structure = make_structure(rng)
            true_model = make_model(structure, rng, spread=3.0)
            from hmmvb import enumerate_mapped_gmm

            mapped = enumerate_mapped_gmm(true_model)
            comp = rng.choice(mapped.num_components, size=150, p=mapped.mixture.weights)
            X = np.stack(
                [
                    rng.multivariate_normal(
                        mapped.mixture.means[k], mapped.mixture.covariances[k]
                    )
                    for k in comp
                ]
            )
            ds = Dataset(X)
            config = FitConfig(max_iterations=30, restarts=1, rng_seed=0)
            _, report = baum_welch_fit(ds, structure, config)
            trace = np.array(report.log_likelihood_trace)
            slack = 1e-8 * (1.0 + np.abs(trace[1:]))
            assert (np.diff(trace) >= -slack).all()

    def test_trace_starts_at_initial_model_loglik(self):
        rng = np.random.default_rng(303)
        ds = two_group_dataset(rng, n=120)
        s = BlockStructure((2, 2), (2, 2))
        start = initialize(ds, s, FitConfig(rng_seed=3))
        _, report = baum_welch_fit(
            ds, s, FitConfig(max_iterations=5, restarts=1), initial_model=start
        )
        assert abs(report.log_likelihood_trace[0] - log_likelihood(start, ds)) < 1e-9

    def test_warm_start_skips_initialization(self):
        rng = np.random.default_rng(304)
        ds = two_group_dataset(rng, n=100)
        s = BlockStructure((2, 2), (2, 2))
        start = initialize(ds, s, FitConfig(rng_seed=11))
        m1, r1 = baum_welch_fit(ds, s, FitConfig(max_iterations=3, restarts=4), initial_model=start)
        m2, r2 = baum_welch_fit(ds, s, FitConfig(max_iterations=3, restarts=4), initial_model=start)
        assert r1.restart_index == 0
        assert r1.log_likelihood_trace == r2.log_likelihood_trace
        for t in range(2):
            assert np.array_equal(m1.block_means[t], m2.block_means[t])

    def test_warm_start_structure_must_match(self):
        rng = np.random.default_rng(305)
        ds = two_group_dataset(rng, n=60)
        s = BlockStructure((2, 2), (2, 2))
        other = BlockStructure((2, 2), (3, 2))
        start = initialize(ds, other, FitConfig(rng_seed=0))
        with pytest.raises(ModelValidationError):
            baum_welch_fit(ds, s, FitConfig(), initial_model=start)

    def test_fit_is_deterministic_for_fixed_seed(self):
        rng = np.random.default_rng(306)
        ds = two_group_dataset(rng, n=150)
        s = BlockStructure((2, 2), (2, 2))
        config = FitConfig(max_iterations=20, restarts=3, rng_seed=9)
        m1, r1 = baum_welch_fit(ds, s, config)
        m2, r2 = baum_welch_fit(ds, s, config)
        assert r1.log_likelihood_trace == r2.log_likelihood_trace
        assert r1.restart_index == r2.restart_index
        for t in range(2):
            assert np.array_equal(m1.block_means[t], m2.block_means[t])
            assert np.array_equal(m1.block_covariances[t], m2.block_covariances[t])

    def test_weighted_fit_equals_replicated_rows(self):
        rng = np.random.default_rng(307)
        base = rng.normal(size=(80, 3))
        base[:40] -= 3.0
        base[40:] += 3.0
        counts = rng.integers(1, 4, size=80)
        replicated = np.repeat(base, counts, axis=0)
        s = BlockStructure((2, 1), (2, 2))

        ds_w = Dataset(base, weights=counts.astype(float))
        ds_r = Dataset(replicated)
        start = initialize(ds_w, s, FitConfig(rng_seed=2))
        config = FitConfig(max_iterations=12, restarts=1, rel_loglik_tolerance=1e-12)
        mw, rw = baum_welch_fit(ds_w, s, config, initial_model=start)
        mr, rr = baum_welch_fit(ds_r, s, config, initial_model=start)

        assert len(rw.log_likelihood_trace) == len(rr.log_likelihood_trace)
        tw = np.array(rw.log_likelihood_trace)
        tr = np.array(rr.log_likelihood_trace)
        assert np.abs(tw - tr).max() < 1e-7 * (1 + np.abs(tr).max())
        for t in range(2):
            assert np.abs(mw.block_means[t] - mr.block_means[t]).max() < 1e-8
            assert np.abs(mw.block_covariances[t] - mr.block_covariances[t]).max() < 1e-8
        assert np.abs(mw.initial_probs - mr.initial_probs).max() < 1e-10
        assert np.abs(mw.transitions[0] - mr.transitions[0]).max() < 1e-10
        # BIC uses total weight, which matches the replicated row count
        assert abs(rw.bic - rr.bic) < 1e-6 * (1 + abs(rr.bic))

    def test_starved_state_is_frozen(self):
        # one component sits far from all data and never gains responsibility;
        # its parameters and outgoing transition row must survive unchanged
        rng = np.random.default_rng(308)
        X = rng.normal(size=(120, 2))
        ds = Dataset(X)
        s = BlockStructure((1, 1), (2, 2))
        far = 1e8
        means = [np.array([[0.0], [far]]), np.array([[0.0], [0.5]])]
        covs = [np.full((2, 1, 1), 1.0), np.full((2, 1, 1), 1.0)]
        transitions = [np.array([[0.5, 0.5], [0.25, 0.75]])]
        start = HmmVbModel.from_arrays(s, [1.0 - 1e-12, 1e-12], transitions, means, covs)
        fitted, _ = baum_welch_fit(
            ds, s, FitConfig(max_iterations=4, restarts=1, covariance_ridge=0.0),
            initial_model=start,
        )
        assert fitted.block_means[0][1, 0] == far
        assert fitted.block_covariances[0][1, 0, 0] == 1.0
        assert np.array_equal(fitted.transitions[0][1], np.array([0.25, 0.75]))
        # the live component keeps updating
        assert fitted.block_means[0][0, 0] != 0.0

    def test_ridge_is_added_to_covariances(self):
        rng = np.random.default_rng(309)
        # nearly degenerate one-dimensional data would collapse without a ridge
        X = np.zeros((50, 2))
        X[:, 0] = rng.normal(size=50)
        X[:, 1] = 0.0
        ds = Dataset(X)
        s = BlockStructure((2,), (2,))
        config = FitConfig(max_iterations=10, restarts=1, covariance_ridge=1e-3)
        model, _ = baum_welch_fit(ds, s, config)
        assert model.block_covariances[0][:, 1, 1].min() >= 1e-3 - 1e-12


class TestReportAndScores:
    def test_bic_formula(self):
        rng = np.random.default_rng(310)
        ds = two_group_dataset(rng, n=90)
        s = BlockStructure((2, 2), (2, 2))
        model, report = baum_welch_fit(ds, s, FitConfig(max_iterations=15, restarts=1))
        p = num_free_parameters(model)
        expect = -2.0 * log_likelihood(model, ds) + p * np.log(ds.total_weight)
        assert abs(bic(model, ds) - expect) < 1e-9 * (1 + abs(expect))
        assert abs(report.bic - expect) < 1e-9 * (1 + abs(expect))

    def test_count_nonempty_components(self):
        rng = np.random.default_rng(311)
        ds = two_group_dataset(rng, n=100, gap=8.0)
        s = BlockStructure((2, 2), (3, 3))
        model, report = baum_welch_fit(ds, s, FitConfig(max_iterations=40, restarts=2))
        per_block, total = count_nonempty_components(model, ds)
        assert per_block == report.nonempty_components
        assert total == sum(per_block)
        assert all(1 <= c <= 3 for c in per_block)

    def test_report_round_trips_to_json(self):
        import json

        rng = np.random.default_rng(312)
        ds = two_group_dataset(rng, n=60)
        _, report = baum_welch_fit(ds, BlockStructure((2, 2), (2, 2)), FitConfig(max_iterations=5, restarts=1))
        doc = json.loads(json.dumps(report.as_json_dict()))
        assert doc["iterations"] == report.iterations
        assert doc["final_log_likelihood"] == report.final_log_likelihood


class TestSelectModel:
    def test_returns_min_bic_cell(self):
        rng = np.random.default_rng(313)
        ds = two_group_dataset(rng, n=200, gap=7.0)
        s = BlockStructure((2, 2), (2, 2))
        grid = [(1, 1), (2, 2), (3, 3)]
        config = FitConfig(max_iterations=40, restarts=2, rng_seed=4)
        best_model, cells = select_model(ds, s, grid, config)
        assert best_model is not None
        scored = [c for c in cells if c.bic is not None]
        assert len(scored) == 3
        winner = min(scored, key=lambda c: c.bic)
        assert best_model.structure.state_counts == winner.state_counts

    def test_records_per_cell_failures(self):
        rng = np.random.default_rng(314)
        ds = Dataset(rng.normal(size=(8, 2)))
        s = BlockStructure((1, 1), (2, 2))
        # more states than points cannot be initialized
        best_model, cells = select_model(
            ds, s, [(2, 2), (30, 30)], FitConfig(max_iterations=5, restarts=1)
        )
        by_counts = {c.state_counts: c for c in cells}
        assert by_counts[(30, 30)].error is not None
        assert by_counts[(30, 30)].bic is None
        assert by_counts[(2, 2)].bic is not None
        assert best_model is not None

    def test_all_cells_failing_returns_none(self):
        rng = np.random.default_rng(315)
        ds = Dataset(rng.normal(size=(5, 2)))
        s = BlockStructure((1, 1), (2, 2))
        best_model, cells = select_model(
            ds, s, [(40, 40)], FitConfig(max_iterations=3, restarts=1)
        )
        assert best_model is None
        assert cells[0].error is not None

    def test_grid_entries_must_match_block_count(self):
        rng = np.random.default_rng(316)
        ds = Dataset(rng.normal(size=(30, 2)))
        s = BlockStructure((1, 1), (2, 2))
        with pytest.raises(ModelValidationError):
            select_model(ds, s, [(2, 2, 2)], FitConfig())

    def test_prefer_simplest_breaks_toward_fewer_parameters(self):
        rng = np.random.default_rng(317)
        ds = two_group_dataset(rng, n=250, gap=8.0, d=2)
        s = BlockStructure((1, 1), (2, 2))
        grid = [(2, 2), (2, 3), (3, 2), (3, 3)]
        config = FitConfig(max_iterations=60, restarts=2, rng_seed=1)
        best_default, cells = select_model(ds, s, grid, config)
        best_simple, cells_simple = select_model(ds, s, grid, config, prefer_simplest=True)
        assert best_default is not None and best_simple is not None
        min_bic_cell = min((c for c in cells if c.bic is not None), key=lambda c: c.bic)
        candidates = [
            c
            for c in cells_simple
            if c.bic is not None and c.cluster_count == min_bic_cell.cluster_count
        ]
        expected = min(candidates, key=lambda c: (c.num_parameters, c.bic))
        assert best_simple.structure.state_counts == expected.state_counts
