import numpy as np
import pytest

from hmmvb import (
    BlockStructure,
    EnumerationSizeError,
    HmmVbModel,
    enumerate_mapped_gmm,
    forward_backward,
    posterior_over_sequences,
)

from conftest import all_sequences, make_model, make_structure, naive_mixture, naive_posteriors


def test_enumeration_matches_independent_expansion():
    rng = np.random.default_rng(200)
    for _ in range(12):
        structure = make_structure(rng)
        model = make_model(structure, rng)
        mapped = enumerate_mapped_gmm(model)
        weights, means, covs, seqs = naive_mixture(model)

        assert mapped.num_components == len(seqs)
        assert [tuple(s) for s in mapped.sequences] == seqs
        assert np.abs(mapped.mixture.weights - weights).max() < 1e-14

        # mapped components live in raw column order; the naive expansion in
        # layout order, so compare through the inverse permutation
        inv = np.argsort(np.asarray(structure.column_permutation))
        for k in range(len(seqs)):
            assert np.abs(mapped.mixture.means[k][inv] - means[k]).max() == 0.0
            cov_layout = mapped.mixture.covariances[k][np.ix_(inv, inv)]
            assert np.abs(cov_layout - covs[k]).max() == 0.0


def test_sequence_weights_sum_to_one():
    rng = np.random.default_rng(201)
    for _ in range(8):
        model = make_model(make_structure(rng), rng)
        mapped = enumerate_mapped_gmm(model)
        assert abs(mapped.mixture.weights.sum() - 1.0) < 1e-12


def test_posterior_over_sequences_matches_bayes_rule():
    rng = np.random.default_rng(202)
    for _ in range(8):
        model = make_model(make_structure(rng), rng)
        mapped = enumerate_mapped_gmm(model)
        X = rng.normal(size=(9, model.dimension)) * 2
        got = posterior_over_sequences(mapped, X)
        want, _, _ = naive_posteriors(model, X)
        assert got.shape == want.shape
        assert np.abs(got - want).max() < 1e-10
        assert np.abs(got.sum(axis=1) - 1.0).max() < 1e-12


def test_marginal_reductions_match_forward_backward():
    rng = np.random.default_rng(203)
    for _ in range(8):
        model = make_model(make_structure(rng), rng)
        mapped = enumerate_mapped_gmm(model)
        X = rng.normal(size=(6, model.dimension)) * 2
        seq_post = posterior_over_sequences(mapped, X)
        tables = forward_backward(model, X)
        for t in range(model.num_blocks):
            assert np.abs(mapped.state_marginals(seq_post, t) - tables.state_marginals[t]).max() < 1e-10
        for t in range(model.num_blocks - 1):
            assert np.abs(mapped.pair_marginals(seq_post, t) - tables.transition_marginals[t]).max() < 1e-10


def test_mixture_density_equals_chain_density():
    rng = np.random.default_rng(204)
    model = make_model(make_structure(rng), rng)
    mapped = enumerate_mapped_gmm(model)
    X = rng.normal(size=(25, model.dimension)) * 3
    assert np.abs(mapped.mixture.log_density(X) - forward_backward(model, X).log_evidence).max() < 1e-10


def test_size_guard_raises_with_counts():
    s = BlockStructure((1, 1, 1), (8, 8, 8))
    means = [np.linspace(-4, 4, 8)[:, None]] * 3
    covs = [np.ones((8, 1, 1))] * 3
    model = HmmVbModel.from_arrays(
        s, np.full(8, 1 / 8), [np.full((8, 8), 1 / 8)] * 2, means, covs
    )
    with pytest.raises(EnumerationSizeError) as excinfo:
        enumerate_mapped_gmm(model, limit=100)
    assert excinfo.value.num_sequences == 512
    assert excinfo.value.limit == 100
    assert "512" in str(excinfo.value)


def test_custom_limit_allows_exact_fit():
    rng = np.random.default_rng(205)
    s = BlockStructure((1, 1), (2, 2))
    model = make_model(s, rng)
    mapped = enumerate_mapped_gmm(model, limit=4)
    assert mapped.num_components == 4


def test_sequences_are_lexicographic():
    rng = np.random.default_rng(206)
    s = BlockStructure((1, 2), (3, 2))
    model = make_model(s, rng)
    mapped = enumerate_mapped_gmm(model)
    assert [tuple(s_) for s_ in mapped.sequences] == all_sequences(s)
