"""Shared helpers for the test suite.

The brute-force routines here are written independently of the library's
own enumeration module: sequences come from itertools, densities from
scipy.stats, and the reference GMM EM follows the textbook update rules.
They are deliberately slow and simple so they can anchor the fast paths.
"""

import itertools

import numpy as np
from scipy.linalg import block_diag
from scipy.stats import multivariate_normal

from hmmvb import BlockStructure, HmmVbModel


def make_structure(rng, num_blocks=None, max_states=3, max_dim=2, permute=True):
    """Random small block structure, optionally with a shuffled column order."""
    T = num_blocks if num_blocks is not None else int(rng.integers(2, 4))
    dims = tuple(int(rng.integers(1, max_dim + 1)) for _ in range(T))
    counts = tuple(int(rng.integers(2, max_states + 1)) for _ in range(T))
    perm = None
    if permute and rng.random() < 0.7:
        perm = tuple(int(v) for v in rng.permutation(sum(dims)))
    return BlockStructure(dims, counts, column_permutation=perm)


def make_model(structure, rng, spread=2.0, cov_scale=1.0):
    """Random valid model on the given structure."""
    counts = structure.state_counts
    dims = structure.block_dims
    T = structure.num_blocks
    pi = rng.dirichlet(np.full(counts[0], 3.0))
    transitions = [
        np.stack([rng.dirichlet(np.full(counts[t + 1], 3.0)) for _ in range(counts[t])])
        for t in range(T - 1)
    ]
    means, covs = [], []
    for t in range(T):
        M, d = counts[t], dims[t]
        means.append(rng.normal(size=(M, d)) * spread)
        A = rng.normal(size=(M, d, d)) * cov_scale
        covs.append(A @ A.transpose(0, 2, 1) + 0.4 * cov_scale**2 * np.eye(d)[None])
    return HmmVbModel.from_arrays(structure, pi, transitions, means, covs)


def all_sequences(structure):
    """Every state sequence, lexicographic order, as a list of tuples."""
    return list(itertools.product(*[range(m) for m in structure.state_counts]))


def naive_mixture(model):
    """Expand the chain into flat mixture components by direct products.

    Returns (weights, means, covariances, sequences); means and covariances
    live in layout (block-concatenated) column order.
    """
    structure = model.structure
    seqs = all_sequences(structure)
    weights, means, covs = [], [], []
    for seq in seqs:
        w = float(model.initial_probs[seq[0]])
        for t in range(structure.num_blocks - 1):
            w *= float(model.transitions[t][seq[t], seq[t + 1]])
        mu = np.concatenate([model.block_means[t][k] for t, k in enumerate(seq)])
        cov = block_diag(*[model.block_covariances[t][k] for t, k in enumerate(seq)])
        weights.append(w)
        means.append(mu)
        covs.append(np.atleast_2d(cov))
    total = sum(weights)
    weights = np.array(weights) / total
    return weights, np.stack(means), np.stack(covs), seqs


def naive_component_log_densities(model, points):
    """Per-sequence joint log density log(w_s) + log N(x; mu_s, Sigma_s), (n, K)."""
    weights, means, covs, _ = naive_mixture(model)
    X = model.structure.to_layout(np.atleast_2d(np.asarray(points, dtype=float)))
    cols = []
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    for k in range(weights.shape[0]):
        if weights[k] == 0.0:
            cols.append(np.full(X.shape[0], -np.inf))
            continue
        cols.append(logw[k] + np.atleast_1d(multivariate_normal(means[k], covs[k]).logpdf(X)))
    return np.stack(cols, axis=1)


def naive_log_density(model, points):
    joint = naive_component_log_densities(model, points)
    m = joint.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(joint - m).sum(axis=1, keepdims=True)))[:, 0]


def naive_posteriors(model, points):
    """Sequence posteriors and the reduced state / state-pair marginals.

    Returns (seq_post, state_marginals, pair_marginals) where the marginal
    lists follow the block order.
    """
    joint = naive_component_log_densities(model, points)
    m = joint.max(axis=1, keepdims=True)
    post = np.exp(joint - m)
    post /= post.sum(axis=1, keepdims=True)
    _, _, _, seqs = naive_mixture(model)
    counts = model.structure.state_counts
    T = model.structure.num_blocks
    n = post.shape[0]
    L = [np.zeros((n, counts[t])) for t in range(T)]
    H = [np.zeros((n, counts[t], counts[t + 1])) for t in range(T - 1)]
    for idx, seq in enumerate(seqs):
        for t in range(T):
            L[t][:, seq[t]] += post[:, idx]
        for t in range(T - 1):
            H[t][:, seq[t], seq[t + 1]] += post[:, idx]
    return post, L, H


def naive_viterbi(model, point):
    """Exhaustive best sequence for one point; lexicographically first on ties."""
    joint = naive_component_log_densities(model, point)[0]
    _, _, _, seqs = naive_mixture(model)
    return np.array(seqs[int(np.argmax(joint))], dtype=np.intp)


def reference_gmm_em(X, weights, means, covs, iterations):
    """Plain unweighted GMM EM, textbook update rules, no regularization.

    Yields (weights, means, covariances) after each M-step.
    """
    weights = np.asarray(weights, dtype=float).copy()
    means = np.asarray(means, dtype=float).copy()
    covs = np.asarray(covs, dtype=float).copy()
    n = X.shape[0]
    K = weights.shape[0]
    out = []
    for _ in range(iterations):
        logp = np.stack(
            [multivariate_normal(means[k], covs[k]).logpdf(X) for k in range(K)], axis=1
        ) + np.log(weights)
        m = logp.max(axis=1, keepdims=True)
        resp = np.exp(logp - m)
        resp /= resp.sum(axis=1, keepdims=True)
        nk = resp.sum(axis=0)
        weights = nk / n
        means = resp.T @ X / nk[:, None]
        new_covs = np.empty_like(covs)
        for k in range(K):
            centered = X - means[k]
            new_covs[k] = (centered * resp[:, k, None]).T @ centered / nk[k]
        covs = new_covs
        out.append((weights.copy(), means.copy(), covs.copy()))
    return out


def finite_difference_gradient(f, x, h=1e-5):
    """Central differences of a scalar function, coordinate-wise steps."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.shape[0]):
        step = h * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2.0 * step)
    return g
