"""Exhaustive cross-checks: expand the chain model into the equivalent flat
Gaussian mixture with one component per full state sequence.

The expansion is exponential in the number of blocks, so it is guarded by a
hard component limit.  It exists to validate the recursive inference paths
on small models, not for production fitting.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .exceptions import EnumerationSizeError, ModelValidationError
from .model import BlockStructure, GaussianMixture, HmmVbModel

__all__ = [
    "DEFAULT_COMPONENT_LIMIT",
    "MappedGmm",
    "enumerate_mapped_gmm",
    "posterior_over_sequences",
]

DEFAULT_COMPONENT_LIMIT = 100_000


@dataclass(frozen=True)
class MappedGmm:
    """Flat mixture equivalent of a chain model.

    ``mixture`` is expressed in raw column order so its densities compare
    directly against the recursive implementation.  Row k of ``sequences``
    records the full state sequence that produced component k; sequences are
    enumerated in lexicographic order.
    """

    mixture: GaussianMixture
    sequences: np.ndarray
    structure: BlockStructure

    @property
    def num_components(self) -> int:
        return self.mixture.num_components

    def state_marginals(self, sequence_posteriors: np.ndarray, t: int) -> np.ndarray:
        """Collapse per-sequence posteriors (n, K) to block-t state posteriors."""
        M = self.structure.state_counts[t]
        n = sequence_posteriors.shape[0]
        out = np.zeros((n, M))
        for k in range(M):
            mask = self.sequences[:, t] == k
            out[:, k] = sequence_posteriors[:, mask].sum(axis=1)
        return out

    def pair_marginals(self, sequence_posteriors: np.ndarray, t: int) -> np.ndarray:
        """Collapse per-sequence posteriors to (block t, block t+1) state-pair
        posteriors, shape (n, M_t, M_{t+1})."""
        M0 = self.structure.state_counts[t]
        M1 = self.structure.state_counts[t + 1]
        n = sequence_posteriors.shape[0]
        out = np.zeros((n, M0, M1))
        for k in range(M0):
            row_mask = self.sequences[:, t] == k
            for l in range(M1):
                mask = row_mask & (self.sequences[:, t + 1] == l)
                out[:, k, l] = sequence_posteriors[:, mask].sum(axis=1)
        return out


def enumerate_mapped_gmm(model: HmmVbModel, limit: int = DEFAULT_COMPONENT_LIMIT) -> MappedGmm:
    """Expand a chain model into its equivalent flat Gaussian mixture.

    Parameters
    ----------
    model : HmmVbModel
    limit : int
        Hard cap on the number of expanded components; the expansion count is
        the product of the per-block state counts.

    Raises
    ------
    EnumerationSizeError
        If the expansion would exceed ``limit``.
    """
    structure = model.structure
    counts = structure.state_counts
    num_sequences = 1
    for M in counts:
        num_sequences *= M
    if num_sequences > limit:
        raise EnumerationSizeError(num_sequences, limit)

    sequences = np.array(list(product(*(range(M) for M in counts))), dtype=np.intp)
    T = structure.num_blocks
    d = structure.dimension

    weights = model.initial_probs[sequences[:, 0]].copy()
    for t in range(T - 1):
        weights *= model.transitions[t][sequences[:, t], sequences[:, t + 1]]
    # Guard against accumulated rounding in long products.
    weights /= weights.sum()

    means_layout = np.concatenate(
        [model.block_means[t][sequences[:, t]] for t in range(T)], axis=1
    )
    covs_layout = np.zeros((num_sequences, d, d))
    for t in range(T):
        off = structure.block_offsets[t]
        dt = structure.block_dims[t]
        covs_layout[:, off : off + dt, off : off + dt] = model.block_covariances[t][
            sequences[:, t]
        ]

    perm = np.asarray(structure.column_permutation, dtype=np.intp)
    means = means_layout[:, perm]
    covs = covs_layout[:, perm[:, None], perm[None, :]]

    mixture = GaussianMixture(weights, means, covs)
    sequences.setflags(write=False)
    return MappedGmm(mixture=mixture, sequences=sequences, structure=structure)


def posterior_over_sequences(mapped: MappedGmm, points) -> np.ndarray:
    """Posterior probability of each full state sequence per point, (n, K)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != mapped.structure.dimension:
        raise ModelValidationError(
            f"points have {points.shape[1]} columns, expected {mapped.structure.dimension}"
        )
    comp = mapped.mixture.component_log_densities(points)
    with np.errstate(divide="ignore"):
        scores = comp + np.log(mapped.mixture.weights)[None, :]
    m = scores.max(axis=1, keepdims=True)
    post = np.exp(scores - m)
    post /= post.sum(axis=1, keepdims=True)
    return post
