"""Seeded synthetic-data generators for three benchmark regimes, with
ground-truth labels for confusion-matrix evaluation.

Two of the regimes ("two-block", "three-block") are only partially pinned
down by their published descriptions; the remaining parameters here are
fixed constants chosen once for this package (documented, versioned, and
NOT claimed to match any external run).  They satisfy the qualitative
constraints: two rare first-block components with nearly equal means and
small proportions, background components with spread-out means and larger
variances, exactly two second-block components with high means on all
coordinates, and second-block proportions that depend on the first-block
component.  The "flat-gmm-50" regime is fully specified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import invwishart

from .exceptions import ModelValidationError
from .model import Dataset

__all__ = [
    "LabeledSample",
    "SimSpec",
    "confusion_matrix",
    "generate",
    "generate_flat_gmm_50",
    "generate_three_block",
    "generate_two_block",
]

REGIMES = ("two-block", "three-block", "flat-gmm-50")

# Regime "two-block": block 1 has 5 columns and 7 components, block 2 has 3
# columns and 10 components.  Components 6 and 7 of block 1 are the rare
# pair; components 9 and 10 of block 2 are the only ones with high means on
# all three coordinates.  Rows of TWO_BLOCK_TRANSITIONS give the block-2
# component proportions conditional on the block-1 component: background
# rows put no mass on the high pair, rare rows put most mass there.

TWO_BLOCK_PRIORS = np.array([0.25, 0.22, 0.20, 0.18, 0.12, 0.02, 0.01])

TWO_BLOCK_MEANS_1 = np.array(
    [
        [4.0, 0.0, -3.0, 5.0, 2.0],
        [-2.0, -4.0, 2.0, 6.0, -1.0],
        [6.0, 2.0, 4.0, -2.0, 5.0],
        [1.0, -5.0, -4.0, 2.0, 6.0],
        [-4.0, 3.0, -2.0, -4.0, 4.0],
        [0.0, 5.5, 5.5, 0.0, 0.0],
        [0.0, 6.0, 6.0, 0.0, 0.0],
    ]
)

TWO_BLOCK_VARS_1 = np.array(
    [
        [4.0, 5.0, 4.0, 3.0, 5.0],
        [6.0, 3.0, 5.0, 4.0, 3.0],
        [3.0, 6.0, 3.0, 5.0, 4.0],
        [5.0, 4.0, 6.0, 6.0, 3.0],
        [4.0, 4.0, 5.0, 3.0, 6.0],
        [2.0, 2.0, 2.0, 2.0, 2.0],
        [2.0, 2.0, 2.0, 2.0, 2.0],
    ]
)

TWO_BLOCK_MEANS_2 = np.array(
    [
        [-3.0, -2.0, 0.0],
        [2.0, -4.0, -3.0],
        [-5.0, 1.0, -2.0],
        [0.0, 3.0, -5.0],
        [4.0, 0.0, -4.0],
        [-2.0, -5.0, 3.0],
        [3.0, -3.0, 4.0],
        [-4.0, 4.0, 2.0],
        [5.0, 5.0, 5.0],
        [6.0, 6.0, 6.0],
    ]
)

TWO_BLOCK_VARS_2 = np.array(
    [
        [3.0, 2.0, 3.0],
        [2.0, 3.0, 2.0],
        [4.0, 2.0, 3.0],
        [3.0, 4.0, 2.0],
        [2.0, 3.0, 4.0],
        [3.0, 2.0, 2.0],
        [4.0, 3.0, 3.0],
        [2.0, 4.0, 3.0],
        [1.5, 1.5, 1.5],
        [1.5, 1.5, 1.5],
    ]
)

TWO_BLOCK_TRANSITIONS = np.array(
    [
        [0.15, 0.15, 0.15, 0.12, 0.12, 0.11, 0.10, 0.10, 0.0, 0.0],
        [0.10, 0.15, 0.15, 0.15, 0.12, 0.12, 0.11, 0.10, 0.0, 0.0],
        [0.10, 0.10, 0.15, 0.15, 0.15, 0.12, 0.12, 0.11, 0.0, 0.0],
        [0.11, 0.10, 0.10, 0.15, 0.15, 0.15, 0.12, 0.12, 0.0, 0.0],
        [0.12, 0.11, 0.10, 0.10, 0.15, 0.15, 0.15, 0.12, 0.0, 0.0],
        [0.065, 0.065, 0.065, 0.065, 0.065, 0.065, 0.065, 0.065, 0.24, 0.24],
        [0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.05, 0.30, 0.30],
    ]
)

TWO_BLOCK_RARE_FIRST = (5, 6)
TWO_BLOCK_HIGH_SECOND = (8, 9)

THREE_BLOCK_LEAD_VARIANCE = 3.0

# Regime "flat-gmm-50": 50-component mixture in 10 dimensions.  Components
# 1 and 2 are the rare targets at +-5 per coordinate with identity
# covariance; the other means are standard-normal draws and the other
# covariances inverse-Wishart draws (15 degrees of freedom, scale 5I).
FLAT_DIM = 10
FLAT_PRIORS = np.concatenate(
    [np.array([0.0025, 0.005, 0.1, 0.1, 0.05, 0.03]), np.full(44, 0.7125 / 44)]
)
FLAT_INVWISHART_DF = 15
FLAT_INVWISHART_SCALE = 5.0


@dataclass(frozen=True)
class SimSpec:
    """A generator request: regime name, sample size, and seed."""

    regime: str
    n: int
    rng_seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ModelValidationError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.n < 1:
            raise ModelValidationError("n must be at least 1")


@dataclass(frozen=True)
class LabeledSample:
    """A generated dataset with its ground truth.

    ``component_labels`` records the generating component per point and per
    generative block (1-based); ``target_labels`` is 0 for background and
    1..R for the rare target classes; ``target_means`` holds one reference
    center per target class, used to map clusters to classes.
    """

    dataset: Dataset
    component_labels: np.ndarray
    target_labels: np.ndarray
    target_means: np.ndarray
    regime: str
    rng_seed: int

    @property
    def target_mask(self) -> np.ndarray:
        return self.target_labels > 0

    @property
    def num_target_classes(self) -> int:
        return self.target_means.shape[0]

    def standardize(self) -> tuple["LabeledSample", np.ndarray, np.ndarray]:
        """Center and scale each column; returns the transformed sample and
        the (mean, scale) arrays that were applied."""
        X = self.dataset.points
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        transformed = LabeledSample(
            dataset=Dataset((X - mean) / scale, self.dataset.weights),
            component_labels=self.component_labels,
            target_labels=self.target_labels,
            target_means=(self.target_means - mean) / scale,
            regime=self.regime,
            rng_seed=self.rng_seed,
        )
        return transformed, mean, scale


def _sample_rows(probs: np.ndarray, rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.choice(probs.shape[0], size=n, p=probs)


def _sample_conditional(
    table: np.ndarray, given: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    cum = np.cumsum(table, axis=1)
    u = rng.random(given.shape[0])
    return (u[:, None] > cum[given]).sum(axis=1)


def generate_two_block(n: int, seed: int = 0) -> LabeledSample:
    """Two-block regime: 5 + 3 columns; the target class is the set of points
    generated by a rare first-block component together with a high-mean
    second-block component."""
    rng = np.random.default_rng(seed)
    s1 = _sample_rows(TWO_BLOCK_PRIORS, rng, n)
    s2 = _sample_conditional(TWO_BLOCK_TRANSITIONS, s1, rng)
    z1 = rng.standard_normal((n, 5))
    z2 = rng.standard_normal((n, 3))
    x1 = TWO_BLOCK_MEANS_1[s1] + z1 * np.sqrt(TWO_BLOCK_VARS_1[s1])
    x2 = TWO_BLOCK_MEANS_2[s2] + z2 * np.sqrt(TWO_BLOCK_VARS_2[s2])
    points = np.concatenate([x1, x2], axis=1)

    target = np.isin(s1, TWO_BLOCK_RARE_FIRST) & np.isin(s2, TWO_BLOCK_HIGH_SECOND)
    target_labels = target.astype(np.intp)
    if target.any():
        target_means = points[target].mean(axis=0, keepdims=True)
    else:
        center = np.concatenate(
            [TWO_BLOCK_MEANS_1[TWO_BLOCK_RARE_FIRST[0]], TWO_BLOCK_MEANS_2[TWO_BLOCK_HIGH_SECOND[0]]]
        )
        target_means = center[None, :]
    return LabeledSample(
        dataset=Dataset(points),
        component_labels=np.column_stack([s1 + 1, s2 + 1]),
        target_labels=target_labels,
        target_means=target_means,
        regime="two-block",
        rng_seed=seed,
    )


def generate_three_block(n: int, seed: int = 0) -> LabeledSample:
    """Three-block regime: a 5-column isotropic lead block prepended to the
    two-block construction, 13 columns in total."""
    rng = np.random.default_rng(seed)
    s1 = _sample_rows(TWO_BLOCK_PRIORS, rng, n)
    s2 = _sample_conditional(TWO_BLOCK_TRANSITIONS, s1, rng)
    z0 = rng.standard_normal((n, 5)) * np.sqrt(THREE_BLOCK_LEAD_VARIANCE)
    z1 = rng.standard_normal((n, 5))
    z2 = rng.standard_normal((n, 3))
    x1 = TWO_BLOCK_MEANS_1[s1] + z1 * np.sqrt(TWO_BLOCK_VARS_1[s1])
    x2 = TWO_BLOCK_MEANS_2[s2] + z2 * np.sqrt(TWO_BLOCK_VARS_2[s2])
    points = np.concatenate([z0, x1, x2], axis=1)

    target = np.isin(s1, TWO_BLOCK_RARE_FIRST) & np.isin(s2, TWO_BLOCK_HIGH_SECOND)
    target_labels = target.astype(np.intp)
    if target.any():
        target_means = points[target].mean(axis=0, keepdims=True)
    else:
        center = np.concatenate(
            [
                np.zeros(5),
                TWO_BLOCK_MEANS_1[TWO_BLOCK_RARE_FIRST[0]],
                TWO_BLOCK_MEANS_2[TWO_BLOCK_HIGH_SECOND[0]],
            ]
        )
        target_means = center[None, :]
    return LabeledSample(
        dataset=Dataset(points),
        component_labels=np.column_stack([np.ones(n, dtype=np.intp), s1 + 1, s2 + 1]),
        target_labels=target_labels,
        target_means=target_means,
        regime="three-block",
        rng_seed=seed,
    )


def generate_flat_gmm_50(n: int, seed: int = 0) -> LabeledSample:
    """Flat 50-component mixture in 10 dimensions; components 1 and 2 are the
    rare targets with means of all 5's and all -5's and identity covariance."""
    rng = np.random.default_rng(seed)
    d = FLAT_DIM
    means = np.zeros((50, d))
    means[0] = 5.0
    means[1] = -5.0
    means[2:] = rng.standard_normal((48, d))
    covs = np.empty((50, d, d))
    covs[0] = np.eye(d)
    covs[1] = np.eye(d)
    covs[2:] = invwishart.rvs(
        df=FLAT_INVWISHART_DF,
        scale=FLAT_INVWISHART_SCALE * np.eye(d),
        size=48,
        random_state=rng,
    )
    chols = np.linalg.cholesky(covs)

    labels = _sample_rows(FLAT_PRIORS, rng, n)
    z = rng.standard_normal((n, d))
    points = means[labels] + np.einsum("nij,nj->ni", chols[labels], z)

    target_labels = np.zeros(n, dtype=np.intp)
    target_labels[labels == 0] = 1
    target_labels[labels == 1] = 2
    return LabeledSample(
        dataset=Dataset(points),
        component_labels=(labels + 1)[:, None],
        target_labels=target_labels,
        target_means=means[:2].copy(),
        regime="flat-gmm-50",
        rng_seed=seed,
    )


def generate(spec: SimSpec) -> LabeledSample:
    """Dispatch a SimSpec to its regime generator."""
    if spec.regime == "two-block":
        return generate_two_block(spec.n, spec.rng_seed)
    if spec.regime == "three-block":
        return generate_three_block(spec.n, spec.rng_seed)
    return generate_flat_gmm_50(spec.n, spec.rng_seed)


def confusion_matrix(result, truth: LabeledSample, target_map: dict[int, int] | None = None) -> np.ndarray:
    """Cross-tabulate predicted target clusters against true target classes.

    Each true target class is mapped to the output cluster whose mode is
    nearest its reference center (Euclidean), unless ``target_map`` gives the
    cluster label per class explicitly.  Points in mapped clusters predict
    their class; everything else predicts background 0.  Entry [p, c] counts
    points with predicted class p and true class c.

    Raises
    ------
    ModelValidationError
        If the nearest-mode assignment is ambiguous (a distance tie, or two
        classes landing on the same cluster); pass ``target_map`` to resolve.
    """
    labels = result.labels
    n = truth.dataset.num_points
    if labels.shape[0] != n:
        raise ModelValidationError(
            f"clustering covers {labels.shape[0]} points but the sample has {n}"
        )
    R = truth.num_target_classes
    if target_map is None:
        target_map = {}
        for r in range(1, R + 1):
            dist = np.linalg.norm(result.cluster_modes - truth.target_means[r - 1], axis=1)
            best = int(np.argmin(dist))
            ties = np.flatnonzero(dist == dist[best])
            if ties.shape[0] > 1:
                raise ModelValidationError(
                    f"nearest-mode assignment for target class {r} is tied between "
                    f"clusters {ties.tolist()}; pass an explicit target_map"
                )
            target_map[r] = best
        if len(set(target_map.values())) < R:
            raise ModelValidationError(
                f"two target classes map to the same cluster ({target_map}); "
                "pass an explicit target_map"
            )

    predicted = np.zeros(n, dtype=np.intp)
    for r, cluster_label in target_map.items():
        predicted[labels == cluster_label] = r

    matrix = np.zeros((R + 1, R + 1), dtype=np.intp)
    for p in range(R + 1):
        for c in range(R + 1):
            matrix[p, c] = int(np.sum((predicted == p) & (truth.target_labels == c)))
    return matrix
