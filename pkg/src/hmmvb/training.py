"""Maximum-likelihood fitting of the block-chain model.

The fitting loop is expectation-maximization over the chain's state
posteriors (Baum-Welch), generalized to weighted samples: every sum over
points carries the point's weight.  Initialization clusters each block's
columns independently and starts all transition rows uniform.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import ModelValidationError, NumericalError
from .inference import _block_log_densities, _forward_backward_arrays, viterbi
from .model import BlockStructure, Dataset, HmmVbModel, num_free_parameters

__all__ = [
    "FitConfig",
    "FitReport",
    "SelectionCell",
    "baum_welch_fit",
    "bic",
    "count_nonempty_components",
    "initialize",
    "select_model",
]

INIT_SCHEMES = ("kmeans-full", "kmeans-subset", "random-centroids")
STARVATION_FRACTION = 1e-12


@dataclass(frozen=True)
class FitConfig:
    """Settings for one fitting run.

    ``covariance_ridge`` is the diagonal regularizer added to every updated
    covariance; None resolves to 1e-6 times the block's pooled variance
    scale.  ``covariance_shrinkage`` is the weight on the cluster-specific
    covariance in the initialization blend (the remainder goes on the
    block's common covariance).  ``subset_fraction`` only matters for the
    ``kmeans-subset`` scheme.
    """

    max_iterations: int = 500
    rel_loglik_tolerance: float = 1e-6
    covariance_ridge: float | None = None
    init_scheme: str = "kmeans-full"
    subset_fraction: float = 0.1
    covariance_shrinkage: float = 0.5
    restarts: int = 5
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ModelValidationError("max_iterations must be non-negative")
        if not (self.rel_loglik_tolerance > 0):
            raise ModelValidationError("rel_loglik_tolerance must be positive")
        if self.covariance_ridge is not None and not (self.covariance_ridge >= 0):
            raise ModelValidationError("covariance_ridge must be non-negative")
        if self.init_scheme not in INIT_SCHEMES:
            raise ModelValidationError(
                f"init_scheme must be one of {INIT_SCHEMES}, got {self.init_scheme!r}"
            )
        if not (0 < self.subset_fraction <= 1):
            raise ModelValidationError("subset_fraction must be in (0, 1]")
        if not (0 <= self.covariance_shrinkage <= 1):
            raise ModelValidationError("covariance_shrinkage must be in [0, 1]")
        if self.restarts < 1:
            raise ModelValidationError("restarts must be at least 1")


@dataclass(frozen=True)
class FitReport:
    """Outcome of one fitting run (the winning restart)."""

    log_likelihood_trace: tuple[float, ...]
    iterations: int
    converged: bool
    bic: float
    nonempty_components: tuple[int, ...]
    restart_index: int = 0

    @property
    def final_log_likelihood(self) -> float:
        return self.log_likelihood_trace[-1]

    @property
    def total_nonempty_components(self) -> int:
        return int(sum(self.nonempty_components))

    def as_json_dict(self) -> dict:
        return {
            "final_log_likelihood": self.final_log_likelihood,
            "iterations": self.iterations,
            "converged": self.converged,
            "bic": self.bic,
            "nonempty_components": list(self.nonempty_components),
            "total_nonempty_components": self.total_nonempty_components,
            "restart_index": self.restart_index,
            "log_likelihood_trace": list(self.log_likelihood_trace),
        }


def _resolve_ridges(blocks: list[np.ndarray], weights: np.ndarray, config: FitConfig) -> list[float]:
    """Per-block ridge epsilons; the automatic setting scales with the block's
    pooled variance."""
    if config.covariance_ridge is not None:
        return [float(config.covariance_ridge)] * len(blocks)
    wsum = weights.sum()
    out = []
    for X in blocks:
        mean = weights @ X / wsum
        var = weights @ (X - mean) ** 2 / wsum
        scale = float(var.mean())
        out.append(1e-6 * (scale if scale > 0 else 1.0))
    return out


def _weighted_mean_cov(X: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    wsum = w.sum()
    mean = w @ X / wsum
    centered = X - mean
    cov = (centered * w[:, None]).T @ centered / wsum
    return mean, cov


def _kmeans_plusplus_seed(X: np.ndarray, w: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    probs = w / w.sum()
    idx = rng.choice(n, p=probs)
    centers[0] = X[idx]
    dist2 = ((X - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        scores = w * dist2
        total = scores.sum()
        if total <= 0:
            # All remaining mass sits on existing centers; spread arbitrarily.
            idx = rng.choice(n, p=probs)
        else:
            idx = rng.choice(n, p=scores / total)
        centers[j] = X[idx]
        dist2 = np.minimum(dist2, ((X - centers[j]) ** 2).sum(axis=1))
    return centers


def _assign(X: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = (
        (X * X).sum(axis=1)[:, None]
        - 2.0 * (X @ centers.T)
        + (centers * centers).sum(axis=1)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    labels = d2.argmin(axis=1)
    return labels, d2


def _assign_nonempty(X: np.ndarray, centers: np.ndarray, budget: list[int]) -> np.ndarray:
    """Assign points to nearest centers; an empty cluster is re-seeded at the
    point farthest from its nearest center.  ``budget`` (single-element list)
    caps re-seeds across the whole run."""
    k = centers.shape[0]
    while True:
        labels, d2 = _assign(X, centers)
        empty = [j for j in range(k) if not np.any(labels == j)]
        if not empty:
            return labels
        if budget[0] == 0:
            raise NumericalError("k-means could not populate every cluster after 10 re-seeds")
        budget[0] -= 1
        centers[empty[0]] = X[d2.min(axis=1).argmax()]


def _weighted_kmeans(
    X: np.ndarray, w: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100
) -> np.ndarray:
    """Lloyd's iterations with weighted means and a capped re-seed rule for
    empty clusters."""
    centers = _kmeans_plusplus_seed(X, w, k, rng)
    budget = [10]
    labels = _assign_nonempty(X, centers, budget)
    wX = X * w[:, None]
    for _ in range(max_iter):
        wsums = np.bincount(labels, weights=w, minlength=k)
        for dim in range(X.shape[1]):
            centers[:, dim] = np.bincount(labels, weights=wX[:, dim], minlength=k)
        centers /= wsums[:, None]
        new_labels = _assign_nonempty(X, centers, budget)
        if np.array_equal(labels, new_labels):
            break
        labels = new_labels
    return labels


def _block_params_from_labels(
    X: np.ndarray, w: np.ndarray, labels: np.ndarray, k: int, shrinkage: float, ridge: float
) -> tuple[np.ndarray, np.ndarray]:
    d = X.shape[1]
    _, common_cov = _weighted_mean_cov(X, w)
    means = np.empty((k, d))
    covs = np.empty((k, d, d))
    for j in range(k):
        mask = labels == j
        if not mask.any():
            raise NumericalError("initialization produced an empty cluster")
        mean_j, cov_j = _weighted_mean_cov(X[mask], w[mask])
        means[j] = mean_j
        covs[j] = shrinkage * cov_j + (1.0 - shrinkage) * common_cov
    covs += ridge * np.eye(d)[None, :, :]
    return means, covs


def _initialize_from_blocks(
    blocks: list[np.ndarray],
    weights: np.ndarray,
    structure: BlockStructure,
    config: FitConfig,
    ridges: list[float],
    rng: np.random.Generator,
) -> HmmVbModel:
    n = weights.shape[0]
    counts = structure.state_counts

    if config.init_scheme == "kmeans-subset":
        size = max(int(np.ceil(config.subset_fraction * n)), max(counts))
        size = min(size, n)
        subset = rng.choice(n, size=size, replace=False)
        subset.sort()
    else:
        subset = None

    means, covs = [], []
    for t, X in enumerate(blocks):
        k = counts[t]
        if config.init_scheme == "random-centroids":
            if k > n:
                raise ModelValidationError(
                    f"block {t} asks for {k} states but only {n} points are available"
                )
            chosen = rng.choice(n, size=k, replace=False)
            centers = np.array(X[chosen])
            labels = _assign_nonempty(X, centers, [10])
            m, c = _block_params_from_labels(
                X, weights, labels, k, config.covariance_shrinkage, ridges[t]
            )
        else:
            Xs = X if subset is None else X[subset]
            ws = weights if subset is None else weights[subset]
            if k == 1:
                labels = np.zeros(Xs.shape[0], dtype=np.intp)
            else:
                labels = _weighted_kmeans(Xs, ws, k, rng)
            m, c = _block_params_from_labels(
                Xs, ws, labels, k, config.covariance_shrinkage, ridges[t]
            )
        means.append(m)
        covs.append(c)

    initial_probs = np.full(counts[0], 1.0 / counts[0])
    transitions = [
        np.full((counts[t], counts[t + 1]), 1.0 / counts[t + 1])
        for t in range(structure.num_blocks - 1)
    ]
    return HmmVbModel.from_arrays(structure, initial_probs, transitions, means, covs)


def initialize(
    dataset: Dataset,
    structure: BlockStructure,
    config: FitConfig = FitConfig(),
    rng: np.random.Generator | None = None,
) -> HmmVbModel:
    """Build a starting model: per-block clustering for the Gaussian states,
    uniform initial and transition probabilities.

    Parameters
    ----------
    dataset : Dataset
    structure : BlockStructure
    config : FitConfig
        ``init_scheme`` picks how block states are seeded: ``kmeans-full``
        clusters all points, ``kmeans-subset`` clusters a random fraction,
        and ``random-centroids`` uses sampled points as one-shot centroids.
    rng : numpy Generator, optional
        Overrides the generator derived from ``config.rng_seed``.
    """
    _check_fit_inputs(dataset, structure)
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    blocks = [np.ascontiguousarray(B) for B in dataset.blocks(structure)]
    ridges = _resolve_ridges(blocks, dataset.weights, config)
    return _initialize_from_blocks(blocks, dataset.weights, structure, config, ridges, rng)


def _check_fit_inputs(dataset: Dataset, structure: BlockStructure) -> None:
    if dataset.dimension != structure.dimension:
        raise ModelValidationError(
            f"dataset has {dataset.dimension} columns but the structure "
            f"describes {structure.dimension}"
        )
    if dataset.num_points < max(structure.state_counts):
        raise ModelValidationError(
            "dataset must contain at least as many points as the largest "
            "per-block state count"
        )


def _e_step(model: HmmVbModel, blocks: list[np.ndarray], weights: np.ndarray):
    """Weighted posterior sums needed by the M-step, plus the log likelihood.

    Returns ``(state_sums, pair_sums, first_block_marginals, loglik)`` where
    ``state_sums[t][k] = sum_i w_i P(s_t = k | x_i)`` and ``pair_sums[t]`` is
    the matching weighted sum of state-pair posteriors.
    """
    log_b = _block_log_densities(model, blocks)
    alpha_bars, scaled_emissions, beta_bars, log_evidence = _forward_backward_arrays(model, log_b)
    T = model.num_blocks

    marginals = [alpha_bars[t] * beta_bars[t] for t in range(T)]
    state_sums = [weights @ marginals[t] for t in range(T)]
    pair_sums = []
    for t in range(T - 1):
        right = scaled_emissions[t + 1] * beta_bars[t + 1]
        pair = (alpha_bars[t] * weights[:, None]).T @ right
        pair_sums.append(pair * model.transitions[t])
    loglik = float(weights @ log_evidence)
    return marginals, state_sums, pair_sums, loglik


def _m_step(
    model: HmmVbModel,
    blocks: list[np.ndarray],
    weights: np.ndarray,
    marginals: list[np.ndarray],
    state_sums: list[np.ndarray],
    pair_sums: list[np.ndarray],
    ridges: list[float],
) -> HmmVbModel:
    structure = model.structure
    T = structure.num_blocks
    starvation = STARVATION_FRACTION * weights.sum()

    means, covs = [], []
    for t in range(T):
        X = blocks[t]
        R = marginals[t] * weights[:, None]
        denom = state_sums[t]
        M, d = model.block_means[t].shape
        new_means = np.empty((M, d))
        new_covs = np.empty((M, d, d))
        for k in range(M):
            if denom[k] < starvation:
                # Starved state: freeze its Gaussian at the current values.
                new_means[k] = model.block_means[t][k]
                new_covs[k] = model.block_covariances[t][k]
                continue
            mu = R[:, k] @ X / denom[k]
            centered = X - mu
            cov = (centered * R[:, k, None]).T @ centered / denom[k]
            new_means[k] = mu
            new_covs[k] = cov + ridges[t] * np.eye(d)
        means.append(new_means)
        covs.append(new_covs)

    initial = state_sums[0] / state_sums[0].sum()

    transitions = []
    for t in range(T - 1):
        A = np.array(pair_sums[t])
        row_sums = A.sum(axis=1)
        starved_rows = state_sums[t] < starvation
        for k in np.flatnonzero(starved_rows | (row_sums <= 0)):
            A[k] = model.transitions[t][k]
        A /= A.sum(axis=1, keepdims=True)
        transitions.append(A)

    return HmmVbModel.from_arrays(structure, initial, transitions, means, covs)


def _fit_once(
    blocks: list[np.ndarray],
    weights: np.ndarray,
    structure: BlockStructure,
    config: FitConfig,
    ridges: list[float],
    start_model: HmmVbModel,
) -> tuple[HmmVbModel, list[float], bool]:
    model = start_model
    marginals, state_sums, pair_sums, loglik = _e_step(model, blocks, weights)
    trace = [loglik]
    converged = False
    for _ in range(config.max_iterations):
        model = _m_step(model, blocks, weights, marginals, state_sums, pair_sums, ridges)
        marginals, state_sums, pair_sums, new_loglik = _e_step(model, blocks, weights)
        trace.append(new_loglik)
        if abs(new_loglik - loglik) < config.rel_loglik_tolerance * (1.0 + abs(new_loglik)):
            loglik = new_loglik
            converged = True
            break
        loglik = new_loglik
    return model, trace, converged


def baum_welch_fit(
    dataset: Dataset,
    structure: BlockStructure,
    config: FitConfig = FitConfig(),
    initial_model: HmmVbModel | None = None,
    n_jobs: int = 1,
) -> tuple[HmmVbModel, FitReport]:
    """Fit a model by weighted EM, returning the best of several restarts.

    Parameters
    ----------
    dataset : Dataset
    structure : BlockStructure
    config : FitConfig
        Restart count, convergence tolerance, initialization scheme.
    initial_model : HmmVbModel, optional
        Warm start; when given, a single run starts from this model and no
        initialization is performed.
    n_jobs : int
        Number of threads across restarts.

    Returns
    -------
    (HmmVbModel, FitReport)
        The restart with the highest final log likelihood.
    """
    _check_fit_inputs(dataset, structure)
    blocks = [np.ascontiguousarray(B) for B in dataset.blocks(structure)]
    weights = dataset.weights
    ridges = _resolve_ridges(blocks, weights, config)

    def run(start: HmmVbModel) -> tuple[HmmVbModel, list[float], bool]:
        return _fit_once(blocks, weights, structure, config, ridges, start)

    if initial_model is not None:
        if initial_model.structure != structure:
            raise ModelValidationError("initial_model structure does not match")
        results = [run(initial_model)]
    else:
        seeds = np.random.SeedSequence(config.rng_seed).spawn(config.restarts)
        starts = [
            _initialize_from_blocks(
                blocks, weights, structure, config, ridges, np.random.default_rng(s)
            )
            for s in seeds
        ]
        if n_jobs > 1 and len(starts) > 1:
            with ThreadPoolExecutor(max_workers=n_jobs) as pool:
                results = list(pool.map(run, starts))
        else:
            results = [run(s) for s in starts]

    best = 0
    for i in range(1, len(results)):
        if results[i][1][-1] > results[best][1][-1]:
            best = i
    model, trace, converged = results[best]
    report = FitReport(
        log_likelihood_trace=tuple(trace),
        iterations=len(trace) - 1,
        converged=converged,
        bic=bic(model, dataset),
        nonempty_components=count_nonempty_components(model, dataset)[0],
        restart_index=best,
    )
    return model, report


def bic(model: HmmVbModel, dataset: Dataset) -> float:
    """Bayesian information criterion: −2·loglik + p·log(total weight)."""
    from .inference import log_likelihood

    p = num_free_parameters(model)
    return -2.0 * log_likelihood(model, dataset) + p * float(np.log(dataset.total_weight))


def count_nonempty_components(model: HmmVbModel, dataset: Dataset) -> tuple[tuple[int, ...], int]:
    """States used by at least one point's decoded sequence, per block and total."""
    paths = viterbi(model, dataset.points)
    counts = tuple(int(len(np.unique(paths[:, t]))) for t in range(model.num_blocks))
    return counts, int(sum(counts))


@dataclass(frozen=True)
class SelectionCell:
    """One grid cell of a model-selection sweep."""

    state_counts: tuple[int, ...]
    bic: float | None = None
    log_likelihood: float | None = None
    num_parameters: int | None = None
    nonempty_components: tuple[int, ...] | None = None
    cluster_count: int | None = None
    converged: bool | None = None
    error: str | None = None

    def as_json_dict(self) -> dict:
        return {
            "state_counts": list(self.state_counts),
            "bic": self.bic,
            "log_likelihood": self.log_likelihood,
            "num_parameters": self.num_parameters,
            "nonempty_components": (
                None if self.nonempty_components is None else list(self.nonempty_components)
            ),
            "cluster_count": self.cluster_count,
            "converged": self.converged,
            "error": self.error,
        }


def select_model(
    dataset: Dataset,
    structure: BlockStructure,
    state_count_grid: Sequence[Sequence[int]],
    config: FitConfig = FitConfig(),
    prefer_simplest: bool = False,
    mode_config=None,
    n_jobs: int = 1,
) -> tuple[HmmVbModel | None, list[SelectionCell]]:
    """Sweep per-block state counts, fit each cell, and pick a winner by BIC.

    Each cell fits ``structure.with_state_counts(cell)`` (best of the
    configured restarts) and records BIC, log likelihood, nonempty
    components, and the modal cluster count.  The default winner is the
    minimal-BIC cell.  With ``prefer_simplest``, among cells whose cluster
    count equals the minimal-BIC cell's, the one with fewest free parameters
    wins (BIC breaks remaining ties).

    A cell whose fit raises a validation or numerical error is recorded with
    its message and the sweep continues.

    Returns
    -------
    (HmmVbModel or None, list of SelectionCell)
        The winning model (None if every cell failed) and the full table.
    """
    from .modal import ModeSearchConfig, cluster

    grid = [tuple(int(v) for v in cell) for cell in state_count_grid]
    if not grid:
        raise ModelValidationError("state_count_grid must not be empty")
    for cell in grid:
        if len(cell) != structure.num_blocks:
            raise ModelValidationError(
                f"grid entry {cell} has {len(cell)} counts but the structure "
                f"has {structure.num_blocks} blocks"
            )
    if mode_config is None:
        mode_config = ModeSearchConfig()

    def fit_cell(counts: tuple[int, ...]):
        cell_structure = structure.with_state_counts(counts)
        try:
            model, report = baum_welch_fit(dataset, cell_structure, config)
        except (ModelValidationError, NumericalError) as exc:
            return SelectionCell(state_counts=counts, error=str(exc)), None
        try:
            cluster_count = len(cluster(model, dataset, mode_config).cluster_sizes)
            cluster_error = None
        except NumericalError as exc:
            cluster_count = None
            cluster_error = f"clustering failed: {exc}"
        cell = SelectionCell(
            state_counts=counts,
            bic=report.bic,
            log_likelihood=report.final_log_likelihood,
            num_parameters=num_free_parameters(model),
            nonempty_components=report.nonempty_components,
            cluster_count=cluster_count,
            converged=report.converged,
            error=cluster_error,
        )
        return cell, model

    if n_jobs > 1 and len(grid) > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            outcomes = list(pool.map(fit_cell, grid))
    else:
        outcomes = [fit_cell(c) for c in grid]

    cells = [cell for cell, _ in outcomes]
    fitted = [(cell, model) for cell, model in outcomes if model is not None and cell.bic is not None]
    if not fitted:
        return None, cells

    best_cell, best_model = min(fitted, key=lambda cm: cm[0].bic)
    if prefer_simplest and best_cell.cluster_count is not None:
        candidates = [
            (cell, model)
            for cell, model in fitted
            if cell.cluster_count == best_cell.cluster_count
        ]
        best_cell, best_model = min(
            candidates, key=lambda cm: (cm[0].num_parameters, cm[0].bic)
        )
    return best_model, cells
