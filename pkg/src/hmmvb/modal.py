"""Modal clustering: hill-climbing to density modes and grouping points by
the mode their search reaches.

For a flat Gaussian mixture the climb alternates a posterior E-step with a
closed-form M-step.  For the block-chain model the same fixed-point update
decouples per block, with the posterior state marginals taking the role of
the component posteriors, so each climb costs one forward-backward pass
plus one small linear solve per block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .exceptions import ModelValidationError, NumericalError
from .inference import _block_log_densities, _forward_backward_arrays, log_density, viterbi
from .model import Dataset, GaussianMixture, HmmVbModel

__all__ = [
    "ClusteringResult",
    "ModeSearchConfig",
    "ModeSearchResult",
    "cluster",
    "find_mode",
    "mbw_step",
    "modal_em_step_gmm",
]

START_MODES = ("viterbi-means", "data-points")


@dataclass(frozen=True)
class ModeSearchConfig:
    """Settings for mode seeking and mode merging.

    ``movement_tolerance`` stops a climb once the per-coordinate move,
    relative to the iterate's magnitude, falls below it.  Two modes merge
    when every coordinate agrees within ``merge_tolerance`` times the
    per-dimension data scale.  ``start_mode`` picks the climb starts:
    ``viterbi-means`` starts from the state means of each distinct decoded
    sequence (falling back to ``data-points`` when the distinct sequences
    exceed half the dataset), ``data-points`` starts from every point.
    """

    max_iterations: int = 1000
    movement_tolerance: float = 1e-8
    merge_tolerance: float = 1e-3
    start_mode: str = "viterbi-means"

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ModelValidationError("max_iterations must be positive")
        if not (self.movement_tolerance > 0):
            raise ModelValidationError("movement_tolerance must be positive")
        if not (self.merge_tolerance > 0):
            raise ModelValidationError("merge_tolerance must be positive")
        if self.start_mode not in START_MODES:
            raise ModelValidationError(
                f"start_mode must be one of {START_MODES}, got {self.start_mode!r}"
            )


@dataclass(frozen=True)
class ModeSearchResult:
    mode: np.ndarray
    converged: bool
    iterations: int


def modal_em_step_gmm(gmm: GaussianMixture, x) -> np.ndarray:
    """One fixed-point ascent step for a flat Gaussian mixture density.

    Computes component posteriors at ``x`` and returns the minimizer of the
    posterior-weighted quadratic surrogate, which never decreases the
    mixture density.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (gmm.dimension,):
        raise ModelValidationError(f"x must have shape ({gmm.dimension},)")
    if not np.all(np.isfinite(x)):
        raise NumericalError("x contains non-finite entries")
    comp = gmm.component_log_densities(x)[0]
    with np.errstate(divide="ignore"):
        scores = comp + np.log(gmm.weights)
    m = scores.max()
    if not np.isfinite(m):
        raise NumericalError("point outside support")
    post = np.exp(scores - m)
    post /= post.sum()
    A = np.einsum("k,kde->de", post, gmm.precisions)
    b = post @ gmm.precision_means
    try:
        factor = cho_factor(A, check_finite=False)
    except np.linalg.LinAlgError:
        raise NumericalError("aggregated precision is not positive definite") from None
    return cho_solve(factor, b, check_finite=False)


def _state_marginals_layout(model: HmmVbModel, layout_points: np.ndarray) -> list[np.ndarray]:
    blocks = model.structure.split_layout(layout_points)
    log_b = _block_log_densities(model, blocks)
    alpha_bars, _, beta_bars, _ = _forward_backward_arrays(model, log_b)
    return [a * b for a, b in zip(alpha_bars, beta_bars)]


def _mbw_step_layout(model: HmmVbModel, layout_points: np.ndarray) -> np.ndarray:
    """Batched ascent step in layout order, shape (n, d) -> (n, d)."""
    marginals = _state_marginals_layout(model, layout_points)
    out = np.empty_like(layout_points)
    for t in range(model.num_blocks):
        L = marginals[t]
        A = np.einsum("nk,kde->nde", L, model.block_precisions[t])
        b = np.einsum("nk,kd->nd", L, model.block_precision_means[t])
        off = model.structure.block_offsets[t]
        dt = model.structure.block_dims[t]
        try:
            out[:, off : off + dt] = np.linalg.solve(A, b[..., None])[..., 0]
        except np.linalg.LinAlgError:
            raise NumericalError(
                f"aggregated precision for block {t} is not positive definite"
            ) from None
    return out


def mbw_step(model: HmmVbModel, x) -> np.ndarray:
    """One fixed-point ascent step for the chain density, block by block.

    Parameters
    ----------
    model : HmmVbModel
    x : array, shape (d,)
        A point in raw column order.

    Returns
    -------
    array, shape (d,)
        The updated point, in raw column order.  Each block solves its own
        posterior-weighted precision system, so the cost is linear in the
        number of blocks.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (model.dimension,):
        raise ModelValidationError(f"x must have shape ({model.dimension},)")
    if not np.all(np.isfinite(x)):
        raise NumericalError("x contains non-finite entries")
    layout = model.structure.to_layout(x)[None, :]
    marginals = _state_marginals_layout(model, layout)
    out = np.empty(model.dimension)
    for t in range(model.num_blocks):
        L = marginals[t][0]
        A = np.einsum("k,kde->de", L, model.block_precisions[t])
        b = L @ model.block_precision_means[t]
        try:
            factor = cho_factor(A, check_finite=False)
        except np.linalg.LinAlgError:
            raise NumericalError(
                f"aggregated precision for block {t} is not positive definite"
            ) from None
        off = model.structure.block_offsets[t]
        out[off : off + model.structure.block_dims[t]] = cho_solve(
            factor, b, check_finite=False
        )
    return model.structure.to_raw(out)


def _movement(new: np.ndarray, old: np.ndarray) -> np.ndarray:
    """Per-row relative sup-norm move."""
    return (np.abs(new - old) / (1.0 + np.abs(new))).max(axis=-1)


def find_mode(model: HmmVbModel, x0, config: ModeSearchConfig = ModeSearchConfig()) -> ModeSearchResult:
    """Climb from ``x0`` (raw order) to a local mode of the model density.

    Iterates :func:`mbw_step` until the relative move falls below the
    configured tolerance; a climb that exhausts ``max_iterations`` returns
    its last iterate flagged as non-converged.
    """
    x = np.asarray(x0, dtype=float).copy()
    converged = False
    iterations = 0
    for it in range(config.max_iterations):
        new = mbw_step(model, x)
        iterations = it + 1
        done = _movement(new, x) < config.movement_tolerance
        x = new
        if done:
            converged = True
            break
    return ModeSearchResult(mode=x, converged=converged, iterations=iterations)


def _search_modes_layout(
    model: HmmVbModel, starts: np.ndarray, config: ModeSearchConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run all climbs at once, retiring converged rows from the batch."""
    X = np.array(starts, dtype=float)
    m = X.shape[0]
    active = np.ones(m, dtype=bool)
    converged = np.zeros(m, dtype=bool)
    iterations = np.zeros(m, dtype=np.intp)
    for it in range(config.max_iterations):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        new = _mbw_step_layout(model, X[idx])
        moves = _movement(new, X[idx])
        X[idx] = new
        iterations[idx] = it + 1
        done = moves < config.movement_tolerance
        converged[idx[done]] = True
        active[idx[done]] = False
    return X, converged, iterations


def _connected_components_within(modes: np.ndarray, scale: np.ndarray, tol: float) -> np.ndarray:
    """Single-linkage components of the graph joining modes whose coordinates
    all agree within ``tol * scale``."""
    m = modes.shape[0]
    comp = np.full(m, -1, dtype=np.intp)
    threshold = tol * scale
    next_comp = 0
    for seed in range(m):
        if comp[seed] >= 0:
            continue
        comp[seed] = next_comp
        frontier = [seed]
        while frontier:
            i = frontier.pop()
            close = (np.abs(modes - modes[i]) <= threshold).all(axis=1)
            newly = np.flatnonzero(close & (comp < 0))
            comp[newly] = next_comp
            frontier.extend(newly.tolist())
        next_comp += 1
    return comp


@dataclass(frozen=True)
class ClusteringResult:
    """Modal clustering of a dataset.

    Per point: the decoded state sequence, the index of the distinct mode
    its climb reached, and the final cluster label.  Per cluster: a
    representative mode vector (the member mode with the highest model
    density) and the member point count.  Cluster labels are ordered by
    decreasing size, ties broken by mode coordinates, so identical inputs
    yield identical labelings regardless of dataset row order.
    """

    labels: np.ndarray
    sequences: np.ndarray
    mode_indices: np.ndarray
    modes: np.ndarray
    mode_converged: np.ndarray
    mode_cluster_labels: np.ndarray
    cluster_modes: np.ndarray
    cluster_sizes: np.ndarray
    start_mode_used: str
    num_mode_searches: int

    @property
    def num_clusters(self) -> int:
        return self.cluster_sizes.shape[0]

    def as_json_dict(self) -> dict:
        return {
            "num_clusters": self.num_clusters,
            "cluster_sizes": self.cluster_sizes.tolist(),
            "cluster_modes": self.cluster_modes.tolist(),
            "modes": self.modes.tolist(),
            "mode_converged": self.mode_converged.tolist(),
            "mode_cluster_labels": self.mode_cluster_labels.tolist(),
            "start_mode_used": self.start_mode_used,
            "num_mode_searches": self.num_mode_searches,
        }


def cluster(
    model: HmmVbModel, dataset: Dataset, config: ModeSearchConfig = ModeSearchConfig()
) -> ClusteringResult:
    """Group points by the density mode their climb reaches.

    With ``viterbi-means`` starts, each point's sequence is decoded, one
    climb runs per distinct sequence from the concatenated state means, and
    every point inherits its sequence's mode; when the distinct sequences
    exceed half the dataset the starts switch to the points themselves.
    Modes are then merged within the configured tolerance (single linkage)
    and clusters follow the merged modes.

    Climbs that hit the iteration cap are kept, flagged per mode in
    ``mode_converged``; clustering still completes.
    """
    if dataset.dimension != model.dimension:
        raise ModelValidationError(
            f"dataset has {dataset.dimension} columns but the model expects {model.dimension}"
        )
    structure = model.structure
    n = dataset.num_points
    sequences = viterbi(model, dataset.points)

    start_mode_used = config.start_mode
    if config.start_mode == "viterbi-means":
        unique_seqs, point_to_start = np.unique(sequences, axis=0, return_inverse=True)
        if unique_seqs.shape[0] > 0.5 * n:
            start_mode_used = "data-points"
        else:
            starts = np.concatenate(
                [
                    model.block_means[t][unique_seqs[:, t]]
                    for t in range(structure.num_blocks)
                ],
                axis=1,
            )
    if start_mode_used == "data-points":
        starts = structure.to_layout(dataset.points)
        point_to_start = np.arange(n)

    raw_modes, search_converged, _ = _search_modes_layout(model, starts, config)
    raw_modes = structure.to_raw(raw_modes)

    # Collapse byte-identical climbs, then merge within tolerance.
    modes, mode_of_start = np.unique(raw_modes, axis=0, return_inverse=True)
    mode_converged = np.ones(modes.shape[0], dtype=bool)
    np.minimum.at(mode_converged, mode_of_start, search_converged)
    mode_indices = mode_of_start[point_to_start]

    wsum = dataset.total_weight
    mean = dataset.weights @ dataset.points / wsum
    var = dataset.weights @ (dataset.points - mean) ** 2 / wsum
    scale = np.sqrt(var)
    scale[scale <= 0] = 1.0

    merged = _connected_components_within(modes, scale, config.merge_tolerance)

    num_merged = int(merged.max()) + 1 if merged.size else 0
    sizes = np.bincount(merged[mode_indices], minlength=num_merged)
    mode_log_density = log_density(model, modes) if modes.size else np.empty(0)

    order = []
    for c in range(num_merged):
        members = np.flatnonzero(merged == c)
        best = members[np.argmax(mode_log_density[members])]
        candidates = members[mode_log_density[members] == mode_log_density[best]]
        rep = min(candidates, key=lambda i: tuple(modes[i]))
        order.append((-int(sizes[c]), tuple(modes[rep]), c, rep))
    order.sort(key=lambda item: item[:2])

    relabel = np.empty(num_merged, dtype=np.intp)
    cluster_modes = np.empty((num_merged, modes.shape[1] if modes.size else dataset.dimension))
    cluster_sizes = np.empty(num_merged, dtype=np.intp)
    for new_label, (_, _, c, rep) in enumerate(order):
        relabel[c] = new_label
        cluster_modes[new_label] = modes[rep]
        cluster_sizes[new_label] = sizes[c]

    mode_cluster_labels = relabel[merged]
    labels = mode_cluster_labels[mode_indices]

    return ClusteringResult(
        labels=labels,
        sequences=sequences,
        mode_indices=mode_indices,
        modes=modes,
        mode_converged=mode_converged,
        mode_cluster_labels=mode_cluster_labels,
        cluster_modes=cluster_modes,
        cluster_sizes=cluster_sizes,
        start_mode_used=start_mode_used,
        num_mode_searches=int(starts.shape[0]),
    )
