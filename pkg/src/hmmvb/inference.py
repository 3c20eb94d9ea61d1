"""Exact inference for the block-chain model: scaled forward-backward
recursions, posterior state tables, log densities, and Viterbi decoding.

All public functions accept points in raw column order and handle the
reordering into block layout internally.  Scaling keeps every recursion in
ordinary (non-log) arithmetic: emission densities are max-shifted per point
within each block, and the forward vector is renormalized at every block,
with the shifts and normalizers accumulated into the log evidence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ModelValidationError, NumericalError
from .model import Dataset, HmmVbModel, _batched_gaussian_log_densities

__all__ = [
    "PosteriorTables",
    "forward_backward",
    "log_density",
    "log_likelihood",
    "viterbi",
]


@dataclass(frozen=True)
class PosteriorTables:
    """Posterior summaries for a batch of points.

    Attributes
    ----------
    state_marginals : tuple of arrays
        One (n, M_t) array per block; row i holds the posterior probability
        of each block-t state given the full point i.
    transition_marginals : tuple of arrays
        One (n, M_t, M_{t+1}) array per consecutive block pair; entry
        [i, k, l] is the posterior probability of being in state k at block
        t and state l at block t+1.
    log_evidence : array, shape (n,)
        Log density of each point under the model.
    """

    state_marginals: tuple[np.ndarray, ...]
    transition_marginals: tuple[np.ndarray, ...]
    log_evidence: np.ndarray

    @property
    def num_points(self) -> int:
        return self.log_evidence.shape[0]


def _require_finite_points(points: np.ndarray) -> None:
    if not np.all(np.isfinite(points)):
        raise NumericalError("points contain non-finite entries")


def _as_batch(model: HmmVbModel, points) -> tuple[np.ndarray, bool]:
    points = np.asarray(points, dtype=float)
    single = points.ndim == 1
    batch = np.atleast_2d(points)
    if batch.ndim != 2 or batch.shape[1] != model.dimension:
        raise ModelValidationError(
            f"points have shape {points.shape}, expected (n, {model.dimension})"
        )
    _require_finite_points(batch)
    return batch, single


def _block_log_densities(model: HmmVbModel, blocks: list[np.ndarray]) -> list[np.ndarray]:
    """Emission log densities per block, each (n, M_t)."""
    return [
        _batched_gaussian_log_densities(
            np.ascontiguousarray(blocks[t]),
            model.block_means[t],
            model.block_cholesky_factors[t],
            model.block_log_dets[t],
        )
        for t in range(model.num_blocks)
    ]


def _forward_backward_arrays(model: HmmVbModel, log_b: list[np.ndarray], with_beta: bool = True):
    """Scaled forward-backward pass from per-block emission log densities.

    Returns ``(alpha_bars, scaled_emissions, beta_bars, log_evidence)`` where
    ``alpha_bars[t]`` is the normalized forward vector at block t,
    ``scaled_emissions[t]`` (t >= 1) holds the max-shifted emission densities
    divided by the block-t normalizer, and ``beta_bars[t]`` is the matching
    backward vector (all ones at the last block).  For any t,
    ``alpha_bars[t] * beta_bars[t]`` is the posterior state marginal.
    """
    T = model.num_blocks
    n = log_b[0].shape[0]

    alpha_bars: list[np.ndarray] = []
    scaled_emissions: list[np.ndarray | None] = [None] * T
    log_evidence = np.zeros(n)

    shifted = model.log_initial_probs[None, :] + log_b[0]
    m = shifted.max(axis=1)
    a = np.exp(shifted - m[:, None])
    c = a.sum(axis=1)
    if not np.all(np.isfinite(c)) or np.any(c <= 0):
        raise NumericalError("probability mass vanished at block 0")
    alpha_bars.append(a / c[:, None])
    log_evidence += m + np.log(c)

    for t in range(1, T):
        carried = alpha_bars[t - 1] @ model.transitions[t - 1]
        m = log_b[t].max(axis=1)
        shifted_b = np.exp(log_b[t] - m[:, None])
        a = carried * shifted_b
        c = a.sum(axis=1)
        if not np.all(np.isfinite(c)) or np.any(c <= 0):
            raise NumericalError(f"probability mass vanished at block {t}")
        alpha_bars.append(a / c[:, None])
        scaled_emissions[t] = shifted_b / c[:, None]
        log_evidence += m + np.log(c)

    beta_bars: list[np.ndarray | None] = [None] * T
    if with_beta:
        beta_bars[T - 1] = np.ones_like(alpha_bars[T - 1])
        for t in range(T - 2, -1, -1):
            beta_bars[t] = (scaled_emissions[t + 1] * beta_bars[t + 1]) @ model.transitions[t].T

    return alpha_bars, scaled_emissions, beta_bars, log_evidence


def _clip_unit(arr: np.ndarray) -> np.ndarray:
    return np.clip(arr, 0.0, 1.0)


def _tables_from_blocks(model: HmmVbModel, blocks: list[np.ndarray]) -> PosteriorTables:
    log_b = _block_log_densities(model, blocks)
    alpha_bars, scaled_emissions, beta_bars, log_evidence = _forward_backward_arrays(model, log_b)
    T = model.num_blocks
    state_marginals = tuple(_clip_unit(alpha_bars[t] * beta_bars[t]) for t in range(T))
    transition_marginals = tuple(
        _clip_unit(
            alpha_bars[t][:, :, None]
            * model.transitions[t][None, :, :]
            * (scaled_emissions[t + 1] * beta_bars[t + 1])[:, None, :]
        )
        for t in range(T - 1)
    )
    return PosteriorTables(state_marginals, transition_marginals, log_evidence)


def forward_backward(model: HmmVbModel, points) -> PosteriorTables:
    """Posterior state and state-pair marginals for one point or a batch.

    Parameters
    ----------
    model : HmmVbModel
    points : array, shape (d,) or (n, d)
        Points in raw column order.

    Returns
    -------
    PosteriorTables
        Batched tables; a single input point yields tables with n = 1.
    """
    batch, _ = _as_batch(model, points)
    return _tables_from_blocks(model, model.structure.split(batch))


def log_density(model: HmmVbModel, points):
    """Model log density; returns a float for a single (d,) point, else (n,)."""
    batch, single = _as_batch(model, points)
    log_b = _block_log_densities(model, model.structure.split(batch))
    _, _, _, log_evidence = _forward_backward_arrays(model, log_b, with_beta=False)
    return float(log_evidence[0]) if single else log_evidence


def log_likelihood(model: HmmVbModel, dataset: Dataset) -> float:
    """Weighted total log likelihood of a dataset."""
    log_b = _block_log_densities(model, dataset.blocks(model.structure))
    _, _, _, log_evidence = _forward_backward_arrays(model, log_b, with_beta=False)
    return float(dataset.weights @ log_evidence)


def viterbi(model: HmmVbModel, points):
    """Most probable state sequence per point, ties broken toward the lowest
    state index; returns (T,) ints for a single point, else (n, T)."""
    batch, single = _as_batch(model, points)
    log_b = _block_log_densities(model, model.structure.split(batch))
    T = model.num_blocks
    n = batch.shape[0]

    delta = model.log_initial_probs[None, :] + log_b[0]
    back: list[np.ndarray] = []
    for t in range(1, T):
        scores = delta[:, :, None] + model.log_transitions[t - 1][None, :, :]
        best_prev = scores.argmax(axis=1)
        delta = np.take_along_axis(scores, best_prev[:, None, :], axis=1)[:, 0, :] + log_b[t]
        back.append(best_prev)

    states = np.empty((n, T), dtype=np.intp)
    states[:, T - 1] = delta.argmax(axis=1)
    for t in range(T - 2, -1, -1):
        states[:, t] = np.take_along_axis(back[t], states[:, t + 1][:, None], axis=1)[:, 0]
    return states[0] if single else states
