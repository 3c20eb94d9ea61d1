"""Core types: block structure, Gaussian states, the chain model, datasets.

A model partitions the data columns into an ordered sequence of blocks.
Each block carries its own set of Gaussian states, and consecutive blocks
are linked by a transition matrix, so a joint density over all columns is
scored like a Markov chain whose "time" axis runs over blocks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .exceptions import ModelValidationError

__all__ = [
    "BlockStructure",
    "Dataset",
    "GaussianMixture",
    "GaussianParams",
    "HmmVbModel",
    "deserialize_model",
    "load_model_document",
    "num_free_parameters",
    "serialize_model",
]

PROB_TOL = 1e-10
LOG_2PI = float(np.log(2.0 * np.pi))


def _frozen_array(values, dtype=float) -> np.ndarray:
    out = np.array(values, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _check_probability_vector(p: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(p)):
        raise ModelValidationError(f"{name} contains non-finite entries")
    if np.any(p < 0):
        raise ModelValidationError(f"{name} contains negative entries")
    total = float(p.sum())
    if abs(total - 1.0) > PROB_TOL:
        raise ModelValidationError(f"{name} sums to {total!r}, expected 1 within {PROB_TOL}")


def _check_structure(structure) -> tuple[int, ...]:
    if not isinstance(structure, BlockStructure):
        raise ModelValidationError("structure must be a BlockStructure")
    return structure.state_counts


@dataclass(frozen=True)
class BlockStructure:
    """Partition of the data columns into an ordered chain of variable blocks.

    Parameters
    ----------
    block_dims : sequence of int
        Number of columns in each block, in chain order.
    state_counts : sequence of int
        Number of Gaussian states per block; same length as ``block_dims``.
    column_permutation : sequence of int, optional
        Position in the block layout of each raw data column, i.e.
        ``layout[:, column_permutation[j]] = raw[:, j]``.  Defaults to the
        identity, meaning raw columns are already grouped by block.
    """

    block_dims: tuple[int, ...]
    state_counts: tuple[int, ...]
    column_permutation: tuple[int, ...] | None = None

    def __post_init__(self):
        dims = tuple(int(v) for v in self.block_dims)
        counts = tuple(int(v) for v in self.state_counts)
        if len(dims) == 0:
            raise ModelValidationError("block_dims must contain at least one block")
        if len(counts) != len(dims):
            raise ModelValidationError(
                f"state_counts has {len(counts)} entries but there are {len(dims)} blocks"
            )
        if any(v < 1 for v in dims):
            raise ModelValidationError("every block dimension must be a positive integer")
        if any(v < 1 for v in counts):
            raise ModelValidationError("every block state count must be a positive integer")
        d = sum(dims)
        perm = self.column_permutation
        if perm is None:
            perm = tuple(range(d))
        else:
            perm = tuple(int(v) for v in perm)
            if sorted(perm) != list(range(d)):
                raise ModelValidationError(
                    f"column_permutation must be a permutation of 0..{d - 1}"
                )
        object.__setattr__(self, "block_dims", dims)
        object.__setattr__(self, "state_counts", counts)
        object.__setattr__(self, "column_permutation", perm)

    @property
    def num_blocks(self) -> int:
        return len(self.block_dims)

    @property
    def dimension(self) -> int:
        return sum(self.block_dims)

    @cached_property
    def block_offsets(self) -> tuple[int, ...]:
        """Start offset of each block within the layout ordering."""
        return tuple(int(v) for v in np.concatenate([[0], np.cumsum(self.block_dims)[:-1]]))

    @cached_property
    def _inverse_permutation(self) -> np.ndarray:
        inv = np.empty(self.dimension, dtype=np.intp)
        inv[np.asarray(self.column_permutation, dtype=np.intp)] = np.arange(self.dimension)
        inv.setflags(write=False)
        return inv

    def to_layout(self, points: np.ndarray) -> np.ndarray:
        """Reorder raw-order columns into block layout order."""
        points = np.asarray(points, dtype=float)
        return points[..., self._inverse_permutation]

    def to_raw(self, layout_points: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`to_layout`."""
        layout_points = np.asarray(layout_points, dtype=float)
        return layout_points[..., np.asarray(self.column_permutation, dtype=np.intp)]

    def split_layout(self, layout_points: np.ndarray) -> list[np.ndarray]:
        """Split layout-order columns into per-block arrays (views)."""
        out = []
        for t, dt in enumerate(self.block_dims):
            off = self.block_offsets[t]
            out.append(layout_points[..., off : off + dt])
        return out

    def split(self, points: np.ndarray) -> list[np.ndarray]:
        """Split raw-order columns into per-block arrays."""
        return self.split_layout(self.to_layout(points))

    def with_state_counts(self, state_counts: Sequence[int]) -> "BlockStructure":
        return BlockStructure(self.block_dims, tuple(state_counts), self.column_permutation)

    def as_dict(self) -> dict:
        return {
            "block_dims": list(self.block_dims),
            "state_counts": list(self.state_counts),
            "column_permutation": list(self.column_permutation),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BlockStructure":
        try:
            dims = doc["block_dims"]
            counts = doc["state_counts"]
        except KeyError as exc:
            raise ModelValidationError(f"block structure is missing field {exc.args[0]!r}") from None
        return cls(tuple(dims), tuple(counts), doc.get("column_permutation"))


class GaussianParams:
    """Mean and full covariance of one Gaussian state.

    The covariance is validated (symmetric, positive definite) and its lower
    Cholesky factor is cached at construction.
    """

    __slots__ = ("mean", "covariance", "cholesky", "log_det")

    def __init__(self, mean, covariance):
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(covariance, dtype=float)
        if mean.ndim != 1:
            raise ModelValidationError("mean must be a 1-D array")
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ModelValidationError(
                f"covariance has shape {cov.shape}, expected ({d}, {d})"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ModelValidationError("Gaussian parameters contain non-finite entries")
        scale = max(1.0, float(np.abs(cov).max()))
        if float(np.abs(cov - cov.T).max()) > 1e-12 * scale:
            raise ModelValidationError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ModelValidationError("covariance is not positive definite") from None
        self.mean = _frozen_array(mean)
        self.covariance = _frozen_array(cov)
        self.cholesky = _frozen_array(chol)
        self.log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))

    @property
    def dimension(self) -> int:
        return self.mean.shape[0]

    def as_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "covariance": self.covariance.tolist()}


def _batched_gaussian_log_densities(
    points: np.ndarray,
    means: np.ndarray,
    chols: np.ndarray,
    log_dets: np.ndarray,
    chunk: int = 4096,
) -> np.ndarray:
    """Log densities of ``points`` (n, d) under each of K Gaussians, as (n, K)."""
    n, d = points.shape
    K = means.shape[0]
    const = -0.5 * (d * LOG_2PI + log_dets)
    if d == 1:
        var = chols[:, 0, 0] ** 2
        diff = points - means[:, 0][None, :]
        return const[None, :] - 0.5 * diff * diff / var[None, :]
    out = np.empty((n, K))
    eye = np.eye(d)
    for start in range(0, K, chunk):
        stop = min(start + chunk, K)
        C = stop - start
        linv = np.linalg.solve(chols[start:stop], np.broadcast_to(eye, (C, d, d)))
        # Rows of y are L^{-1}(x - mu), assembled as x L^{-T} - mu L^{-T} so the
        # point part is a single (n, d) @ (d, C*d) product.
        shifted_means = np.einsum("cij,cj->ci", linv, means[start:stop])  # (C, d)
        y = points @ linv.transpose(2, 0, 1).reshape(d, C * d)
        y = y.reshape(n, C, d)
        y -= shifted_means[None, :, :]
        maha = np.einsum("ncd,ncd->nc", y, y)
        out[:, start:stop] = const[start:stop][None, :] - 0.5 * maha
    return out


class GaussianMixture:
    """Flat mixture of full-covariance Gaussians in a single space."""

    def __init__(self, weights, means, covariances):
        weights = np.asarray(weights, dtype=float)
        means = np.asarray(means, dtype=float)
        covariances = np.asarray(covariances, dtype=float)
        if weights.ndim != 1:
            raise ModelValidationError("weights must be a 1-D array")
        K = weights.shape[0]
        if means.ndim != 2 or means.shape[0] != K:
            raise ModelValidationError(f"means must have shape ({K}, d)")
        d = means.shape[1]
        if covariances.shape != (K, d, d):
            raise ModelValidationError(f"covariances must have shape ({K}, {d}, {d})")
        _check_probability_vector(weights, "mixture weights")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(covariances))):
            raise ModelValidationError("mixture parameters contain non-finite entries")
        covariances = 0.5 * (covariances + covariances.transpose(0, 2, 1))
        try:
            chols = np.linalg.cholesky(covariances)
        except np.linalg.LinAlgError:
            raise ModelValidationError("a mixture covariance is not positive definite") from None
        self.weights = _frozen_array(weights)
        self.means = _frozen_array(means)
        self.covariances = _frozen_array(covariances)
        self.cholesky_factors = _frozen_array(chols)
        self.log_dets = _frozen_array(
            2.0 * np.sum(np.log(np.diagonal(chols, axis1=1, axis2=2)), axis=1)
        )

    @property
    def num_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dimension(self) -> int:
        return self.means.shape[1]

    @cached_property
    def precisions(self) -> np.ndarray:
        """Inverse covariances, shape (K, d, d)."""
        eye = np.broadcast_to(np.eye(self.dimension), self.covariances.shape)
        out = np.linalg.solve(self.covariances, eye.copy())
        out = 0.5 * (out + out.transpose(0, 2, 1))
        out.setflags(write=False)
        return out

    @cached_property
    def precision_means(self) -> np.ndarray:
        """Precision-weighted means, shape (K, d)."""
        out = np.einsum("kde,ke->kd", self.precisions, self.means)
        out.setflags(write=False)
        return out

    def component_log_densities(self, points: np.ndarray) -> np.ndarray:
        """Per-component Gaussian log densities, shape (n, K)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return _batched_gaussian_log_densities(
            points, self.means, self.cholesky_factors, self.log_dets
        )

    def log_density(self, points: np.ndarray) -> np.ndarray:
        """Mixture log density of each point, shape (n,)."""
        comp = self.component_log_densities(points)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        shifted = comp + logw[None, :]
        m = shifted.max(axis=1)
        safe_m = np.where(np.isfinite(m), m, 0.0)
        return safe_m + np.log(np.exp(shifted - safe_m[:, None]).sum(axis=1))


class HmmVbModel:
    """Chain-structured Gaussian mixture over variable blocks.

    Parameters
    ----------
    structure : BlockStructure
    initial_probs : array, shape (M_1,)
        State distribution of the first block.
    transitions : sequence of arrays
        Row-stochastic matrices, one per consecutive block pair; the matrix
        for pair ``t`` has shape ``(M_t, M_{t+1})``.
    emissions : nested sequence of GaussianParams
        One inner sequence per block holding that block's Gaussian states.
    """

    def __init__(self, structure: BlockStructure, initial_probs, transitions, emissions):
        counts = _check_structure(structure)
        dims = structure.block_dims
        T = structure.num_blocks

        emissions = [list(block) for block in emissions]
        if len(emissions) != T:
            raise ModelValidationError(f"expected {T} emission blocks, got {len(emissions)}")
        for t, block in enumerate(emissions):
            if len(block) != counts[t]:
                raise ModelValidationError(
                    f"emissions[{t}] has {len(block)} states, expected {counts[t]}"
                )
            for k, g in enumerate(block):
                if not isinstance(g, GaussianParams):
                    raise ModelValidationError(f"emissions[{t}][{k}] must be GaussianParams")
                if g.dimension != dims[t]:
                    raise ModelValidationError(
                        f"emissions[{t}][{k}] has dimension {g.dimension}, "
                        f"expected {dims[t]}"
                    )
        block_means = [np.stack([g.mean for g in block]) for block in emissions]
        block_covs = [np.stack([g.covariance for g in block]) for block in emissions]
        block_chols = [np.stack([g.cholesky for g in block]) for block in emissions]
        self._init_from_stacked(
            structure, initial_probs, transitions, block_means, block_covs, block_chols
        )
        self._emissions = tuple(tuple(block) for block in emissions)

    @classmethod
    def from_arrays(cls, structure, initial_probs, transitions, means, covariances):
        """Build a model from per-block stacked mean (M_t, d_t) and covariance
        (M_t, d_t, d_t) arrays; validation (symmetry, positive definiteness)
        runs batched per block."""
        counts = _check_structure(structure)
        dims = structure.block_dims
        block_means, block_covs, block_chols = [], [], []
        for t in range(structure.num_blocks):
            mu = np.asarray(means[t], dtype=float)
            cov = np.asarray(covariances[t], dtype=float)
            if mu.shape != (counts[t], dims[t]):
                raise ModelValidationError(
                    f"means[{t}] has shape {mu.shape}, expected ({counts[t]}, {dims[t]})"
                )
            if cov.shape != (counts[t], dims[t], dims[t]):
                raise ModelValidationError(
                    f"covariances[{t}] has shape {cov.shape}, "
                    f"expected ({counts[t]}, {dims[t]}, {dims[t]})"
                )
            if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
                raise ModelValidationError(
                    f"emission parameters for block {t} contain non-finite entries"
                )
            covT = cov.transpose(0, 2, 1)
            scale = max(1.0, float(np.abs(cov).max()))
            if float(np.abs(cov - covT).max()) > 1e-12 * scale:
                raise ModelValidationError(f"a covariance in block {t} is not symmetric")
            cov = 0.5 * (cov + covT)
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                raise ModelValidationError(
                    f"a covariance in block {t} is not positive definite"
                ) from None
            block_means.append(mu)
            block_covs.append(cov)
            block_chols.append(chol)
        self = object.__new__(cls)
        self._init_from_stacked(
            structure, initial_probs, transitions, block_means, block_covs, block_chols
        )
        self._emissions = None
        return self

    def _init_from_stacked(
        self, structure, initial_probs, transitions, block_means, block_covs, block_chols
    ):
        counts = structure.state_counts
        T = structure.num_blocks

        initial_probs = np.asarray(initial_probs, dtype=float)
        if initial_probs.shape != (counts[0],):
            raise ModelValidationError(
                f"initial_probs has shape {initial_probs.shape}, expected ({counts[0]},)"
            )
        _check_probability_vector(initial_probs, "initial_probs")

        transitions = list(transitions)
        if len(transitions) != T - 1:
            raise ModelValidationError(
                f"expected {T - 1} transition matrices, got {len(transitions)}"
            )
        frozen_transitions = []
        for t, A in enumerate(transitions):
            A = np.asarray(A, dtype=float)
            if A.shape != (counts[t], counts[t + 1]):
                raise ModelValidationError(
                    f"transitions[{t}] has shape {A.shape}, "
                    f"expected ({counts[t]}, {counts[t + 1]})"
                )
            if not np.all(np.isfinite(A)):
                raise ModelValidationError(f"transitions[{t}] contains non-finite entries")
            if np.any(A < 0):
                raise ModelValidationError(f"transitions[{t}] contains negative entries")
            row_sums = A.sum(axis=1)
            bad = np.abs(row_sums - 1.0) > PROB_TOL
            if np.any(bad):
                k = int(np.argmax(bad))
                raise ModelValidationError(
                    f"transitions[{t}] row {k} sums to {row_sums[k]!r}, "
                    f"expected 1 within {PROB_TOL}"
                )
            frozen_transitions.append(_frozen_array(A))

        self.structure = structure
        self.initial_probs = _frozen_array(initial_probs)
        self.transitions = tuple(frozen_transitions)
        # Stacked per-block caches used by the inference and search loops.
        self.block_means = tuple(_frozen_array(m) for m in block_means)
        self.block_covariances = tuple(_frozen_array(c) for c in block_covs)
        self.block_cholesky_factors = tuple(_frozen_array(c) for c in block_chols)
        self.block_log_dets = tuple(
            _frozen_array(2.0 * np.sum(np.log(np.diagonal(c, axis1=1, axis2=2)), axis=1))
            for c in block_chols
        )

    @property
    def emissions(self) -> tuple[tuple[GaussianParams, ...], ...]:
        """Per-block Gaussian states as objects (built lazily)."""
        if self._emissions is None:
            self._emissions = tuple(
                tuple(
                    GaussianParams(self.block_means[t][k], self.block_covariances[t][k])
                    for k in range(self.block_means[t].shape[0])
                )
                for t in range(self.num_blocks)
            )
        return self._emissions

    @property
    def num_blocks(self) -> int:
        return self.structure.num_blocks

    @property
    def dimension(self) -> int:
        return self.structure.dimension

    @cached_property
    def log_initial_probs(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            out = np.log(self.initial_probs)
        out.setflags(write=False)
        return out

    @cached_property
    def log_transitions(self) -> tuple[np.ndarray, ...]:
        out = []
        for A in self.transitions:
            with np.errstate(divide="ignore"):
                logA = np.log(A)
            logA.setflags(write=False)
            out.append(logA)
        return tuple(out)

    @cached_property
    def block_precisions(self) -> tuple[np.ndarray, ...]:
        """Per-block inverse covariances, each (M_t, d_t, d_t)."""
        out = []
        for covs in self.block_covariances:
            eye = np.broadcast_to(np.eye(covs.shape[1]), covs.shape)
            P = np.linalg.solve(covs, eye.copy())
            P = 0.5 * (P + P.transpose(0, 2, 1))
            P.setflags(write=False)
            out.append(P)
        return tuple(out)

    @cached_property
    def block_precision_means(self) -> tuple[np.ndarray, ...]:
        """Per-block precision-weighted means, each (M_t, d_t)."""
        out = []
        for P, mu in zip(self.block_precisions, self.block_means):
            pm = np.einsum("kde,ke->kd", P, mu)
            pm.setflags(write=False)
            out.append(pm)
        return tuple(out)


class Dataset:
    """Weighted sample of points, columns in raw order."""

    def __init__(self, points, weights=None):
        points = np.asarray(points, dtype=float)
        if points.ndim != 2:
            raise ModelValidationError("points must be a 2-D array of shape (n, d)")
        n = points.shape[0]
        if n < 1:
            raise ModelValidationError("dataset must contain at least one point")
        if not np.all(np.isfinite(points)):
            raise ModelValidationError("points contain non-finite entries")
        if weights is None:
            weights = np.ones(n)
        else:
            weights = np.asarray(weights, dtype=float)
            if weights.shape != (n,):
                raise ModelValidationError(f"weights must have shape ({n},)")
            if not np.all(np.isfinite(weights)):
                raise ModelValidationError("weights contain non-finite entries")
            if np.any(weights <= 0):
                raise ModelValidationError("weights must be strictly positive")
        self.points = _frozen_array(points)
        self.weights = _frozen_array(weights)

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    @property
    def dimension(self) -> int:
        return self.points.shape[1]

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    def blocks(self, structure: BlockStructure) -> list[np.ndarray]:
        """Per-block column groups of the points, in block order."""
        if structure.dimension != self.dimension:
            raise ModelValidationError(
                f"dataset has {self.dimension} columns but the block structure "
                f"describes {structure.dimension}"
            )
        return structure.split(self.points)


def num_free_parameters(model_or_structure) -> int:
    """Count of free parameters: initial-state simplex, transition rows, and
    per-state mean plus symmetric covariance entries."""
    if isinstance(model_or_structure, BlockStructure):
        structure = model_or_structure
    elif isinstance(model_or_structure, HmmVbModel):
        structure = model_or_structure.structure
    else:
        raise ModelValidationError("expected an HmmVbModel or BlockStructure")
    counts = structure.state_counts
    dims = structure.block_dims
    total = counts[0] - 1
    for t in range(structure.num_blocks - 1):
        total += counts[t] * (counts[t + 1] - 1)
    for M, d in zip(counts, dims):
        total += M * (d + d * (d + 1) // 2)
    return total


_FORMAT_NAME = "hmmvb-model"
_FORMAT_VERSION = 1


def serialize_model(model: HmmVbModel, standardization: dict | None = None) -> str:
    """Serialize a model to a JSON text document.

    ``standardization``, when given, must be a mapping with ``mean`` and
    ``scale`` arrays describing the affine transform that was applied to the
    training columns; it is stored verbatim so later commands can apply the
    same transform.
    """
    doc = {
        "format": _FORMAT_NAME,
        "version": _FORMAT_VERSION,
        "structure": model.structure.as_dict(),
        "initial_probs": model.initial_probs.tolist(),
        "transitions": [A.tolist() for A in model.transitions],
        "emissions": [[g.as_dict() for g in block] for block in model.emissions],
    }
    if standardization is not None:
        mean = np.asarray(standardization["mean"], dtype=float)
        scale = np.asarray(standardization["scale"], dtype=float)
        if mean.shape != (model.dimension,) or scale.shape != (model.dimension,):
            raise ModelValidationError(
                "standardization mean and scale must each have one entry per column"
            )
        if np.any(scale <= 0):
            raise ModelValidationError("standardization scale entries must be positive")
        doc["standardization"] = {"mean": mean.tolist(), "scale": scale.tolist()}
    return json.dumps(doc, indent=2)


def load_model_document(text: str | bytes) -> tuple[HmmVbModel, dict | None]:
    """Parse a serialized model; returns the model and the stored
    standardization mapping (or None)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelValidationError(f"model document is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ModelValidationError("model document must be a JSON object")
    if doc.get("format") != _FORMAT_NAME:
        raise ModelValidationError(
            f"model document has format {doc.get('format')!r}, expected {_FORMAT_NAME!r}"
        )
    if doc.get("version") != _FORMAT_VERSION:
        raise ModelValidationError(f"unsupported model document version {doc.get('version')!r}")
    for key in ("structure", "initial_probs", "transitions", "emissions"):
        if key not in doc:
            raise ModelValidationError(f"model document is missing field {key!r}")
    structure = BlockStructure.from_dict(doc["structure"])
    emissions = []
    for t, block in enumerate(doc["emissions"]):
        states = []
        for k, g in enumerate(block):
            if not isinstance(g, dict) or "mean" not in g or "covariance" not in g:
                raise ModelValidationError(
                    f"emissions[{t}][{k}] must be an object with mean and covariance"
                )
            states.append(GaussianParams(g["mean"], g["covariance"]))
        emissions.append(states)
    model = HmmVbModel(structure, doc["initial_probs"], doc["transitions"], emissions)
    standardization = doc.get("standardization")
    if standardization is not None:
        mean = np.asarray(standardization.get("mean"), dtype=float)
        scale = np.asarray(standardization.get("scale"), dtype=float)
        if mean.shape != (model.dimension,) or scale.shape != (model.dimension,):
            raise ModelValidationError("stored standardization has the wrong shape")
        if np.any(~np.isfinite(mean)) or np.any(~np.isfinite(scale)) or np.any(scale <= 0):
            raise ModelValidationError("stored standardization entries are invalid")
        standardization = {"mean": mean, "scale": scale}
    return model, standardization


def deserialize_model(text: str | bytes) -> HmmVbModel:
    """Parse a serialized model, discarding any stored standardization."""
    model, _ = load_model_document(text)
    return model
