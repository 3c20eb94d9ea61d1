"""Chain-structured Gaussian mixtures over variable blocks: fitting by
expectation-maximization, exact by-block inference, and modal clustering
aimed at recovering rare clusters."""

from .exceptions import EnumerationSizeError, ModelValidationError, NumericalError
from .inference import PosteriorTables, forward_backward, log_density, log_likelihood, viterbi
from .modal import (
    ClusteringResult,
    ModeSearchConfig,
    ModeSearchResult,
    cluster,
    find_mode,
    mbw_step,
    modal_em_step_gmm,
)
from .model import (
    BlockStructure,
    Dataset,
    GaussianMixture,
    GaussianParams,
    HmmVbModel,
    deserialize_model,
    load_model_document,
    num_free_parameters,
    serialize_model,
)
from .oracle import MappedGmm, enumerate_mapped_gmm, posterior_over_sequences
from .simulate import (
    LabeledSample,
    SimSpec,
    confusion_matrix,
    generate,
    generate_flat_gmm_50,
    generate_three_block,
    generate_two_block,
)
from .training import (
    FitConfig,
    FitReport,
    SelectionCell,
    baum_welch_fit,
    bic,
    count_nonempty_components,
    initialize,
    select_model,
)

__version__ = "0.1.0"

__all__ = [
    "BlockStructure",
    "ClusteringResult",
    "Dataset",
    "EnumerationSizeError",
    "FitConfig",
    "FitReport",
    "GaussianMixture",
    "GaussianParams",
    "HmmVbModel",
    "LabeledSample",
    "MappedGmm",
    "ModeSearchConfig",
    "ModeSearchResult",
    "ModelValidationError",
    "NumericalError",
    "PosteriorTables",
    "SelectionCell",
    "SimSpec",
    "baum_welch_fit",
    "bic",
    "cluster",
    "confusion_matrix",
    "count_nonempty_components",
    "deserialize_model",
    "enumerate_mapped_gmm",
    "find_mode",
    "forward_backward",
    "generate",
    "generate_flat_gmm_50",
    "generate_three_block",
    "generate_two_block",
    "initialize",
    "load_model_document",
    "log_density",
    "log_likelihood",
    "mbw_step",
    "modal_em_step_gmm",
    "num_free_parameters",
    "posterior_over_sequences",
    "select_model",
    "serialize_model",
    "viterbi",
]
