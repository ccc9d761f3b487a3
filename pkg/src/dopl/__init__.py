"""Fixed-effect dynamic ordered logit: moment functions, verification and GMM."""

from .errors import (
    DataError,
    EnumerationLimitError,
    EstimationError,
    IdentificationError,
    SingularParameterError,
)
from .model import (
    IndexSpec,
    PanelDataset,
    Params,
    logistic_cdf,
    path_probability,
    single_index,
    transition_probs,
)
from .moments import MomentIndex, enumerate_indices, moment_count, moment_general, moment_t3

__version__ = "0.1.0"
