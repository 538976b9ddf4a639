"""Normalizing-flow density scoring for post-hoc OOD detection on backbone feature dumps."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ArgumentError,
    CorruptionError,
    FlowOODError,
    FormatError,
    NumericalError,
    RegistrationError,
    StateError,
    TrainingDivergedError,
    UnsupportedVersionError,
    ValidationError,
)
from .evaluator import (  # noqa: E402
    EvalReport,
    ScoredDataset,
    bootstrap_ci,
    bootstrap_compare,
    delong_test,
    evaluate_suite,
    histogram_export,
)
from .features import (  # noqa: E402
    ClassifierHead,
    DatasetManifest,
    FeatureSet,
    l2_normalize,
    preprocess,
    read_fvec,
    read_manifest,
    select_stages,
    subsample,
    write_fvec,
)
from .flow import FlowModel, flow_transform, log_prob, sample  # noqa: E402
from .metrics import aupr, auroc, fpr_at_tpr, ood_metrics  # noqa: E402
from .scorers import Bundle, available_scorers, get_scorer, plugin_scorer, register_scorer  # noqa: E402
from .synth import SyntheticSpec, generate_benchmark, oracle_auroc  # noqa: E402
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train  # noqa: E402
