"""dwcorr: test-time correction of activation distributions via 1D transport.

The package trains small reference models, freezes per-layer target
distributions (Wasserstein barycenters of centered training
activations), and at inference nudges each sample's activations toward
those targets with a sorted-matching update that trades distribution
fidelity against per-sample structure. Corruption generators, portable
binary artifact formats, and an evaluation CLI round out the toolkit.
"""

from .correction import CorrectionConfig, EnergyBreakdown, correct, correct_batch, energy
from .corruption import (
    ALL_KINDS,
    NOISE_KINDS,
    CorruptionSpec,
    SeverityConfig,
    apply,
    corrupt_dataset,
    default_severity_config,
)
from .errors import DwcorrError
from .evaluate import EvalReport, EvalRow, SweepResult, compute_mce, run_suite
from .nn import (
    Layer,
    Model,
    MLPSpec,
    TrainConfig,
    attach_correction,
    forward,
    predict,
    train_mlp,
)
from .otcore import (
    SortedView,
    TargetDistribution,
    barycenter,
    center,
    channel_dissimilarity,
    sort_with_indices,
    wasserstein_1d,
)
from .store import (
    load_dataset,
    load_model,
    load_targets,
    read_idx,
    save_dataset,
    save_model,
    save_targets,
)
from .targets import TargetAccumulator, accumulate, build_targets, finalize, merge

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "DwcorrError",
    "SortedView",
    "TargetDistribution",
    "sort_with_indices",
    "center",
    "wasserstein_1d",
    "barycenter",
    "channel_dissimilarity",
    "CorrectionConfig",
    "EnergyBreakdown",
    "correct",
    "correct_batch",
    "energy",
    "TargetAccumulator",
    "accumulate",
    "merge",
    "finalize",
    "build_targets",
    "CorruptionSpec",
    "SeverityConfig",
    "ALL_KINDS",
    "NOISE_KINDS",
    "apply",
    "corrupt_dataset",
    "default_severity_config",
    "Layer",
    "Model",
    "MLPSpec",
    "TrainConfig",
    "forward",
    "predict",
    "train_mlp",
    "attach_correction",
    "save_model",
    "load_model",
    "save_targets",
    "load_targets",
    "save_dataset",
    "load_dataset",
    "read_idx",
    "EvalRow",
    "EvalReport",
    "SweepResult",
    "run_suite",
    "compute_mce",
]
