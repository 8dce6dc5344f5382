"""Poly-RBF: q-space signal modelling, prediction and cross-protocol harmonisation."""

__version__ = "0.1.0"

from .errors import (
    ArtifactError,
    ExtrapolationError,
    InvalidArgumentError,
    NiftiError,
    PolyRBFError,
    ProtocolMismatchError,
    RankDeficiencyError,
    StageError,
    UnidentifiableTensorError,
)
from .geometry import BasisConfig, design_matrix, design_row, design_rows, fibonacci_centers, kernel
from .gradients import GradientScheme, read_scheme, write_scheme
from .estimator import build_projector, fit_signal_volume, fit_volume, fit_voxel, select_order
from .predictor import baseline_predict, predict_log, predict_signal, resample_volume
from .volume import SignalVolume, normalize_b0, read_nifti, write_nifti
from .harmonize import Dataset, PipelineConfig, harmonize_pipeline
