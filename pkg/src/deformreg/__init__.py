"""Optimization-based multimodal deformable 3D image registration.

Core pieces: a reverse-mode autodiff tape over dense 3D tensor ops,
displacement-field transforms on the unit cube, correlation- and
descriptor-based similarity losses, an inverse-consistency regularized
objective, a multi-resolution two-step pyramid optimized per pair with
Adam, dataset pair sampling with loss randomization, and the matching
evaluation metrics (Dice, mTRE, folding fraction).
"""

from .tensor import Tensor3, TensorError, grid_coordinates, grid_spacing
from .tape import (
    Node,
    Tape,
    TapeError,
    grad_check,
    sample_nearest_values,
    sample_trilinear_values,
)
from .volume import (
    DegenerateInputError,
    Geometry,
    LabelVolume,
    LandmarkSet,
    Volume,
    VolumeError,
    invert_ct,
    preprocess,
    resize_trilinear,
)
from .fileio import (
    FormatError,
    UnsupportedError,
    read_field_raw,
    read_landmarks_csv,
    read_nifti,
    read_nifti_labels,
    read_volume_raw,
    write_field_raw,
    write_landmarks_csv,
    write_nifti,
    write_nifti_labels,
    write_volume_raw,
)
from .transforms import (
    AffineTransform,
    DisplacementField,
    TransformError,
    apply_affine,
    approximate_inverse,
    compose,
    jacobian_det_map,
    percent_neg_jac,
    random_affine,
    resample_field_to,
    warp,
    warp_nearest,
)
from .similarity import (
    SimilarityConfig,
    SimilarityError,
    lncc_map,
    loss_similarity,
    mind_ssc_descriptor,
)
from .losses import (
    LossConfig,
    LossError,
    gradient_inverse_consistency,
    loss_breakdown,
    randomized_loss,
    total_loss,
)
from .pipeline import (
    NumericalAbort,
    OptimizerConfig,
    PipelineError,
    PyramidModel,
    RegistrationResult,
    build_model,
    evaluate_model,
    instance_optimize,
)
from .sampling import (
    DatasetManifest,
    GuardVerdict,
    InconclusiveError,
    PairPlan,
    Patient,
    SamplingError,
    Scan,
    build_plan,
    dataset_weights,
    epoch_plan,
    erratum_guard,
    read_manifest,
    write_manifest,
)
from .metrics import MetricsError, MetricsReport, dice, evaluate_pair, mtre
from .synthetic import (
    ModalityRemap,
    Phantom,
    SyntheticError,
    TruthBundle,
    deformation_amplitude_bound,
    make_deformation,
    make_phantom,
    render_pair,
)

__all__ = [name for name in dir() if not name.startswith("_")]
