"""Sample-efficient, uncertainty-aware classification.

kNN-style classification over latent distributions: an embedding network
whose weights follow a particle-approximated distribution, trained by
kernel-smoothed functional gradient descent, with deterministic metric
learning, softmax, deep-ensemble, and Stein-variational baselines plus a
distribution-shift evaluation harness.
"""

from .baselines import (
    BnnEnsemble,
    SoftmaxClassifier,
    predict_softmax,
    svgd_update,
    train_bnn,
    train_dnn,
    train_ensemble,
)
from .data import (
    FeatureSet,
    ImageSet,
    as_dataset,
    load_features_csv,
    load_idx,
    load_image_dir,
    rotate_images,
    subsample,
)
from .errors import DataError, FormatError, NumericError, PncaError
from .evaluation import (
    ConfidenceReport,
    PredictionRecord,
    accuracy,
    aggregate_trials,
    confidence_histogram,
    export_report,
    high_confidence_fraction,
    make_records,
)
from .kernels import (
    Bandwidth,
    OrfProjection,
    clamp_nonneg,
    median_bandwidth,
    orf_build,
    orf_map,
    param_rbf,
    sqexp,
    sqexp_grad,
)
from .mlp import MlpSpec, NadamState, forward, init_params, nadam_step, vjp
from .nca import (
    LabeledDataset,
    class_posterior,
    nca_loss,
    nca_param_grad,
    predict_nca,
    selection_probs,
    train_nca,
)
from .probabilistic import (
    EmpiricalKernelMatrix,
    ParticleEnsemble,
    embed_ensemble,
    empirical_kernel,
    functional_gradient,
    particle_grads,
    pnca_loss,
    pnca_probs,
    predict_pnca,
    train_pnca,
)
from .rng import Rng, gaussian_sample, random_orthogonal, seeded_rng

__version__ = "0.1.0"
