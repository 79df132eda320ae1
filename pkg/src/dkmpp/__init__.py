"""Covariate-driven spatio-temporal point process modeling.

Intensity models anchored at representative points carrying covariates, with
three trainable estimators (Monte-Carlo maximum likelihood, score matching,
denoising score matching), an inhomogeneous-Poisson thinning simulator,
evaluation metrics, and an experiment harness.
"""

from .diffengine import InputJet, ParamVector, eval_jet, finite_diff_check, param_grad
from .domain import (
    CovariateGrid,
    EventSequence,
    RepresentativeSet,
    SequenceSet,
    Window,
    build_representative_set,
    load_covariate_grid,
    load_sequences,
    normalize_to_canonical,
    split_by_time,
    write_covariate_grid,
    write_sequences,
)
from .estimators import (
    EstimatorConfig,
    NoisySequence,
    dsm_loss,
    mle_loss,
    perturb,
    sm_loss,
    train,
)
from .kernels import BaseKernelSpec, MlpSpec, base_kernel, deep_kernel, mlp_forward
from .metrics import MetricsReport, acc, evaluate, export_intensity_grid, intensity_rmse, tll
from .models import (
    DkmppModel,
    DmppModel,
    HomoPoissonModel,
    ScaledIntensity,
    build_dkmpp,
    build_dmpp,
    compensator_mc,
    fit_homopoisson,
    intensity,
    latent_field,
    load_checkpoint,
    log_intensity_jet,
    rbf_box_integral,
    save_checkpoint,
)
from .simulator import (
    SyntheticScenario,
    ThinningConfig,
    build_ground_truth,
    generate_dataset,
    thinning_sample,
    upper_bound,
)

__version__ = "0.1.0"
