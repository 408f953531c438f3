"""Green-Kubo and half-Einstein estimators with neural control variates."""

from .errors import (
    ConfigError,
    GkcvError,
    MissingSeriesError,
    NoAdjointError,
    NumericalError,
    QuadratureError,
    ReplicaFailure,
    TrainingDiverged,
)
from .estimate import (
    EstimatorReport,
    WeightFunction,
    asymptotic_variance_prediction,
    divergent_weight,
    get_weight,
    gk_cv_adjoint,
    gk_cv_combined,
    gk_cv_forward,
    gk_estimate,
    he_cv_adjoint,
    he_cv_combined,
    he_cv_forward,
    he_estimate,
    static_term_mc,
    static_term_quadrature,
    weight_catalog,
    zeta,
)
from .integrate import SimConfig, Trajectory, TrajectoryBatch, baoab_step, em_step, simulate_replicas
from .models import (
    DynamicsModel,
    LangevinParams,
    MultiscaleParams,
    apply_adjoint_generator_fd,
    apply_generator_fd,
    make_langevin,
    make_multiscale_fast,
    make_ou,
)

__version__ = "0.1.0"
