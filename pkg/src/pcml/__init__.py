"""Physics-constrained machine learning: hybrid models with enforced physics.

The package couples learned components with mechanistic ones (explicit and
bidirectional structures, neural ODE surrogates), trains them with soft
penalties, projection at every forward pass, or augmented-Lagrangian
constrained optimization, quantifies uncertainty by mean-field variational
inference with feasible posterior draws, and benchmarks everything on two
synthetic process problems with violation, generalization, and calibration
diagnostics.
"""

__version__ = "0.1.0"

from .autodiff import (
    ExprGraph,
    GradientCheckReport,
    GraphError,
    NumericOverflowError,
    Var,
    check_gradient_fd,
    concat,
    softplus,
    tanh,
)
from .bench import (
    BenchmarkProblem,
    ComparisonResult,
    ComparisonRow,
    MetricsReport,
    NoiseSpec,
    build_model,
    compare_ml_vs_pcml,
    evaluate,
    generate_data,
    mixer_problem,
    reactor_problem,
)
from .model import (
    Dataset,
    FixedPointConfig,
    FixedPointError,
    MLComponent,
    NeuralODEModel,
    ParameterLayout,
    PCMLModel,
    PhysicsComponent,
    Topology,
    identity_physics,
)
from .physics import (
    ConstraintSet,
    IntegratorConfig,
    NonlinearConstraint,
    ODESystem,
    OdeBlowUpError,
    emit_trajectory,
    integrate,
    make_species_balance,
    product_constraint,
    sphere_constraint,
)
from .project import (
    ProjectionNonConvergenceError,
    ProjectionResult,
    SingularKKTError,
    linear_project,
    newton_project,
    project_backward,
)
from .train import (
    AdamState,
    AugmentedLagrangianConfig,
    DivergenceError,
    Predictor,
    ProjectionTrainingError,
    SimultaneousStallError,
    TrainConfig,
    TrainReport,
    adam_step,
    data_loss,
    physics_loss,
    train_hard_sequential,
    train_hard_simultaneous,
    train_soft,
    training_gradient,
    training_objective,
)
from .uq import (
    GaussianPosterior,
    PosteriorDrawError,
    PredictiveBands,
    VIConfig,
    coverage,
    elbo_and_gradient,
    elbo_estimate,
    kl_gaussian,
    predictive_bands,
    train_vi,
)

# submodules stay reachable under their own names; the dispatcher functions
# train.train and project.project are deliberately not re-exported so the
# attributes pcml.train / pcml.project remain the modules
from . import autodiff, bench, model, physics, project, train, uq  # noqa: E402,F401

__all__ = [
    "__version__",
    # autodiff
    "ExprGraph",
    "Var",
    "GraphError",
    "NumericOverflowError",
    "GradientCheckReport",
    "check_gradient_fd",
    "tanh",
    "softplus",
    "concat",
    # physics
    "ConstraintSet",
    "NonlinearConstraint",
    "ODESystem",
    "IntegratorConfig",
    "OdeBlowUpError",
    "integrate",
    "emit_trajectory",
    "make_species_balance",
    "sphere_constraint",
    "product_constraint",
    # projection
    "SingularKKTError",
    "ProjectionNonConvergenceError",
    "ProjectionResult",
    "linear_project",
    "newton_project",
    "project_backward",
    # models
    "Topology",
    "FixedPointError",
    "FixedPointConfig",
    "ParameterLayout",
    "MLComponent",
    "PhysicsComponent",
    "identity_physics",
    "Dataset",
    "PCMLModel",
    "NeuralODEModel",
    # training
    "DivergenceError",
    "ProjectionTrainingError",
    "SimultaneousStallError",
    "AugmentedLagrangianConfig",
    "TrainConfig",
    "AdamState",
    "adam_step",
    "TrainReport",
    "data_loss",
    "physics_loss",
    "training_objective",
    "training_gradient",
    "train_soft",
    "train_hard_sequential",
    "train_hard_simultaneous",
    "Predictor",
    # uncertainty
    "GaussianPosterior",
    "PredictiveBands",
    "PosteriorDrawError",
    "VIConfig",
    "kl_gaussian",
    "elbo_estimate",
    "elbo_and_gradient",
    "train_vi",
    "predictive_bands",
    "coverage",
    # benchmarks
    "NoiseSpec",
    "BenchmarkProblem",
    "MetricsReport",
    "ComparisonRow",
    "ComparisonResult",
    "reactor_problem",
    "mixer_problem",
    "generate_data",
    "build_model",
    "evaluate",
    "compare_ml_vs_pcml",
]
