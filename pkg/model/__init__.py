from .mfml import (
    Hyperparams,
    MetricModel,
    PairConstraintSet,
    StepResult,
    consensus_metric,
    gradient_step,
    hinge_slope,
    logdet_divergence,
    mahalanobis_sq,
    objective,
    objective_gradient,
    sample_pairs,
    smoothed_hinge,
    train,
    train_single_metric,
    update_consensus,
)
