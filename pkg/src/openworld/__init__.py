"""Unknown-object recognition from region proposals via reconstruction-error
Weibull modeling, with pseudo-label self-training and open-world metrics."""

from .boxes import Box, ScoredBox, area, aspect_ratio, iou, nms
from .features import (
    DEFAULT_LATENT_DIMS,
    SIZE_RANGES,
    ErrorMap,
    FeatureMap,
    Level,
    read_feature_map,
    write_feature_map,
)
from .autoencoder import (
    Autoencoder,
    TrainConfig,
    error_map,
    init_autoencoder,
    loss_gradient,
    reconstruct,
    reconstruction_loss,
    train,
)
from .weibull import (
    ErrorSamples,
    ExpWeibull,
    WeibullFitConfig,
    WeibullPair,
    fit_mle,
    fit_pair,
    sample_errors,
)
from .scoring import (
    RewModel,
    SoftLabeledProposal,
    label_proposals,
    pooled_error,
    route_level,
    soft_label,
)
from .pipeline import (
    FilterConfig,
    ProposalScorer,
    PseudoLabelSet,
    SelfTrainConfig,
    SelfTrainData,
    assign_localization_targets,
    filter_proposals,
    select_exemplars,
    select_top_percent,
    self_train,
    train_scorer,
    weighted_classification_loss,
    weighted_localization_loss,
)
from .evaluation import (
    Detection,
    EvalConfig,
    GroundTruth,
    TaskSplit,
    a_ose,
    average_precision,
    evaluate_task,
    recall_at_k,
    u_recall,
    wilderness_impact,
)
from .synth import (
    ScenarioConfig,
    SyntheticScenario,
    generate_raw_proposals,
    generate_scenario,
    sample_background_boxes,
)

__version__ = "0.1.0"
