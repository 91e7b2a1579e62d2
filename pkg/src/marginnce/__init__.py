"""marginNCE: negative-margin contrastive learning for sound-source localization.

Library + CLI implementing the thresholded response-map pooling, the margin
contrastive objective with analytic gradients, cIoU/AUC localization metrics,
and a deterministic synthetic noisy-correspondence benchmark for margin
ablations at desk scale.
"""
from .avmap import (
    PoolConfig,
    cosine_response_map,
    soft_threshold_pool,
    soft_threshold_pool_grad,
)
from .backend import NUMBA_AVAILABLE, USE_NUMBA, backend_name
from .loss import LossConfig, margin_nce_grad, margin_nce_loss, similarity_matrix
from .metrics import (
    ConsensusMap,
    EvalConfig,
    EvalCurve,
    PredictionMap,
    bilinear_upsample,
    ciou,
    ciou_at_half,
    consensus_from_boxes,
    eval_curve,
    evaluate_prediction,
)
from .numerics import (
    ConfigError,
    DataError,
    DimensionError,
    NumericalFailure,
    RngStream,
    finite_diff_grad,
    relative_error,
    sigmoid,
)
from .synthdata import (
    SynthConfig,
    SyntheticScene,
    generate_scene,
    make_class_prototypes,
    make_split,
    make_train_test,
)
from .trainer import (
    Adam,
    ExperimentReport,
    RunRecord,
    Sgd,
    SweepSetup,
    ToyEncoder,
    TrainConfig,
    backward_batch,
    evaluate,
    forward_batch,
    margin_sweep,
    open_set_eval,
    train,
)

__version__ = "0.1.0"
