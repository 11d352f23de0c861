"""Few-shot class-incremental learning engine.

The base session trains a small rectifier encoder with a joint loss:
cross-entropy over a doubled proxy label space (each real class owns an
unmixed and a mixed label slot) plus a supervised contrastive term fed
by a momentum encoder and a FIFO key queue. Later sessions are few-shot
and register class prototypes only; evaluation is nearest-class-mean
with per-class aggregation over the prototype slots.
"""

from .augment import (
    CombinedFeatureBatch,
    TransformSet,
    combine_interleave,
    expand_batch,
    make_views,
    mix_features,
    proxy_decode,
    proxy_encode,
)
from .config import ConfigError, RunConfig, load_config, parse_config, render_config, with_overrides
from .data import DatasetSpec, SampleStore, Session, gen_synthetic, load_store, save_store, split_sessions
from .encoder import (
    EncoderSpec,
    ModelParams,
    forward_classifier,
    forward_features,
    forward_projection,
    init_params,
    load_checkpoint,
    momentum_sync,
    register_classes,
    save_checkpoint,
)
from .losses import FeatureQueue, class_loss, joint_loss, queue_push, sscl_loss
from .protocol import (
    AblationVariant,
    MetricsReport,
    ProtocolResult,
    SessionState,
    build_prototypes,
    compute_metrics,
    evaluate_session,
    ncm_integrated_predict,
    run_ablation,
    run_protocol,
    sweep_delta,
    train_base,
)
from .tensor import (
    GradTape,
    NumericError,
    ShapeError,
    Tensor,
    ema_update,
    finite_difference_check,
    no_grad,
    reverse_pass,
    sgd_momentum_step,
)

__version__ = "0.1.0"
