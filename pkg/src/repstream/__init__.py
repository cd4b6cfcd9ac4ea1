"""Streaming runtime for temporally inflated 2D CNNs with repetition counting."""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError,
    ConfigWarning,
    ContractError,
    DataWarning,
    ManifestError,
    NumericError,
)
from .tensor import (
    BatchNormParams,
    ConvWeights,
    TensorND,
    classify_head,
    conv2d,
    fold_batchnorm,
    load_tensor,
    save_tensor,
    temporal_pointwise_conv,
)
from .netspec import (
    BlockSpec,
    HeadSpec,
    InflationSpec,
    InflationTarget,
    InputContract,
    NetworkSpec,
    StemSpec,
    build_reference_backbone,
    inflate,
    reference_inflation,
    shape_trace,
    trainability_mask,
)
from .runtime import Network, StreamSession, open_session, run_offline, stream_clip
from .counting import (
    CountResult,
    Event,
    EventTrack,
    FrameLabelSeq,
    SchemeDecoder,
    decode_count,
    densify,
    mape,
)
from .cost import CostReport, LayerCost, layer_macs, per_second_cost
from .pose import (
    CameraMotionParams,
    PoseSequence,
    SkeletonLayout,
    build_adjacency,
    build_layout,
    camera_motion_augment,
    crop_pose_window,
    map_to_openpose,
)
from .datasets import (
    ManifestEntry,
    SplitManifest,
    augment_clip,
    batch_concat_temporal,
    load_and_validate_manifest,
    make_synthetic_manifest,
    preprocess_clip,
    sample_fewshot,
)
from .training import (
    GradCheckReport,
    LossSpec,
    TrainConfig,
    backward_and_step,
    default_loss_spec,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
    train_counting_head,
    weighted_temporal_cross_entropy,
)
