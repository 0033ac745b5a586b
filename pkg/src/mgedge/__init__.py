"""Multi-granularity edge detection over frozen segmentation-backbone features."""

from .backbone import (
    FeatureBundle,
    FeatureCache,
    MaskGuidance,
    ProviderConfig,
    ToyBackbone,
    extract_features,
    make_provider,
    masks_to_guidance,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DimensionError,
    InputError,
    MgedgeError,
    ProviderLoadError,
    TrainingDiverged,
)
from .evaluation import EvalConfig, EvalReport, best_match_evaluate, correspond, evaluate, nms_thin
from .granularity import (
    AnnotationSet,
    LabelLadder,
    blend,
    blend_levels,
    build_ladder,
    candidate_sweep,
    make_ladder,
    sample_consensus,
)
from .losses import LossBreakdown, balanced_bce, differ_loss, guide_loss, side_loss, total_loss
from .maps import EdgeMapSet
from .stn import SideTransferNetwork, SideOutputs, StnConfig, TensorBundle, parameter_count
from .train import AblationSwitches, TrainConfig, ablate, infer, run_training

__version__ = "0.1.0"
