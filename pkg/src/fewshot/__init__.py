"""Few-shot episodic learning with auxiliary-task regularization.

Prototype-based and gradient-adaptation classifiers trained episode by
episode, optionally regularized by a label-free reconstruction objective,
on top of a small tape-based reverse-mode autodiff engine.
"""

__version__ = "0.1.0"

from .config import ConfigError, RunConfig, load_config, scale_config
from .episodes import (
    ClassIndexedDataset,
    Episode,
    generate_synthetic,
    generate_synthetic_splits,
    load_image_folder,
    sample_episode,
)
from .maml import AdaptConfig, cross_entropy, inner_adapt, query_result, sgd_adapt
from .metatask import (
    LossBreakdown,
    MetaTaskRegularizer,
    ReconstructionTask,
    composite_loss,
    separability_check,
)
from .metrics import PredictionRecord, RunningStats, classification_report, format_report
from .models import (
    ArchSpec,
    Decoder,
    Encoder,
    LinearHead,
    build_decoder,
    build_encoder,
    build_head,
    decode,
    embed_dim,
    encode,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .optim import Adam
from .protonet import compute_prototypes, episode_loss, episode_loss_from_embeddings
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    grad_check,
    no_grad,
    set_nan_guard,
)
from .trainer import (
    EvalSummary,
    TrainingAborted,
    TrainResult,
    build_state,
    evaluate_checkpoint,
    evaluate_protonet,
    train,
)
